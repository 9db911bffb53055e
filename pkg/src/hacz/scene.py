"""Anchor scene data model, deterministic synthetic scenes, and file I/O.

A scene is a set of N anchors, each with a 3D location and three attribute
blocks: a feature vector (dim_feat values), six scaling components that live
in the open interval (0, 1), and k_offsets displacement vectors of three
components each.  Scenes are immutable after construction and serialize to a
little-endian binary format with float32 payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, SceneValidationError, TruncatedFileError

SCENE_MAGIC = b"HACS"
SCENE_VERSION = 1

DEFAULT_BOUNDS_PAD = 0.01
BOUNDS_EPS = 1e-6

# Low-frequency basis size used by the synthetic generator.
_SYNTH_BASIS = 8


def _f32_exact(values):
    """Round values through float32 so they survive file round trips."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class AABB:
    """Axis-aligned bounding box with float32-exact coordinates."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _f32_exact(self.min).reshape(3))
        object.__setattr__(self, "max", _f32_exact(self.max).reshape(3))
        if not (np.isfinite(self.min).all() and np.isfinite(self.max).all()):
            raise SceneValidationError("bounds contain non-finite values")
        if np.any(self.min > self.max):
            raise SceneValidationError("bounds min exceeds max")

    def __eq__(self, other):
        return (
            isinstance(other, AABB)
            and np.array_equal(self.min, other.min)
            and np.array_equal(self.max, other.max)
        )

    @property
    def extent(self):
        return self.max - self.min

    @classmethod
    def unit(cls):
        return cls(np.zeros(3), np.ones(3))


def normalize_locations(locations, bounds):
    """Map world locations into [0, 1]^3 relative to bounds, clamped.

    Anchors outside the box (possible when bounds were frozen earlier) are
    clamped rather than rejected.
    """
    x = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    extent = np.maximum(bounds.extent, np.finfo(np.float64).tiny)
    t = (x - bounds.min) / extent
    return np.clip(t, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class AnchorScene:
    """N anchors with locations and the (features, scalings, offsets) triple."""

    locations: np.ndarray  # (N, 3) float32, world units
    features: np.ndarray  # (N, dim_feat) float32
    scalings: np.ndarray  # (N, 6) float32, each in (0, 1)
    offsets: np.ndarray  # (N, 3 * k_offsets) float32, world units
    bounds: AABB

    def __post_init__(self):
        for name in ("locations", "features", "scalings", "offsets"):
            arr = np.array(getattr(self, name), dtype=np.float32, order="C")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        validate_scene(self)

    @property
    def n(self):
        return self.locations.shape[0]

    @property
    def dim_feat(self):
        return self.features.shape[1]

    @property
    def k_offsets(self):
        return self.offsets.shape[1] // 3

    def __eq__(self, other):
        return (
            isinstance(other, AnchorScene)
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.scalings, other.scalings)
            and np.array_equal(self.offsets, other.offsets)
            and self.bounds == other.bounds
        )


def validate_scene(scene):
    """Check scene invariants, naming the offending array on failure."""
    n = scene.locations.shape[0]
    if scene.locations.ndim != 2 or scene.locations.shape[1] != 3:
        raise SceneValidationError("locations must have shape (N, 3)")
    if scene.scalings.shape != (n, 6):
        raise SceneValidationError("scalings must have shape (N, 6)")
    if scene.features.ndim != 2 or scene.features.shape[0] != n:
        raise SceneValidationError("features row count does not match locations")
    if scene.offsets.ndim != 2 or scene.offsets.shape[0] != n:
        raise SceneValidationError("offsets row count does not match locations")
    if scene.features.shape[1] < 1:
        raise SceneValidationError("features must have at least one column")
    if scene.offsets.shape[1] < 3 or scene.offsets.shape[1] % 3 != 0:
        raise SceneValidationError("offsets column count must be a positive multiple of 3")
    for name in ("locations", "features", "scalings", "offsets"):
        if not np.isfinite(getattr(scene, name)).all():
            raise SceneValidationError(f"{name} contain non-finite values")
    if n and (np.any(scene.scalings <= 0.0) or np.any(scene.scalings >= 1.0)):
        raise SceneValidationError("scalings must lie strictly inside (0, 1)")


def synth_scene(seed, n, dim_feat, k_offsets, smoothness=0.8):
    """Generate a deterministic synthetic scene.

    Locations are uniform in the unit cube.  Each attribute value is a
    seeded mixture of a shared low-frequency spatial field (weight =
    smoothness) and i.i.d. unit noise (weight = 1 - smoothness), rescaled to
    unit variance.  Scalings pass through a sigmoid so they land in (0, 1).

    The output is a pure function of the arguments.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if dim_feat < 1 or k_offsets < 1:
        raise ValueError("dim_feat and k_offsets must be >= 1")
    if not 0.0 <= smoothness <= 1.0:
        raise ValueError("smoothness must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    locations = rng.random((n, 3))

    # Shared spatial basis: a few random sinusoids with integer frequencies,
    # each with unit variance over the cube.
    freqs = rng.integers(1, 4, size=(_SYNTH_BASIS, 3)).astype(np.float64)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=_SYNTH_BASIS)
    basis = np.sqrt(2.0) * np.sin(
        2.0 * np.pi * locations @ freqs.T + phases
    )  # (n, basis)

    def mixed(dim, scale):
        coefs = rng.standard_normal((_SYNTH_BASIS, dim))
        norms = np.linalg.norm(coefs, axis=0)
        coefs = coefs / np.where(norms > 0, norms, 1.0)
        smooth = basis @ coefs if n else np.zeros((0, dim))
        noise = rng.standard_normal((n, dim))
        denom = np.sqrt(smoothness**2 + (1.0 - smoothness) ** 2)
        return scale * (smoothness * smooth + (1.0 - smoothness) * noise) / denom

    features = mixed(dim_feat, 1.0)
    scal_raw = mixed(6, 0.5)
    offsets = mixed(3 * k_offsets, 0.15)
    scalings = 1.0 / (1.0 + np.exp(-scal_raw))
    # Keep scalings strictly interior after the float32 cast.
    scalings = np.clip(scalings, 1e-6, 1.0 - 1e-6)

    return AnchorScene(
        locations=locations.astype(np.float32),
        features=features.astype(np.float32),
        scalings=scalings.astype(np.float32),
        offsets=offsets.astype(np.float32),
        bounds=AABB.unit(),
    )


def scene_bounds(scene, pad=DEFAULT_BOUNDS_PAD):
    """Componentwise location bounds expanded by pad * extent per axis.

    Axes with zero extent are expanded by an absolute epsilon instead, so the
    box always has strictly positive extent.
    """
    if scene.n < 1:
        raise SceneValidationError("scene_bounds requires at least one anchor")
    lo = scene.locations.min(axis=0).astype(np.float64)
    hi = scene.locations.max(axis=0).astype(np.float64)
    extent = hi - lo
    expand = pad * extent
    expand[extent == 0.0] = BOUNDS_EPS
    return AABB(lo - expand, hi + expand)


# ---------------------------------------------------------------------------
# Scene file format (".hacscene"): magic, version u32, N/D/K u64, AABB as six
# f32, then locations / features / scalings / offsets as row-major f32.
# All integers and reals little-endian.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQQQ")


def save_scene(scene, path):
    validate_scene(scene)
    parts = [_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.n, scene.dim_feat, scene.k_offsets)]
    parts.append(scene.bounds.min.astype("<f4").tobytes())
    parts.append(scene.bounds.max.astype("<f4").tobytes())
    for name in ("locations", "features", "scalings", "offsets"):
        parts.append(np.ascontiguousarray(getattr(scene, name), dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_scene(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, n, dim_feat, k_offsets = _HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size

    def take(count, name):
        nonlocal pos
        nbytes = 4 * count
        if pos + nbytes > len(data):
            raise TruncatedFileError(f"{path}: truncated while reading {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += nbytes
        return arr

    bmin = take(3, "bounds")
    bmax = take(3, "bounds")
    locations = take(n * 3, "locations").reshape(n, 3)
    features = take(n * dim_feat, "features").reshape(n, dim_feat)
    scalings = take(n * 6, "scalings").reshape(n, 6)
    offsets = take(n * 3 * k_offsets, "offsets").reshape(n, 3 * k_offsets)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return AnchorScene(
        locations=locations,
        features=features,
        scalings=scalings,
        offsets=offsets,
        bounds=AABB(bmin, bmax),
    )
