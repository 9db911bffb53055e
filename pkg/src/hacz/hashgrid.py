"""Binarized mixed 3D / tri-plane multi-resolution hash grid.

Each level stores a table of real-valued parameters whose forward values are
their signs in {-1, +1} (sign(0) = +1).  A level is addressed densely when
its full lattice fits in the table budget, otherwise by an XOR-fold spatial
hash.  The 2D levels are realized as three axis-aligned planes (xy, xz, yz)
whose bilinear features are concatenated, so the interpolated feature has
dim_embed * (levels_3d + 3 * levels_2d) components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoderError, HaczError
from .scene import AABB

HASH_PRIMES = (1, 2654435761, 805459861)

# Empirical +1 frequency is clamped away from {0, 1} before taking logs.
FREQ_EPS = 1e-6

# Straight-through gradients pass where the underlying parameter is in
# [-1, 1] and are zero outside (clipped straight-through).
STE_CLIP = 1.0


def _geometric_resolutions(n, lo, hi):
    if n == 1:
        return (int(lo),)
    ratio = (hi / lo) ** (1.0 / (n - 1))
    res = tuple(int(round(lo * ratio**i)) for i in range(n))
    return res


@dataclass(frozen=True)
class GridConfig:
    levels_3d: int = 12
    levels_2d: int = 4
    res_3d: tuple = field(default_factory=lambda: _geometric_resolutions(12, 16, 512))
    res_2d: tuple = field(default_factory=lambda: _geometric_resolutions(4, 128, 1024))
    table_3d_max: int = 1 << 13
    table_2d_max: int = 1 << 15
    dim_embed: int = 4

    def __post_init__(self):
        if self.levels_3d + self.levels_2d < 1:
            raise HaczError("grid needs at least one level")
        if len(self.res_3d) != self.levels_3d or len(self.res_2d) != self.levels_2d:
            raise HaczError("resolution list lengths must match level counts")
        for res in (self.res_3d, self.res_2d):
            if any(r < 2 for r in res):
                raise HaczError("level resolutions must be >= 2")
            if any(b <= a for a, b in zip(res, res[1:])):
                raise HaczError("resolutions must be strictly increasing")
        for t in (self.table_3d_max, self.table_2d_max):
            if t < 1 or (t & (t - 1)) != 0:
                raise HaczError("table sizes must be powers of two")
        if self.dim_embed < 1:
            raise HaczError("dim_embed must be >= 1")

    @property
    def feature_dim(self):
        return self.dim_embed * (self.levels_3d + 3 * self.levels_2d)

    def table_entries(self):
        """Entry count per table, in canonical order (3D levels, then for
        each 2D level the xy, xz, yz planes)."""
        out = [min(r**3, self.table_3d_max) for r in self.res_3d]
        for r in self.res_2d:
            out.extend([min(r**2, self.table_2d_max)] * 3)
        return out

    @property
    def total_params(self):
        return sum(self.table_entries()) * self.dim_embed

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def small(cls):
        return cls(
            levels_3d=4,
            levels_2d=2,
            res_3d=_geometric_resolutions(4, 8, 32),
            res_2d=_geometric_resolutions(2, 32, 64),
            table_3d_max=1 << 11,
            table_2d_max=1 << 12,
        )


GRID_PRESETS = {"paper": GridConfig.paper, "small": GridConfig.small}

# (resolution, table_entries, axis pair or None) per canonical table.
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def _table_specs(config):
    specs = []
    for r in config.res_3d:
        specs.append((r, min(r**3, config.table_3d_max), None))
    for r in config.res_2d:
        entries = min(r**2, config.table_2d_max)
        for axes in _PLANE_AXES:
            specs.append((r, entries, axes))
    return specs


@dataclass(eq=False)
class HashGrid:
    """Per-level parameter tables plus the bounds used to normalize queries.

    ``params`` is a list of (entries, dim_embed) float64 arrays in canonical
    table order.  Forward values are always sign(params).
    """

    config: GridConfig
    params: list
    bounds: AABB = field(default_factory=AABB.unit)

    def binarized(self):
        """Forward values of every table: sign(theta) with sign(0) = +1."""
        return [np.where(t >= 0.0, 1.0, -1.0) for t in self.params]

    def counts(self):
        """(M_plus, M_minus) over all tables."""
        m_plus = sum(int((t >= 0.0).sum()) for t in self.params)
        total = sum(t.size for t in self.params)
        return m_plus, total - m_plus


def grid_new(config, seed, bounds=None):
    """Fresh grid with parameters uniform in [-1e-2, 1e-2], seeded."""
    rng = np.random.default_rng(seed)
    params = [
        rng.uniform(-1e-2, 1e-2, size=(entries, config.dim_embed))
        for _, entries, _ in _table_specs(config)
    ]
    return HashGrid(config=config, params=params, bounds=bounds or AABB.unit())


def hash_index(level_res, table_size, cell):
    """Table index of a lattice vertex.

    Dense levels (full lattice fits in the table) use row-major addressing;
    hashed levels XOR-fold the coordinates with fixed primes modulo the
    table size.  Vertex coordinates must lie in [0, level_res).
    """
    cell = np.asarray(cell, dtype=np.int64)
    ndim = cell.shape[-1]
    if ndim not in (2, 3):
        raise CoderError("cell must have 2 or 3 components")
    if np.any(cell < 0) or np.any(cell >= level_res):
        raise CoderError("cell out of range for level resolution")
    dense = level_res**ndim <= table_size
    c = cell.astype(np.uint64)
    if dense:
        idx = c[..., 0]
        stride = np.uint64(level_res)
        mult = stride
        for axis in range(1, ndim):
            idx = idx + c[..., axis] * mult
            mult = mult * stride
        return idx.astype(np.int64)
    acc = c[..., 0] * np.uint64(HASH_PRIMES[0])
    for axis in range(1, ndim):
        acc = np.bitwise_xor(acc, c[..., axis] * np.uint64(HASH_PRIMES[axis]))
    return (acc % np.uint64(table_size)).astype(np.int64)


_CORNERS_3D = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)
_CORNERS_2D = np.array([[i, j] for i in (0, 1) for j in (0, 1)], dtype=np.int64)


def _lattice(x, res):
    """Base vertex and fractional offset for a lattice with `res` vertices
    per axis.  The base is clamped to res - 2 so the upper corner stays in
    range; at the right edge the fraction reaches exactly 1."""
    pos = x * (res - 1)
    base = np.minimum(np.floor(pos), res - 2).astype(np.int64)
    frac = pos - base
    return base, frac


def level_corners(x_norm, res, table_size, axes=None):
    """Corner table indices and interpolation weights for a batch of points.

    Returns (indices, weights) with shapes (B, 8) / (B, 8) for 3D levels and
    (B, 4) / (B, 4) for plane levels.
    """
    x = np.asarray(x_norm, dtype=np.float64).reshape(-1, 3)
    if axes is not None:
        x = x[:, list(axes)]
        corners = _CORNERS_2D
    else:
        corners = _CORNERS_3D
    base, frac = _lattice(x, res)
    cells = base[:, None, :] + corners[None, :, :]
    idx = hash_index(res, table_size, cells)
    w = np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    return idx, w.prod(axis=2)


def interpolate_batch(grid, x_norm, mode="hard"):
    """Interpolated hash features for points in [0, 1]^3.

    mode="hard" blends binarized table values (the coding path);
    mode="tanh" blends tanh(theta) (smooth surrogate used by gradient
    verification).  Output shape is (B, feature_dim); every component is a
    convex combination of values in [-1, 1].
    """
    cfg = grid.config
    x = np.asarray(x_norm, dtype=np.float64).reshape(-1, 3)
    parts = []
    for spec, table in zip(_table_specs(cfg), grid.params):
        res, entries, axes = spec
        idx, w = level_corners(x, res, entries, axes)
        vals = _forward_values(table, mode)[idx]
        parts.append(np.einsum("bc,bcd->bd", w, vals))
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(x), 0))


def _forward_values(table, mode):
    if mode == "hard":
        return np.where(table >= 0.0, 1.0, -1.0)
    if mode == "tanh":
        return np.tanh(table)
    raise ValueError(f"unknown mode {mode!r}")


def interpolate(grid, x_norm):
    """Single-point convenience wrapper around interpolate_batch."""
    return interpolate_batch(grid, np.asarray(x_norm).reshape(1, 3))[0]


def hash_entropy_bits_at(m_plus, m_minus, freq):
    """Cross-entropy bit count of the sign counts under +1 frequency `freq`."""
    f = min(max(freq, FREQ_EPS), 1.0 - FREQ_EPS)
    return m_plus * (-np.log2(f)) + m_minus * (-np.log2(1.0 - f))


def hash_entropy_loss(grid):
    """Estimated bits to code the binarized grid with its empirical +1
    frequency (clamped away from 0 and 1)."""
    m_plus, m_minus = grid.counts()
    total = m_plus + m_minus
    if total < 1:
        raise HaczError("grid has no parameters")
    return hash_entropy_bits_at(m_plus, m_minus, m_plus / total)


def grid_pack(grid):
    """Binarized values as a 0/1 array in canonical order (+1 maps to 1).

    Canonical order: tables as listed by the config (3D levels low to high,
    then each 2D level's xy, xz, yz planes), entries ascending, embedding
    dimension ascending.
    """
    bits = [np.where(t.reshape(-1) >= 0.0, 1, 0) for t in grid.params]
    return np.concatenate(bits).astype(np.uint8) if bits else np.zeros(0, np.uint8)


def grid_unpack(bits, config, bounds=None):
    """Rebuild a grid whose forward values reproduce the packed bits."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size != config.total_params:
        raise CoderError(
            f"bit count {bits.size} does not match config ({config.total_params})"
        )
    params = []
    pos = 0
    for _, entries, _ in _table_specs(config):
        count = entries * config.dim_embed
        chunk = bits[pos : pos + count].astype(np.float64) * 2.0 - 1.0
        params.append(chunk.reshape(entries, config.dim_embed))
        pos += count
    return HashGrid(config=config, params=params, bounds=bounds or AABB.unit())
