"""Compressed container format and end-to-end encode/decode orchestration.

A blob holds five sections: S1 raw MLP weights (float32), S2 surviving
anchor locations (float16), S3 mask bits of surviving anchors, S4 the packed
hash grid, and S5 the three entropy-coded attribute family streams.  The
decoder first restores S1-S4, then recomputes every rate parameter from the
decoded-precision inputs (half-precision locations, binarized grid, float32
weights) through the same code path the encoder used, so both sides build
byte-identical probability tables.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import coder
from .coder import (
    BinaryModel,
    K_GLOBAL_MAX,
    K_GLOBAL_MIN,
    build_tables,
    decode_bits,
    decode_stream,
    encode_bits,
    encode_stream,
)
from .errors import (
    FormatError,
    HaczError,
    SceneValidationError,
    SectionOverrunError,
    SymbolRangeError,
)
from .hashgrid import GridConfig, HashGrid, grid_pack, grid_unpack, interpolate_batch
from .masking import MaskSet
from .ratemodel import (
    FAMILIES,
    ContextModel,
    family_slices,
    model_forward_batch,
    quantize_test,
)
from .scene import AABB, AnchorScene, normalize_locations, validate_scene

BLOB_MAGIC = b"HACZ"
BLOB_VERSION = 1

SECTION_NAMES = ("mlp", "locations", "masks", "grid", "attributes")

# Decoded scalings are clamped into the open unit interval.
_SCAL_CLAMP = 1e-7

_FIXED1 = struct.Struct("<4sIQQQIIIIQQ")
_FIXED2 = struct.Struct("<3f2f6fHH3Q")
_SECTION = struct.Struct("<QQ")


def _header_size(levels_3d, levels_2d):
    return _FIXED1.size + 4 * (levels_3d + levels_2d) + _FIXED2.size + 5 * _SECTION.size


@dataclass(eq=False)
class EncodeStats:
    """Encoder-side measurements kept alongside a blob (not serialized)."""

    info_bits: dict = field(default_factory=dict)  # family -> sum(-log2 p_hat)
    payload_bytes: dict = field(default_factory=dict)
    coded_values: dict = field(default_factory=dict)
    clamped_symbols: int = 0


@dataclass(eq=False)
class EncodeReference:
    """Exactly what the decoder must reproduce, for verification."""

    loc16: np.ndarray
    mask_bits: np.ndarray
    grid_bits: np.ndarray
    model_bytes: bytes
    symbols: dict  # family -> flat coded symbol array
    scene: AnchorScene  # dequantized attributes, as the decoder will emit


@dataclass(eq=False)
class HaczBlob:
    """Parsed container: header fields plus raw section payloads."""

    n_kept: int
    dim_feat: int
    k_offsets: int
    grid_config: GridConfig
    hidden: int
    q0: np.ndarray
    lambda_e: float
    lambda_m: float
    bounds: AABB
    mask_f1: int
    grid_f1: int
    s5_lengths: tuple
    sections: dict  # name -> bytes
    stats: EncodeStats | None = None
    reference: EncodeReference | None = None

    def to_bytes(self):
        cfg = self.grid_config
        hsize = _header_size(cfg.levels_3d, cfg.levels_2d)
        parts = [
            _FIXED1.pack(
                BLOB_MAGIC, BLOB_VERSION, self.n_kept, self.dim_feat,
                self.k_offsets, cfg.levels_3d, cfg.levels_2d, cfg.dim_embed,
                self.hidden, cfg.table_3d_max, cfg.table_2d_max,
            ),
            np.asarray(cfg.res_3d + cfg.res_2d, dtype="<u4").tobytes(),
            _FIXED2.pack(
                *np.asarray(self.q0, dtype=np.float64),
                self.lambda_e, self.lambda_m,
                *self.bounds.min, *self.bounds.max,
                self.mask_f1, self.grid_f1, *self.s5_lengths,
            ),
        ]
        offset = hsize
        table = []
        for name in SECTION_NAMES:
            data = self.sections[name]
            table.append(_SECTION.pack(offset, len(data)))
            offset += len(data)
        parts.extend(table)
        parts.extend(self.sections[name] for name in SECTION_NAMES)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _FIXED1.size:
            raise FormatError("blob shorter than fixed header")
        (magic, version, n_kept, dim_feat, k_offsets, l3, l2, dim_embed,
         hidden, t3, t2) = _FIXED1.unpack_from(data, 0)
        if magic != BLOB_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != BLOB_VERSION:
            raise FormatError(f"unsupported version {version}")
        hsize = _header_size(l3, l2)
        if len(data) < hsize:
            raise FormatError("blob shorter than its header")
        pos = _FIXED1.size
        res = np.frombuffer(data, dtype="<u4", count=l3 + l2, offset=pos)
        pos += 4 * (l3 + l2)
        fixed2 = _FIXED2.unpack_from(data, pos)
        pos += _FIXED2.size
        q0 = np.asarray(fixed2[0:3], dtype=np.float32).astype(np.float64)
        lambda_e, lambda_m = fixed2[3:5]
        bounds = AABB(np.asarray(fixed2[5:8]), np.asarray(fixed2[8:11]))
        mask_f1, grid_f1 = fixed2[11:13]
        s5_lengths = tuple(fixed2[13:16])
        table = []
        for _ in range(5):
            table.append(_SECTION.unpack_from(data, pos))
            pos += _SECTION.size
        expected = hsize
        sections = {}
        for name, (offset, length) in zip(SECTION_NAMES, table):
            if offset != expected:
                raise SectionOverrunError(f"section {name} offset out of order")
            if offset + length > len(data):
                raise SectionOverrunError(f"section {name} extends past end of file")
            sections[name] = data[offset : offset + length]
            expected = offset + length
        if expected != len(data):
            raise FormatError(f"{len(data) - expected} trailing bytes after sections")
        if sum(s5_lengths) != len(sections["attributes"]):
            raise SectionOverrunError("family stream lengths disagree with section")
        cfg = GridConfig(
            levels_3d=l3, levels_2d=l2,
            res_3d=tuple(int(r) for r in res[:l3]),
            res_2d=tuple(int(r) for r in res[l3:]),
            table_3d_max=t3, table_2d_max=t2, dim_embed=dim_embed,
        )
        return cls(
            n_kept=n_kept, dim_feat=dim_feat, k_offsets=k_offsets,
            grid_config=cfg, hidden=hidden, q0=q0, lambda_e=lambda_e,
            lambda_m=lambda_m, bounds=bounds, mask_f1=mask_f1,
            grid_f1=grid_f1, s5_lengths=s5_lengths, sections=sections,
        )


# ---------------------------------------------------------------------------
# The canonical rate-parameter evaluation both codec sides share.
# ---------------------------------------------------------------------------

def coding_rate_params(loc16, grid, model, bounds):
    """Rate parameters from decoded-precision inputs.

    loc16 must be float16 locations; the grid is used through its binarized
    values only; the model is expected in coding precision (float32-exact
    weights).  Identical on the encoder and decoder by construction.
    """
    x = np.asarray(loc16, dtype=np.float16).astype(np.float64).reshape(-1, 3)
    t = normalize_locations(x, bounds)
    fh = interpolate_batch(grid, t, mode="hard")
    return model_forward_batch(fh, model)


def _sigma_bounds_for(model, fam_index):
    lo, hi = model.sigma_bounds()
    return float(lo[fam_index]), float(hi[fam_index])


def _model_to_bytes(model):
    return b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.weight_arrays()
    )


def _model_from_bytes(data, dim_in, hidden, dim_feat, k_offsets, q0):
    dims = (dim_feat, 6, 3 * k_offsets)
    dim_out = 3 + 2 * sum(dims)
    shapes = [(dim_in, hidden), (hidden,), (hidden, hidden), (hidden,),
              (hidden, dim_out), (dim_out,)]
    need = sum(int(np.prod(s)) for s in shapes) * 4
    if len(data) != need:
        raise SectionOverrunError(
            f"mlp section holds {len(data)} bytes, expected {need}"
        )
    arrays = []
    pos = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        arrays.append(arr.astype(np.float64).reshape(shape))
        pos += count * 4
    return ContextModel(*arrays, q0=np.asarray(q0, dtype=np.float64),
                        dim_feat=dim_feat, k_offsets=k_offsets)


def _dequantize(k, q, family):
    f = k.astype(np.float64) * q
    if family == "scal":
        f = np.clip(f, _SCAL_CLAMP, 1.0 - _SCAL_CLAMP)
    return f.astype(np.float32)


def _check_symbol_bounds(k, family, anchor_ids, coded_mask=None):
    bad = (k < K_GLOBAL_MIN) | (k > K_GLOBAL_MAX)
    if coded_mask is not None:
        bad &= coded_mask
    if bad.any():
        a, d = np.argwhere(bad)[0]
        raise SymbolRangeError(
            f"anchor {int(anchor_ids[a])}: {family}[{int(d)}] quantizes outside "
            f"the global symbol range"
        )


def encode_scene(scene, grid, model, masks, lambda_e=0.0, lambda_m=0.0):
    """Compress a scene given trained (or fresh) artifacts.

    Rate parameters are evaluated from half-precision locations, the
    binarized grid, and float32 weights, exactly as the decoder will.
    Returns a HaczBlob carrying encoder stats and reference values.
    """
    validate_scene(scene)
    if masks.logits.shape != (scene.n, scene.k_offsets):
        raise HaczError("mask shape does not match scene")
    if model.dim_feat != scene.dim_feat or model.k_offsets != scene.k_offsets:
        raise HaczError("model attribute dims do not match scene")
    if model.dim_in != grid.config.feature_dim:
        raise HaczError("model input dim does not match grid feature dim")

    model32 = model.to_coding_precision()
    bounds = grid.bounds
    hard = masks.hard
    keep = hard.any(axis=1)
    kept_ids = np.flatnonzero(keep)
    n_kept = int(keep.sum())
    hard_k = hard[keep]

    loc16 = scene.locations[keep].astype(np.float16)
    rate = coding_rate_params(loc16, grid, model32, bounds)
    qv = rate.q_per_dim(scene.dim_feat, scene.k_offsets)
    sl = family_slices(scene.dim_feat, scene.k_offsets)
    mask3 = np.repeat(hard_k.astype(bool), 3, axis=1)

    stats = EncodeStats()
    payloads = {}
    symbols_out = {}
    values = {}
    blocks = {
        "feat": scene.features[keep].astype(np.float64),
        "scal": scene.scalings[keep].astype(np.float64),
        "off": scene.offsets[keep].astype(np.float64),
    }
    for fam_index, fam in enumerate(FAMILIES):
        s = sl[fam_index]
        vals = blocks[fam]
        q_cols = qv[:, s]
        mu = rate.mu[:, s]
        sigma = rate.sigma[:, s]
        if fam == "off":
            coded = mask3
        else:
            coded = np.ones(vals.shape, dtype=bool)
        if n_kept:
            k2d, _ = quantize_test(vals, q_cols)
        else:
            k2d = np.zeros(vals.shape, dtype=np.int64)
        _check_symbol_bounds(k2d, fam, kept_ids, coded)
        k_flat = k2d[coded]
        lo_b, hi_b = _sigma_bounds_for(model32, fam_index)
        ts = build_tables(mu[coded], sigma[coded], q_cols[coded], lo_b, hi_b)
        k_flat, n_clamped = ts.clamp_symbols(k_flat)
        stats.clamped_symbols += n_clamped
        if ts.count:
            payload, info = encode_stream(k_flat, ts)
        else:
            payload, info = b"", 0.0
        payloads[fam] = payload
        stats.info_bits[fam] = info
        stats.payload_bytes[fam] = len(payload)
        stats.coded_values[fam] = int(ts.count)
        symbols_out[fam] = k_flat
        fhat = np.zeros(vals.shape, dtype=np.float32)
        fhat[coded] = _dequantize(k_flat, q_cols[coded], fam)
        values[fam] = fhat

    mask_bits = hard_k.reshape(-1).astype(np.uint8)
    mask_model = BinaryModel.from_bits(mask_bits)
    grid_bits = grid_pack(grid)
    grid_model = BinaryModel.from_bits(grid_bits)

    sections = {
        "mlp": _model_to_bytes(model32),
        "locations": np.ascontiguousarray(loc16, dtype="<f2").tobytes(),
        "masks": encode_bits(mask_bits, mask_model) if mask_bits.size else b"",
        "grid": encode_bits(grid_bits, grid_model),
        "attributes": payloads["feat"] + payloads["scal"] + payloads["off"],
    }

    ref_scene = AnchorScene(
        locations=loc16.astype(np.float32),
        features=values["feat"],
        scalings=values["scal"] if n_kept else np.zeros((0, 6), np.float32),
        offsets=values["off"],
        bounds=bounds,
    )
    blob = HaczBlob(
        n_kept=n_kept,
        dim_feat=scene.dim_feat,
        k_offsets=scene.k_offsets,
        grid_config=grid.config,
        hidden=model.hidden,
        q0=model32.q0,
        lambda_e=float(lambda_e),
        lambda_m=float(lambda_m),
        bounds=bounds,
        mask_f1=mask_model.f_one,
        grid_f1=grid_model.f_one,
        s5_lengths=tuple(len(payloads[f]) for f in FAMILIES),
        sections=sections,
        stats=stats,
        reference=EncodeReference(
            loc16=loc16,
            mask_bits=mask_bits,
            grid_bits=grid_bits,
            model_bytes=sections["mlp"],
            symbols=symbols_out,
            scene=ref_scene,
        ),
    )
    return blob


@dataclass(eq=False)
class DecodedScene:
    """Everything a blob reconstructs."""

    scene: AnchorScene
    mask_bits: np.ndarray  # (n_kept, K) uint8, every row has at least one 1
    grid: HashGrid
    model: ContextModel
    symbols: dict  # family -> flat coded symbol array
    blob: HaczBlob

    @property
    def masks(self):
        return MaskSet.from_bits(self.mask_bits) if self.mask_bits.size else \
            MaskSet.from_bits(np.zeros((0, self.blob.k_offsets)))


def decode_scene(blob):
    """Reconstruct the scene, masks, grid, and model from a blob."""
    if isinstance(blob, (bytes, bytearray, memoryview)):
        blob = HaczBlob.from_bytes(bytes(blob))
    cfg = blob.grid_config
    n_kept, dim_feat, k_offsets = blob.n_kept, blob.dim_feat, blob.k_offsets

    model = _model_from_bytes(
        blob.sections["mlp"], cfg.feature_dim, blob.hidden, dim_feat,
        k_offsets, blob.q0,
    )

    loc_bytes = blob.sections["locations"]
    if len(loc_bytes) != n_kept * 6:
        raise SectionOverrunError("locations section length mismatch")
    loc16 = np.frombuffer(loc_bytes, dtype="<f2").reshape(n_kept, 3)

    if n_kept:
        mask_bits = decode_bits(
            blob.sections["masks"], n_kept * k_offsets, BinaryModel(blob.mask_f1)
        ).reshape(n_kept, k_offsets)
    else:
        if blob.sections["masks"]:
            raise SectionOverrunError("mask section should be empty")
        mask_bits = np.zeros((0, k_offsets), dtype=np.uint8)

    grid_bits = decode_bits(
        blob.sections["grid"], cfg.total_params, BinaryModel(blob.grid_f1)
    )
    grid = grid_unpack(grid_bits, cfg, bounds=blob.bounds)

    rate = coding_rate_params(loc16, grid, model, blob.bounds)
    qv = rate.q_per_dim(dim_feat, k_offsets)
    sl = family_slices(dim_feat, k_offsets)
    mask3 = np.repeat(mask_bits.astype(bool), 3, axis=1)

    attr = blob.sections["attributes"]
    streams = []
    pos = 0
    for length in blob.s5_lengths:
        streams.append(attr[pos : pos + length])
        pos += length

    arrays = {}
    symbols = {}
    for fam_index, fam in enumerate(FAMILIES):
        s = sl[fam_index]
        dim = s.stop - s.start
        coded = mask3 if fam == "off" else np.ones((n_kept, dim), dtype=bool)
        q_cols = qv[:, s]
        lo_b, hi_b = _sigma_bounds_for(model, fam_index)
        ts = build_tables(
            rate.mu[:, s][coded], rate.sigma[:, s][coded], q_cols[coded],
            lo_b, hi_b,
        )
        if ts.count:
            k_flat = decode_stream(streams[fam_index], ts)
        else:
            if streams[fam_index]:
                raise SectionOverrunError(f"{fam} stream should be empty")
            k_flat = np.zeros(0, dtype=np.int64)
        symbols[fam] = k_flat
        out = np.zeros((n_kept, dim), dtype=np.float32)
        out[coded] = _dequantize(k_flat, q_cols[coded], fam)
        arrays[fam] = out

    scene = AnchorScene(
        locations=loc16.astype(np.float32),
        features=arrays["feat"],
        scalings=arrays["scal"],
        offsets=arrays["off"],
        bounds=blob.bounds,
    )
    return DecodedScene(scene=scene, mask_bits=mask_bits, grid=grid,
                        model=model, symbols=symbols, blob=blob)


def reencode(decoded):
    """Re-encode a decoded scene; a correct pipeline reproduces the blob."""
    masks = MaskSet.from_bits(decoded.mask_bits) if decoded.mask_bits.size \
        else MaskSet.from_bits(np.ones((decoded.scene.n, decoded.blob.k_offsets)))
    if decoded.scene.n == 0:
        masks = MaskSet.from_bits(np.zeros((0, decoded.blob.k_offsets)))
    return encode_scene(
        decoded.scene, decoded.grid, decoded.model, masks,
        lambda_e=decoded.blob.lambda_e, lambda_m=decoded.blob.lambda_m,
    )


def verify_roundtrip(scene, grid, model, masks, lambda_e=0.0, lambda_m=0.0):
    """Encode, serialize, decode, and compare every reconstructed value.

    Returns (ok, mismatches) where mismatches lists human-readable names of
    anything that failed to reproduce bit-exactly.
    """
    blob = encode_scene(scene, grid, model, masks, lambda_e, lambda_m)
    ref = blob.reference
    decoded = decode_scene(HaczBlob.from_bytes(blob.to_bytes()))
    problems = []
    if decoded.scene.locations.astype(np.float16).tobytes() != ref.loc16.tobytes():
        problems.append("locations")
    if not np.array_equal(decoded.mask_bits.reshape(-1), ref.mask_bits):
        problems.append("mask bits")
    if not np.array_equal(grid_pack(decoded.grid), ref.grid_bits):
        problems.append("grid bits")
    if _model_to_bytes(decoded.model) != ref.model_bytes:
        problems.append("mlp weights")
    for fam in FAMILIES:
        if not np.array_equal(decoded.symbols[fam], ref.symbols[fam]):
            problems.append(f"{fam} symbols")
    for name in ("features", "scalings", "offsets"):
        if getattr(decoded.scene, name).tobytes() != getattr(ref.scene, name).tobytes():
            problems.append(name)
    return (not problems), problems


def inspect_blob(blob):
    """Per-section byte accounting and per-family bits per parameter.

    Only surviving anchors (and surviving offsets) enter the denominators.
    """
    if isinstance(blob, (bytes, bytearray, memoryview)):
        data = bytes(blob)
        blob = HaczBlob.from_bytes(data)
        total = len(data)
    else:
        total = len(blob.to_bytes())
    cfg = blob.grid_config
    header = _header_size(cfg.levels_3d, cfg.levels_2d)
    sections = {name: len(blob.sections[name]) for name in SECTION_NAMES}

    n_kept = blob.n_kept
    if n_kept:
        mask_bits = decode_bits(
            blob.sections["masks"], n_kept * blob.k_offsets,
            BinaryModel(blob.mask_f1),
        )
        kept_offsets = int(mask_bits.sum())
    else:
        kept_offsets = 0
    family_bytes = dict(zip(FAMILIES, blob.s5_lengths))
    denominators = {
        "feat": n_kept * blob.dim_feat,
        "scal": n_kept * 6,
        "off": 3 * kept_offsets,
    }
    bits_per_param = {
        fam: (8.0 * family_bytes[fam] / denominators[fam]) if denominators[fam] else 0.0
        for fam in FAMILIES
    }
    return {
        "total_bytes": total,
        "header_bytes": header,
        "sections": sections,
        "family_bytes": family_bytes,
        "coded_values": denominators,
        "bits_per_param": bits_per_param,
        "n_kept": n_kept,
        "kept_offsets": kept_offsets,
    }
