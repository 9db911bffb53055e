"""Bit-exact range coder and the integer probability tables that drive it.

Two models feed the coder: quantized-Gaussian CDF tables for attribute
symbols, and a static binary model for hash-grid and mask bits.  All tables
carry exactly 2**16 units of mass with every bin >= 1, and are pure
functions of snapped inputs, so the encoder and decoder always rebuild
byte-identical tables.

The coder itself is a carry-less ("Russian") 32-bit range coder with 16-bit
frequency precision: bytes are released when the top byte of low and high
agree, and underflow is resolved by shrinking the range to the partition
boundary.  Flush emits 4 bytes; streams are single-threaded state machines.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .errors import CdfDesyncError, CoderError

TOTAL_FREQ = 1 << 16
K_GLOBAL_MIN = -(1 << 15)
K_GLOBAL_MAX = (1 << 15) - 1

# Snapping grids: mu to multiples of q/64, sigma to a 256-entry log-spaced
# grid stepping span/256 up from sigma_lo.  With that step the geometric
# mean of the bounds (q0 itself for the default bound factors) sits exactly
# on the grid.
MU_SNAP_DENOM = 64
SIGMA_GRID_SIZE = 256
RANGE_SIGMAS = 16.0

_TOP = 1 << 24
_BOTTOM = 1 << 16
_MASK = 0xFFFFFFFF
_MU_OVER_Q_LIMIT = float(1 << 22)


# ---------------------------------------------------------------------------
# Parameter snapping
# ---------------------------------------------------------------------------

def snap_mu_index(mu, q):
    """Integer grid position of mu on the q/64 lattice."""
    ratio = np.clip(np.asarray(mu, dtype=np.float64) / q, -_MU_OVER_Q_LIMIT,
                    _MU_OVER_Q_LIMIT)
    return np.rint(ratio * MU_SNAP_DENOM).astype(np.int64)


def snap_sigma(sigma, sigma_lo, sigma_hi):
    """Nearest sigma on the log grid; returns (index, snapped value)."""
    log_lo = np.log(sigma_lo)
    step = (np.log(sigma_hi) - log_lo) / SIGMA_GRID_SIZE
    z = (np.log(np.clip(sigma, sigma_lo, sigma_hi)) - log_lo) / step
    idx = np.clip(np.rint(z), 0, SIGMA_GRID_SIZE - 1).astype(np.int64)
    return idx, np.exp(log_lo + idx * step)


def _sigma_from_index(idx, sigma_lo, sigma_hi):
    log_lo = np.log(sigma_lo)
    step = (np.log(sigma_hi) - log_lo) / SIGMA_GRID_SIZE
    return np.exp(log_lo + idx * step)


# ---------------------------------------------------------------------------
# Integer apportionment: distribute 2**16 units over bins with a floor of 1.
# The floor units are reserved first and the rest assigned by largest
# remainder, which keeps large-bin frequencies within ~15/65536 of the real
# probability for every reachable sigma/q ratio.
# ---------------------------------------------------------------------------

def _apportion(p, size):
    budget = TOTAL_FREQ - size
    quota = p * budget
    fl = np.floor(quota)
    rem = quota - fl
    freqs = fl.astype(np.int64) + 1
    deficit = budget - int(fl.sum())
    if deficit > 0:
        deficit = min(deficit, size)
        order = np.lexsort((np.arange(size), -rem))
        freqs[order[:deficit]] += 1
    return freqs


def _apportion_centered(p, size):
    """Apportionment that allocates mirror bins in pairs, preserving exact
    frequency symmetry around the center bin.  Any odd leftover lands on the
    center (a self-mirror)."""
    budget = TOTAL_FREQ - size
    quota = p * budget
    fl = np.floor(quota)
    rem = quota - fl
    freqs = fl.astype(np.int64) + 1
    deficit = budget - int(fl.sum())
    if deficit <= 0:
        return freqs
    c = size // 2
    js = np.arange(c + 1)
    group_rem = rem[c + js]
    order = np.lexsort((js, -group_rem))
    remaining = min(deficit, budget)
    for g in order:
        j = int(js[g])
        need = 1 if j == 0 else 2
        if need <= remaining:
            if j == 0:
                freqs[c] += 1
            else:
                freqs[c - j] += 1
                freqs[c + j] += 1
            remaining -= need
        if remaining == 0:
            break
    if remaining:
        freqs[c] += remaining
    return freqs


# ---------------------------------------------------------------------------
# CDF tables
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CdfTable:
    """Cumulative integer frequencies for symbols k_min..k_max.

    cum has length (k_max - k_min + 2), starts at 0, ends at 2**16, and is
    strictly increasing (every bin holds frequency >= 1).  mu and sigma are
    the snapped parameters the table realizes.
    """

    k_min: int
    k_max: int
    cum: np.ndarray
    mu: float
    sigma: float

    @property
    def size(self):
        return self.k_max - self.k_min + 1

    def freq(self, k):
        if not self.contains(k):
            raise CoderError(f"symbol {k} outside table range")
        i = k - self.k_min
        return int(self.cum[i + 1]) - int(self.cum[i])

    def contains(self, k):
        return self.k_min <= k <= self.k_max


def _centered_masses(width, ratio):
    """Mirror-exact bin masses for a table centered on a symbol.

    width bins on each side of the center; ratio = q / sigma.  The outermost
    bins absorb the tails, so the masses sum to 1.
    """
    edges = ndtr((np.arange(width, dtype=np.float64) + 0.5) * ratio)
    center = 2.0 * edges[0] - 1.0
    upper = np.empty(width)
    if width > 1:
        upper[: width - 1] = np.diff(edges)
    upper[width - 1] = 1.0 - edges[width - 1] if width > 1 else 1.0 - edges[0]
    return np.concatenate([upper[::-1], [center], upper])


def _tail_absorbed_masses(k_lo, k_hi, mu_s, sigma_s, q):
    ks = np.arange(k_lo, k_hi + 1, dtype=np.float64)
    cdf = ndtr(((ks + 0.5) * q - mu_s) / sigma_s)
    cdf[-1] = 1.0
    p = cdf.copy()
    p[1:] -= cdf[:-1]
    return p


def build_cdf(mu, sigma, q, sigma_lo=1e-3, sigma_hi=1e3):
    """Integer CDF table for one Gaussian bin model.

    mu and sigma are first snapped to their deterministic grids; the symbol
    range covers mu +- 16 sigma (plus one guard bin each side) intersected
    with the global bounds.  Total mass is exactly 2**16 with every bin >= 1.
    """
    if q <= 0.0:
        raise CoderError("quantization step must be positive")
    m = int(snap_mu_index(mu, q))
    mu_s = (m * q) / MU_SNAP_DENOM
    _, sigma_s = snap_sigma(float(sigma), sigma_lo, sigma_hi)
    sigma_s = float(sigma_s)

    centered = m % MU_SNAP_DENOM == 0
    if centered:
        kc = m // MU_SNAP_DENOM
        width = int(np.ceil(RANGE_SIGMAS * sigma_s / q)) + 1
        width = min(width, TOTAL_FREQ // 2 - 1)
        k_lo, k_hi = kc - width, kc + width
        if k_lo < K_GLOBAL_MIN or k_hi > K_GLOBAL_MAX:
            centered = False  # clipping would break the mirror symmetry

    if centered:
        p = _centered_masses(width, q / sigma_s)
    else:
        k_lo = int(np.floor((mu_s - RANGE_SIGMAS * sigma_s) / q)) - 1
        k_hi = int(np.ceil((mu_s + RANGE_SIGMAS * sigma_s) / q)) + 1
        k_lo = min(max(k_lo, K_GLOBAL_MIN), K_GLOBAL_MAX)
        k_hi = min(max(k_hi, K_GLOBAL_MIN), K_GLOBAL_MAX)
        p = _tail_absorbed_masses(k_lo, k_hi, mu_s, sigma_s, q)

    total = p.sum()
    p = p / total if total > 0 else np.full(p.size, 1.0 / p.size)
    freqs = _apportion_centered(p, p.size) if centered else _apportion(p, p.size)
    cum = np.zeros(p.size + 1, dtype=np.uint32)
    np.cumsum(freqs, out=cum[1:])
    return CdfTable(k_min=int(k_lo), k_max=int(k_hi), cum=cum, mu=mu_s, sigma=sigma_s)


# ---------------------------------------------------------------------------
# Batched table construction.  Centered values (mu snapped exactly onto the
# symbol grid) are routed through build_cdf via a cache keyed on the snapped
# parameters; everything else is built in one vectorized ragged pass with
# identical semantics.
# ---------------------------------------------------------------------------

class _SharedGroup:
    """Values that reuse one cached table."""

    __slots__ = ("indices", "cum", "k_min")

    def __init__(self, indices, cum, k_min):
        self.indices = indices
        self.cum = cum
        self.k_min = k_min

    def gather(self, k, lo, hi):
        off = k[self.indices] - self.k_min
        lo[self.indices] = self.cum[off]
        hi[self.indices] = self.cum[off + 1]


class _RaggedGroup:
    """Values with individual tables stored in one flat cumulative array."""

    __slots__ = ("indices", "cum_flat", "starts", "k_min")

    def __init__(self, indices, cum_flat, starts, k_min):
        self.indices = indices
        self.cum_flat = cum_flat
        self.starts = starts
        self.k_min = k_min

    def gather(self, k, lo, hi):
        off = self.starts + (k[self.indices] - self.k_min)
        lo[self.indices] = self.cum_flat[off]
        hi[self.indices] = self.cum_flat[off + 1]


class TableSet:
    """Per-value CDF tables for one family stream, in coding order."""

    def __init__(self, count):
        self.count = count
        self.k_min = np.zeros(count, dtype=np.int64)
        self.sizes = np.zeros(count, dtype=np.int64)
        self.cums = [None] * count
        self._groups = []

    def clamp_symbols(self, k):
        """Clamp symbols into their tables' ranges.  Returns the clamped
        array and the count of values that moved (outliers beyond the
        16-sigma window)."""
        k = np.asarray(k, dtype=np.int64)
        hi = self.k_min + self.sizes - 1
        clamped = np.clip(k, self.k_min, hi)
        return clamped, int((clamped != k).sum())

    def gather_bounds(self, k):
        """(cum_lo, cum_hi) per value for already-clamped symbols."""
        k = np.asarray(k, dtype=np.int64)
        lo = np.zeros(self.count, dtype=np.int64)
        hi = np.zeros(self.count, dtype=np.int64)
        for group in self._groups:
            group.gather(k, lo, hi)
        return lo, hi

    def information_bits(self, k):
        """Sum of -log2 of the integer-quantized probabilities of symbols."""
        if self.count == 0:
            return 0.0
        lo, hi = self.gather_bounds(k)
        return float(-np.log2((hi - lo) / TOTAL_FREQ).sum())


def build_tables(mu, sigma, q, sigma_lo, sigma_hi):
    """TableSet for aligned (mu, sigma, q) value arrays of one family."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    count = mu.size
    ts = TableSet(count)
    if count == 0:
        return ts
    if np.any(q <= 0.0):
        raise CoderError("quantization step must be positive")

    m = snap_mu_index(mu, q)
    centered = m % MU_SNAP_DENOM == 0

    cen_idx = np.flatnonzero(centered)
    if cen_idx.size:
        sidx, _ = snap_sigma(sigma[cen_idx], sigma_lo, sigma_hi)
        by_key = {}
        for pos, v in enumerate(cen_idx):
            key = (int(m[v]), int(sidx[pos]), float(q[v]))
            by_key.setdefault(key, []).append(int(v))
        for (mv, sv, qv), vals in by_key.items():
            table = build_cdf(mv * qv / MU_SNAP_DENOM,
                              _sigma_from_index(sv, sigma_lo, sigma_hi),
                              qv, sigma_lo, sigma_hi)
            idx = np.asarray(vals, dtype=np.int64)
            ts.k_min[idx] = table.k_min
            ts.sizes[idx] = table.size
            for v in vals:
                ts.cums[v] = table.cum
            ts._groups.append(_SharedGroup(idx, table.cum, table.k_min))

    nc_idx = np.flatnonzero(~centered)
    if nc_idx.size:
        _build_ragged(ts, nc_idx, m[nc_idx], sigma[nc_idx], q[nc_idx],
                      sigma_lo, sigma_hi)
    return ts


def _build_ragged(ts, indices, m, sigma, q, sigma_lo, sigma_hi):
    mu_s = (m.astype(np.float64) * q) / MU_SNAP_DENOM
    _, sig_s = snap_sigma(sigma, sigma_lo, sigma_hi)

    k_lo = np.floor((mu_s - RANGE_SIGMAS * sig_s) / q) - 1
    k_hi = np.ceil((mu_s + RANGE_SIGMAS * sig_s) / q) + 1
    k_lo = np.clip(k_lo, K_GLOBAL_MIN, K_GLOBAL_MAX).astype(np.int64)
    k_hi = np.clip(k_hi, K_GLOBAL_MIN, K_GLOBAL_MAX).astype(np.int64)
    sizes = k_hi - k_lo + 1
    starts = np.concatenate([[0], np.cumsum(sizes[:-1])])
    total = int(sizes.sum())
    nseg = indices.size
    seg = np.repeat(np.arange(nseg), sizes)
    intra = np.arange(total) - np.repeat(starts, sizes)
    ks = k_lo[seg] + intra

    z = ((ks + 0.5) * q[seg] - mu_s[seg]) / sig_s[seg]
    cdf = ndtr(z)
    cdf[starts + sizes - 1] = 1.0
    p = cdf.copy()
    p[1:] -= cdf[:-1]
    p[starts] = cdf[starts]

    sums = np.add.reduceat(p, starts)
    sums = np.where(sums > 0.0, sums, 1.0)
    p = p / sums[seg]

    budget = TOTAL_FREQ - sizes
    quota = p * budget[seg]
    fl = np.floor(quota)
    rem = quota - fl
    freqs = fl.astype(np.int64) + 1
    deficit = budget - np.add.reduceat(fl, starts).astype(np.int64)
    deficit = np.minimum(deficit, sizes)
    # Largest remainder within each segment; lexsort is stable and its
    # primary key keeps segments contiguous, so in-segment rank is just the
    # position minus the segment start.
    order = np.lexsort((np.arange(total), -rem, seg))
    rank = np.arange(total) - starts[seg]
    give = rank < deficit[seg]
    freqs[order[give]] += 1

    # Concatenated per-value cumulative arrays: a zero is inserted at each
    # segment start, then each segment's running offset is subtracted.
    f2 = np.insert(freqs, starts, 0)
    g = np.cumsum(f2)
    starts2 = starts + np.arange(nseg)
    cum_flat = (g - np.repeat(g[starts2], sizes + 1)).astype(np.uint32)

    ts.k_min[indices] = k_lo
    ts.sizes[indices] = sizes
    for pos in range(nseg):
        a = int(starts2[pos])
        ts.cums[int(indices[pos])] = cum_flat[a : a + int(sizes[pos]) + 1]
    ts._groups.append(_RaggedGroup(indices, cum_flat, starts2, k_lo))


# ---------------------------------------------------------------------------
# Range coder core
# ---------------------------------------------------------------------------

class RangeEncoder:
    """Sequential encoder; feed (cum_lo, cum_hi) pairs, then call finish."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def encode(self, cum_lo, cum_hi):
        if not 0 <= cum_lo < cum_hi <= TOTAL_FREQ:
            raise CoderError(f"bad cumulative bounds ({cum_lo}, {cum_hi})")
        r = self._range >> 16
        low = self._low + cum_lo * r
        rng = r * (cum_hi - cum_lo)
        out = self._out
        while True:
            if (low ^ (low + rng)) < _TOP:
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = (0x1_0000_0000 - low) & 0xFFFF
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & _MASK
                rng <<= 8
            else:
                break
        self._low, self._range = low, rng

    def finish(self):
        low = self._low
        out = self._out
        for _ in range(4):
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(out)


class RangeDecoder:
    """Sequential decoder over one byte stream."""

    def __init__(self, data):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        code = 0
        for _ in range(4):
            code = (code << 8) | self._next()
        self._code = code

    def _next(self):
        if self._pos >= len(self._data):
            raise CdfDesyncError("byte stream exhausted mid-decode")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def consumed(self):
        return self._pos

    def decode_with_cum(self, cum):
        """Decode one symbol index given its cumulative table."""
        r = self._range >> 16
        t = (self._code - self._low) // r
        if t >= TOTAL_FREQ:
            raise CdfDesyncError("decoder state outside table mass")
        idx = int(np.searchsorted(cum, t, side="right")) - 1
        cl = int(cum[idx])
        ch = int(cum[idx + 1])
        low = self._low + cl * r
        rng = r * (ch - cl)
        code = self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                code = ((code << 8) | self._next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = (0x1_0000_0000 - low) & 0xFFFF
                code = ((code << 8) | self._next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            else:
                break
        self._low, self._range, self._code = low, rng, code
        return idx

    def decode_with_cum_known(self, sym, cum):
        """Advance the state for a symbol already identified via a lookup."""
        r = self._range >> 16
        cl = int(cum[sym])
        ch = int(cum[sym + 1])
        low = self._low + cl * r
        rng = r * (ch - cl)
        code = self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                code = ((code << 8) | self._next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            elif rng < _BOTTOM:
                rng = (0x1_0000_0000 - low) & 0xFFFF
                code = ((code << 8) | self._next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            else:
                break
        self._low, self._range, self._code = low, rng, code

    def require_fully_consumed(self):
        if self._pos != len(self._data):
            raise CdfDesyncError(
                f"{len(self._data) - self._pos} unconsumed bytes after decode"
            )


def _table_for(tables, i):
    if isinstance(tables, CdfTable):
        return tables
    if callable(tables):
        return tables(i)
    return tables[i]


def range_encode(symbols, tables):
    """Encode integer symbols, each under its own CdfTable."""
    enc = RangeEncoder()
    for i, k in enumerate(symbols):
        table = _table_for(tables, i)
        if not table.contains(k):
            raise CoderError(f"symbol {k} at position {i} outside its table")
        idx = int(k) - table.k_min
        enc.encode(int(table.cum[idx]), int(table.cum[idx + 1]))
    return enc.finish()


def range_decode(data, count, tables):
    """Inverse of range_encode; requires the identical table sequence."""
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        table = _table_for(tables, i)
        out[i] = table.k_min + dec.decode_with_cum(table.cum)
    dec.require_fully_consumed()
    return out


def encode_stream(symbols, table_set):
    """Encode a whole family stream against a TableSet.

    Returns (payload, information_bits) where information_bits is the sum of
    -log2 of the integer-quantized probabilities actually coded.
    """
    lo, hi = table_set.gather_bounds(symbols)
    enc = RangeEncoder()
    encode_one = enc.encode
    for a, b in zip(lo.tolist(), hi.tolist()):
        encode_one(a, b)
    payload = enc.finish()
    if table_set.count:
        info = float(-np.log2((hi - lo) / TOTAL_FREQ).sum())
    else:
        info = 0.0
    return payload, info


def decode_stream(data, table_set):
    """Decode a whole family stream against a TableSet."""
    dec = RangeDecoder(data)
    decode_one = dec.decode_with_cum
    cums = table_set.cums
    kmin = table_set.k_min
    out = np.empty(table_set.count, dtype=np.int64)
    for v in range(table_set.count):
        out[v] = kmin[v] + decode_one(cums[v])
    dec.require_fully_consumed()
    return out


# ---------------------------------------------------------------------------
# Static binary model (hash-grid and mask bits)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinaryModel:
    """One-bit probability model with a 16-bit quantized +1 frequency."""

    f_one: int

    def __post_init__(self):
        if not 1 <= self.f_one <= TOTAL_FREQ - 1:
            raise CoderError("binary frequency must lie in [1, 65535]")

    @property
    def p_one(self):
        return self.f_one / TOTAL_FREQ

    @classmethod
    def from_probability(cls, p):
        f = int(round(p * TOTAL_FREQ))
        return cls(min(max(f, 1), TOTAL_FREQ - 1))

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits)
        p = float(bits.mean()) if bits.size else 0.5
        return cls.from_probability(p)


@lru_cache(maxsize=64)
def _byte_model(f_one):
    """256-ary table induced by i.i.d. bits under the binary model.  Bytes
    are coded whole, which keeps the Python coding loop 8x shorter.
    Returns (cum, decode lookup over the 2**16 mass)."""
    p1 = f_one / TOTAL_FREQ
    pc = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)
    p = p1**pc * (1.0 - p1) ** (8 - pc)
    p = p / p.sum()
    freqs = _apportion(p, 256)
    cum = np.zeros(257, dtype=np.uint32)
    np.cumsum(freqs, out=cum[1:])
    lut = np.repeat(np.arange(256, dtype=np.uint8), freqs)
    return cum, lut


def encode_bits(bits, model):
    """Entropy-code a 0/1 sequence under a static binary model."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size and bits.max() > 1:
        raise CoderError("bit sequence must contain only 0 and 1")
    cum, _ = _byte_model(model.f_one)
    packed = np.packbits(bits)  # zero-padded to a byte boundary
    lo = cum[packed].astype(np.int64)
    hi = cum[packed.astype(np.int64) + 1].astype(np.int64)
    enc = RangeEncoder()
    encode_one = enc.encode
    for a, b in zip(lo.tolist(), hi.tolist()):
        encode_one(a, b)
    return enc.finish()


def decode_bits(data, count, model):
    """Inverse of encode_bits for a known bit count."""
    if count < 0:
        raise CoderError("bit count must be >= 0")
    cum, lut = _byte_model(model.f_one)
    nbytes = (count + 7) // 8
    dec = RangeDecoder(data)
    out = np.empty(nbytes, dtype=np.uint8)
    for i in range(nbytes):
        r = dec._range >> 16
        t = (dec._code - dec._low) // r
        if t >= TOTAL_FREQ:
            raise CdfDesyncError("decoder state outside table mass")
        sym = int(lut[t])
        dec.decode_with_cum_known(sym, cum)
        out[i] = sym
    dec.require_fully_consumed()
    return np.unpackbits(out, count=count) if count else np.zeros(0, dtype=np.uint8)
