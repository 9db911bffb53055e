"""Context MLP, adaptive quantization, and the Gaussian rate model.

A shared 3-layer MLP with rectifier activations maps an interpolated hash
feature to, per anchor: one step-refinement scalar per attribute family, and
a (mu, sigma) pair per attribute component.  The quantization step is
q = q0 * (1 + tanh(r)), strictly inside (0, 2*q0); sigma is exp of a clamped
pre-activation so its range per family is [1e-3 * q0, 1e3 * q0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import HaczError

FAMILIES = ("feat", "scal", "off")
DEFAULT_Q0 = (1.0, 0.001, 0.2)
SIGMA_LO_FACTOR = 1e-3
SIGMA_HI_FACTOR = 1e3

# Per-symbol probability floor used in loss evaluation: caps a symbol's cost
# at 24 bits and keeps log-gradients finite.
PROB_FLOOR = 2.0**-24

# tanh output guard that keeps q strictly inside (0, 2*q0) even for
# saturating pre-activations.
_TANH_GUARD = 1.0 - 2.0**-40


def family_dims(dim_feat, k_offsets):
    return (dim_feat, 6, 3 * k_offsets)


def family_slices(dim_feat, k_offsets):
    dims = family_dims(dim_feat, k_offsets)
    edges = np.cumsum((0,) + dims)
    return tuple(slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))

def family_of_dim(dim_feat, k_offsets):
    """Family id (0, 1, 2) of every attribute column."""
    return np.repeat(np.arange(3), family_dims(dim_feat, k_offsets))


@dataclass(eq=False)
class ContextModel:
    """Weights of the shared context MLP plus the quantization constants.

    Arrays are float64 in memory; ``to_coding_precision`` rounds them through
    float32 (the container storage format) so the encoder and decoder
    evaluate numerically identical weights.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    q0: np.ndarray  # (3,) base steps per family, float32-exact
    dim_feat: int
    k_offsets: int

    @property
    def dim_in(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]

    @property
    def dim_attr(self):
        return sum(family_dims(self.dim_feat, self.k_offsets))

    @property
    def dim_out(self):
        return 3 + 2 * self.dim_attr

    def weight_arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def sigma_bounds(self):
        """Per-family (sigma_min, sigma_max), derived from q0."""
        q0 = self.q0
        return SIGMA_LO_FACTOR * q0, SIGMA_HI_FACTOR * q0

    def log_sigma_bounds_per_dim(self):
        lo, hi = self.sigma_bounds()
        fam = family_of_dim(self.dim_feat, self.k_offsets)
        return np.log(lo)[fam], np.log(hi)[fam]

    def to_coding_precision(self):
        """Copy with every weight rounded through float32."""
        cast = [a.astype(np.float32).astype(np.float64) for a in self.weight_arrays()]
        return ContextModel(*cast, q0=self.q0.copy(), dim_feat=self.dim_feat,
                            k_offsets=self.k_offsets)


def model_new(dim_in, dim_feat, k_offsets, seed, hidden=None, q0=DEFAULT_Q0):
    """Seeded fresh model.

    The output layer starts at zero except for the sigma pre-activation
    bias, which sits at the center of each family's log-sigma window (that
    center is ln q0).  An untrained model therefore yields r = 0 (so
    q = q0 exactly), mu = 0, and sigma = q0, with every sigma gradient
    strictly inside its clamp.
    """
    if hidden is None:
        hidden = dim_in
    rng = np.random.default_rng(seed)
    dims_total = sum(family_dims(dim_feat, k_offsets))
    dim_out = 3 + 2 * dims_total

    def he_uniform(fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    q0 = np.asarray(q0, dtype=np.float32).astype(np.float64)
    b3 = np.zeros(dim_out)
    b3[3 + dims_total :] = np.log(q0)[family_of_dim(dim_feat, k_offsets)]
    return ContextModel(
        w1=he_uniform(dim_in, (dim_in, hidden)),
        b1=np.zeros(hidden),
        w2=he_uniform(hidden, (hidden, hidden)),
        b2=np.zeros(hidden),
        w3=np.zeros((hidden, dim_out)),
        b3=b3,
        q0=q0,
        dim_feat=dim_feat,
        k_offsets=k_offsets,
    )


@dataclass(eq=False)
class RateParams:
    """Per-anchor coding parameters aligned to the feat | scal | off layout."""

    q: np.ndarray  # (B, 3) step per family, each strictly in (0, 2*q0)
    mu: np.ndarray  # (B, dim_attr)
    sigma: np.ndarray  # (B, dim_attr), within the per-family bounds

    def q_per_dim(self, dim_feat, k_offsets):
        return self.q[:, family_of_dim(dim_feat, k_offsets)]


def _mlp_hidden(fh, model):
    h1 = np.maximum(fh @ model.w1 + model.b1, 0.0)
    h2 = np.maximum(h1 @ model.w2 + model.b2, 0.0)
    return h1, h2


def model_forward_batch(fh, model):
    """Evaluate the context model on a (B, dim_in) batch of hash features."""
    fh = np.asarray(fh, dtype=np.float64)
    if fh.ndim != 2 or fh.shape[1] != model.dim_in:
        raise HaczError(
            f"hash feature dim {fh.shape} does not match model input {model.dim_in}"
        )
    _, h2 = _mlp_hidden(fh, model)
    out = h2 @ model.w3 + model.b3
    d = model.dim_attr
    r = out[:, :3]
    mu = out[:, 3 : 3 + d]
    s = out[:, 3 + d :]
    q = model.q0 * (1.0 + np.clip(np.tanh(r), -_TANH_GUARD, _TANH_GUARD))
    lo, hi = model.log_sigma_bounds_per_dim()
    sigma = np.exp(np.clip(s, lo, hi))
    return RateParams(q=q, mu=mu, sigma=sigma)


def model_forward(fh, model):
    """Single-anchor convenience wrapper."""
    rp = model_forward_batch(np.asarray(fh, dtype=np.float64).reshape(1, -1), model)
    return RateParams(q=rp.q[0], mu=rp.mu[0], sigma=rp.sigma[0])


def quantize_train(f, q, u):
    """Additive-noise quantization surrogate: f + u * q with u in [-1/2, 1/2]."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0):
        raise HaczError("quantization step must be positive")
    return np.asarray(f, dtype=np.float64) + np.asarray(u, dtype=np.float64) * q


def quantize_test(f, q):
    """Hard quantization: symbol k = round-half-away-from-zero(f / q).

    Returns (k, f_hat) with f_hat = k * q, so |f_hat - f| <= q/2.
    """
    f = np.asarray(f, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0):
        raise HaczError("quantization step must be positive")
    if not np.isfinite(f).all():
        raise HaczError("cannot quantize non-finite values")
    t = f / q
    k = (np.sign(t) * np.floor(np.abs(t) + 0.5)).astype(np.int64)
    return k, k * q


def bin_probability(k, mu, sigma, q, floor=PROB_FLOOR):
    """Probability mass of symbol k under a Gaussian discretized with step q.

    Integrates the normal density over (k*q - q/2, k*q + q/2).  The result is
    floored (default 2**-24) for loss evaluation; pass floor=0.0 for the raw
    mass.
    """
    k = np.asarray(k, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(np.asarray(sigma) <= 0.0):
        raise HaczError("sigma and q must be positive")
    center = k * q
    upper = ndtr((center + 0.5 * q - mu) / sigma)
    lower = ndtr((center - 0.5 * q - mu) / sigma)
    return np.maximum(upper - lower, floor)


def value_bin_probability(f_hat, mu, sigma, q, floor=PROB_FLOOR):
    """As bin_probability but around an arbitrary (noise-quantized) value."""
    upper = ndtr((f_hat + 0.5 * q - mu) / sigma)
    lower = ndtr((f_hat - 0.5 * q - mu) / sigma)
    return np.maximum(upper - lower, floor)


def _coded_value_mask(n, dim_feat, k_offsets, mask_bits):
    """Boolean (N, dim_attr) selector of coded values: everything for
    surviving anchors except masked offsets; nothing for pruned anchors."""
    dims = family_dims(dim_feat, k_offsets)
    keep = mask_bits.any(axis=1)
    sel = np.zeros((n, sum(dims)), dtype=bool)
    sl = family_slices(dim_feat, k_offsets)
    sel[keep, sl[0]] = True
    sel[keep, sl[1]] = True
    off_sel = np.repeat(mask_bits.astype(bool), 3, axis=1)
    sel[:, sl[2]] = off_sel & keep[:, None]
    return sel


def per_anchor_bits(scene, rate, symbols, mask_bits):
    """Estimated bits per anchor: sum of -log2 p over its coded values.

    ``symbols`` maps family name to the (N, dim) integer symbol array;
    masked offsets and fully pruned anchors contribute nothing.
    """
    n = scene.n
    sl = family_slices(scene.dim_feat, scene.k_offsets)
    qv = rate.q_per_dim(scene.dim_feat, scene.k_offsets)
    ks = np.concatenate([symbols[f] for f in FAMILIES], axis=1)
    if ks.shape != rate.mu.shape:
        raise HaczError("symbol arrays do not match rate parameter shapes")
    if mask_bits.shape != (n, scene.k_offsets):
        raise HaczError("mask shape does not match scene")
    p = bin_probability(ks, rate.mu, rate.sigma, qv)
    bits = -np.log2(p)
    sel = _coded_value_mask(n, scene.dim_feat, scene.k_offsets, mask_bits)
    return np.where(sel, bits, 0.0).sum(axis=1)


def entropy_bits(scene, rate, symbols, mask_bits):
    """Total estimated bit consumption over all coded values."""
    return float(per_anchor_bits(scene, rate, symbols, mask_bits).sum())


def scene_symbols(scene, rate):
    """Hard-quantized symbols for every attribute value of a scene."""
    qv = rate.q_per_dim(scene.dim_feat, scene.k_offsets)
    sl = family_slices(scene.dim_feat, scene.k_offsets)
    out = {}
    blocks = (scene.features, scene.scalings, scene.offsets)
    for fam, block, s in zip(FAMILIES, blocks, sl):
        k, _ = quantize_test(block.astype(np.float64), qv[:, s])
        out[fam] = k
    return out


def total_loss(distortion, entropy, hash_bits, mask_loss, lambda_e, lambda_m, n,
               dim_feat, k_offsets):
    """Scalar training objective: distortion plus the weighted, normalized
    rate estimate plus the weighted masking loss."""
    if n < 1:
        raise HaczError("loss normalizer requires n >= 1")
    norm = n * sum(family_dims(dim_feat, k_offsets))
    return distortion + lambda_e * (entropy + hash_bits) / norm + lambda_m * mask_loss
