"""Adaptive offset masking with straight-through binary masks.

Each anchor carries one learnable logit per offset.  The hard mask is 1 when
sigmoid(logit) exceeds the threshold; an anchor whose offsets are all masked
is pruned entirely (none of its attributes are coded or reported).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HaczError

MASK_THRESHOLD = 0.01

# Logit magnitude used when reconstructing a mask set from hard bits.
_BIT_LOGIT = 10.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def hard_mask(logit, threshold=MASK_THRESHOLD):
    """Binary mask bit: 1 iff sigmoid(logit) > threshold.

    The training-time gradient contract is straight-through: backward uses
    the sigmoid's derivative (see trainer).
    """
    if not 0.0 < threshold < 1.0:
        raise HaczError("threshold must lie in (0, 1)")
    return (sigmoid(logit) > threshold).astype(np.uint8)


@dataclass(eq=False)
class MaskSet:
    """Learnable mask logits for an (N, K) offset layout."""

    logits: np.ndarray
    threshold: float = MASK_THRESHOLD

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise HaczError("mask logits must have shape (N, K)")
        if not 0.0 < self.threshold < 1.0:
            raise HaczError("threshold must lie in (0, 1)")

    @property
    def hard(self):
        return hard_mask(self.logits, self.threshold)

    @property
    def kept_anchors(self):
        return self.hard.any(axis=1)

    @classmethod
    def all_on(cls, n, k_offsets):
        return cls(np.full((n, k_offsets), _BIT_LOGIT))

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits, dtype=np.float64)
        return cls((bits * 2.0 - 1.0) * _BIT_LOGIT)


def mask_loss(masks):
    """Mean of sigmoid(logit) over every mask entry; drives masks toward 0."""
    if masks.logits.size < 1:
        raise HaczError("mask loss needs at least one entry")
    return float(sigmoid(masks.logits).mean())


def prune(scene, masks):
    """Surviving anchors and their surviving offsets.

    Returns (kept_anchor_indices, kept_offset_lists) where the second item
    holds, per kept anchor, the indices of its unmasked offsets.
    """
    if masks.logits.shape != (scene.n, scene.k_offsets):
        raise HaczError(
            f"mask shape {masks.logits.shape} does not match scene "
            f"({scene.n}, {scene.k_offsets})"
        )
    hard = masks.hard
    kept = np.flatnonzero(hard.any(axis=1))
    kept_offsets = [np.flatnonzero(hard[i]) for i in kept]
    return kept, kept_offsets
