"""Estimator-style front end so the codec composes with sklearn tooling."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .container import HaczBlob, decode_scene, encode_scene
from .hashgrid import GRID_PRESETS
from .masking import MaskSet
from .trainer import TrainConfig, fit


class HacCodec(BaseEstimator):
    """Rate-model codec for anchor scenes with a fit/encode/decode surface.

    Hyperparameters follow sklearn conventions: the constructor stores them
    verbatim, ``fit`` learns the hash grid, context model, and masks from a
    scene, and trailing-underscore attributes hold the fitted state.

    Parameters
    ----------
    lambda_e : rate weight of the training objective.
    lambda_m : mask-loss weight (joint mode).
    iterations : total optimization budget across the three phases.
    mode : "rate-only" trains the entropy model against fixed attributes;
        "joint" also refines attributes and offset masks.
    grid_preset : "paper" or "small" hash-grid layout.
    sample_frac : fraction of anchors sampled per iteration.
    seed : seed for initialization and sampling.
    """

    def __init__(self, lambda_e=2e-3, lambda_m=5e-4, iterations=3000,
                 mode="rate-only", grid_preset="paper", sample_frac=0.05,
                 seed=0, hidden=None, deterministic=True):
        self.lambda_e = lambda_e
        self.lambda_m = lambda_m
        self.iterations = iterations
        self.mode = mode
        self.grid_preset = grid_preset
        self.sample_frac = sample_frac
        self.seed = seed
        self.hidden = hidden
        self.deterministic = deterministic

    def _config(self):
        if self.grid_preset not in GRID_PRESETS:
            raise ValueError(f"unknown grid preset {self.grid_preset!r}")
        return TrainConfig(
            lambda_e=self.lambda_e,
            lambda_m=self.lambda_m,
            iterations=self.iterations,
            mode=self.mode,
            grid_config=GRID_PRESETS[self.grid_preset](),
            sample_frac=self.sample_frac,
            seed=self.seed,
            hidden=self.hidden,
            deterministic=self.deterministic,
        )

    def fit(self, scene, y=None):
        result = fit(scene, self._config())
        self.grid_ = result.grid
        self.model_ = result.model
        self.masks_ = result.masks
        self.scene_ = result.scene
        self.history_ = result.history
        self.converged_ = result.converged
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before encode/decode")

    def encode(self, scene=None):
        """Compress a scene (default: the fitted, possibly refined one)."""
        self._check_fitted()
        scene = self.scene_ if scene is None else scene
        masks = self.masks_
        if scene.n != masks.logits.shape[0]:
            masks = MaskSet(np.zeros((scene.n, scene.k_offsets)))
        blob = encode_scene(scene, self.grid_, self.model_, masks,
                            lambda_e=self.lambda_e, lambda_m=self.lambda_m)
        return blob.to_bytes()

    def decode(self, data):
        """Decompress a blob produced by this codec (or any compatible one)."""
        return decode_scene(HaczBlob.from_bytes(bytes(data)))

    def fit_encode(self, scene, y=None):
        return self.fit(scene).encode()
