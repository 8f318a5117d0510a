"""scikit-learn style wrapper: rays in, colors out."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import VARIANT_LETTERS, RunConfig, preset_config
from .dataset import RayBundle
from .metrics import psnr
from .model import RadianceField
from .train import train
from .validation import check_colors, check_rays


class DynamicCoefficientField(BaseEstimator):
    """Radiance field regressor over rays.

    ``X`` rows are ``(ox, oy, oz, dx, dy, dz)`` with an optional seventh
    column holding the illumination index; ``y`` rows are RGB in ``[0, 1]``.
    Unset hyperparameters fall back to the named preset. ``score`` returns
    PSNR in dB rather than R^2, since that is the quantity the model is
    judged by.

    Fitted attributes: ``model_`` (the trained field), ``log_`` (metrics
    records) and ``n_illuminations_``.
    """

    def __init__(self, preset="toy", variant="full", n_basis=None, iterations=None, batch_rays=None,
                 n_illuminations=None, threads=1, random_state=0):
        self.preset = preset
        self.variant = variant
        self.n_basis = n_basis
        self.iterations = iterations
        self.batch_rays = batch_rays
        self.n_illuminations = n_illuminations
        self.threads = threads
        self.random_state = random_state

    def _run_config(self, n_illum: int) -> RunConfig:
        overrides = {"variant": VARIANT_LETTERS.get(self.variant, self.variant), "seed": int(self.random_state)}
        app = {"n_illuminations": n_illum}
        if self.n_basis is not None:
            app["n_basis"] = int(self.n_basis)
        overrides["field"] = {"appearance": app}
        cfg = RunConfig.from_dict(overrides, base=preset_config(self.preset))
        tc = replace(cfg.train, seed=cfg.seed, threads=int(self.threads))
        if self.iterations is not None:
            tc = replace(tc, iterations=int(self.iterations))
        if self.batch_rays is not None:
            tc = replace(tc, batch_rays=int(self.batch_rays))
        cfg.train = tc
        return cfg

    def fit(self, X, y):
        origins, dirs, illum = check_rays(X)
        colors = check_colors(y, len(origins))
        seen = 1 if illum is None else int(illum.max()) + 1
        n_illum = self.n_illuminations if self.n_illuminations is not None else seen
        if seen > n_illum:
            raise ValueError(f"X uses {seen} illuminations but n_illuminations={n_illum}")
        if illum is None:
            illum = np.zeros(len(origins), dtype=np.int64)
        cfg = self._run_config(n_illum)
        model = RadianceField(cfg.field, seed=cfg.seed)
        result = train(model, RayBundle(origins, dirs, colors, illum), cfg.train)
        self.model_ = model
        self.log_ = result.log
        self.n_illuminations_ = n_illum
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        origins, dirs, illum = check_rays(X, self.n_illuminations_)
        return self.model_.render_batch(origins, dirs, illum)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return psnr(pred, check_colors(y, len(pred)))
