"""Input checks for ray arrays handed to the estimator."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .gradtensor import DimensionError, DomainError


def check_rays(X, n_illuminations: int | None = None):
    """Split ``(R, 6)`` or ``(R, 7)`` rows into origins, unit directions and light indices.

    Columns are origin xyz, direction xyz and, optionally, an integer
    illumination index. Directions are normalized; a zero direction raises.
    """
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] not in (6, 7):
        raise DimensionError(f"rays need 6 or 7 columns (origin, direction[, light]), got {X.shape[1]}")
    origins, dirs = X[:, :3].copy(), X[:, 3:6]
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("ray directions must be nonzero")
    illum = None
    if X.shape[1] == 7:
        illum = X[:, 6]
        if np.any(illum != np.round(illum)) or np.any(illum < 0):
            raise DomainError("illumination column must hold non-negative integers")
        illum = illum.astype(np.int64)
        if n_illuminations is not None and illum.size and illum.max() >= n_illuminations:
            raise DomainError(f"illumination index {illum.max()} outside [0, {n_illuminations})")
    return origins, dirs / norms, illum


def check_colors(y, n_rays: int) -> np.ndarray:
    """``(R, 3)`` RGB targets in ``[0, 1]`` matching ``n_rays``."""
    y = check_array(y, dtype=np.float64, ensure_all_finite=True)
    if y.shape[1] != 3:
        raise DimensionError(f"targets must be RGB rows, got {y.shape[1]} columns")
    check_consistent_length(y, np.empty(n_rays))
    if y.min() < 0 or y.max() > 1:
        raise DomainError("target colors must lie in [0, 1]")
    return y
