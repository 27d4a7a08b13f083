"""Input checks used by the estimators before any numeric work."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError


def check_series(counts) -> np.ndarray:
    """A finite ``[T, B]`` float array."""
    try:
        return check_array(counts, dtype=np.float64, ensure_min_samples=1)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc


def check_sequences(X, window_len: int | None = None, n_features: int | None = None) -> np.ndarray:
    """A finite ``[N, T, F]`` float array with optional fixed T and F."""
    try:
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=0)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    if X.ndim != 3:
        raise DimensionError(f"expected [samples, steps, features], got shape {X.shape}")
    if window_len is not None and X.shape[1] != window_len:
        raise DimensionError(f"expected {window_len} steps per sequence, got {X.shape[1]}")
    if n_features is not None and X.shape[2] != n_features:
        raise DimensionError(f"expected {n_features} features, got {X.shape[2]}")
    return X


def check_images(X, channels: int | None = None) -> np.ndarray:
    """A finite ``[N, C, H, W]`` float array."""
    try:
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=0)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    if X.ndim != 4:
        raise DimensionError(f"expected [N, C, H, W], got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    return X
