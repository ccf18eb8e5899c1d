"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .model import ActivityPanel


def check_panel(X) -> ActivityPanel:
    """Coerce ``X`` to an :class:`ActivityPanel`.

    Accepts a panel, or an array of shape ``(N, T, P)`` (``(N, T)`` is read
    as ``P = 1``) with NaN marking missing cells.
    """
    if isinstance(X, ActivityPanel):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (N, T, P) array, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"empty panel of shape {arr.shape}")
    if np.isinf(arr).any():
        raise ValueError("panel contains infinite values")
    return ActivityPanel.from_array(arr)


def check_probability(value, name: str, open_interval: bool = False) -> float:
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    v = float(value)
    ok = 0 < v < 1 if open_interval else 0 <= v <= 1
    if not ok:
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {v}")
    return v
