"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_inputs(X, *, timesteps=None, kind=None) -> tuple[np.ndarray, str]:
    """Validate a batch of images ``(n, C, H, W)`` or event frames ``(n, T, C, H, W)``.

    Returns the array as float32 and the detected kind (``"static"`` or
    ``"events"``).
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32,
                    ensure_all_finite=True)
    if X.ndim == 4:
        detected = "static"
    elif X.ndim == 5:
        detected = "events"
        if timesteps is not None and X.shape[1] != timesteps:
            raise ValueError(f"event input has {X.shape[1]} frames, expected {timesteps}")
        if not np.isin(X, (0.0, 1.0)).all():
            raise ValueError("event frames must be binary")
    else:
        raise ValueError(f"expected 4-D images or 5-D event frames, got {X.ndim}-D input")
    if kind is not None and detected != kind:
        raise ValueError(f"estimator was fitted on {kind} input, got {detected}")
    if X.shape[-1] % 16 or X.shape[-2] % 16:
        raise ValueError(f"spatial size {X.shape[-2]}x{X.shape[-1]} must be divisible by 16")
    return X, detected


def check_inputs_labels(X, y, **kw):
    X, kind = check_inputs(X, **kw)
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    check_consistent_length(X, y)
    return X, y, kind
