"""Small numeric helpers shared by the trainable scoring heads."""

from __future__ import annotations

import numpy as np

__all__ = ["bce_from_logits", "sigmoid"]


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-element binary cross-entropy computed from logits.

    Uses log(1 + exp(-|z|)) + max(z, 0) - y*z, which never overflows.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
