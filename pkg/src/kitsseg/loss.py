"""Soft dice loss, its deep-supervision sum and the analytic gradient.

Arrays are (C, X, Y, Z) (any number of spatial axes works); MultiChannelProb
inputs are accepted too.  Everything is computed in float64.
"""
from __future__ import annotations

import numpy as np

from .volcore import MultiChannelProb

NUM_LEVELS = 5
LEVEL_WEIGHTS = tuple(1.0 / 2**i for i in range(NUM_LEVELS))


def _arr(x):
    if isinstance(x, MultiChannelProb):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _sums(pred, target):
    axes = tuple(range(1, pred.ndim))
    return (pred * target).sum(axis=axes), pred.sum(axis=axes), target.sum(axis=axes)


def soft_dice_loss(pred, target, epsilon: float = 1e-5) -> float:
    """Mean over channels of ``1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)``."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    inter, sp, st = _sums(p, t)
    per_channel = 1.0 - (2.0 * inter + epsilon) / (sp + st + epsilon)
    return float(per_channel.mean())


def soft_dice_grad(pred, target, epsilon: float = 1e-5) -> np.ndarray:
    """d soft_dice_loss / d pred, same shape as ``pred``."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    inter, sp, st = _sums(p, t)
    den = sp + st + epsilon
    num = 2.0 * inter + epsilon
    bshape = (-1,) + (1,) * (p.ndim - 1)
    den_b, num_b = den.reshape(bshape), num.reshape(bshape)
    grad = -(2.0 * t * den_b - num_b) / den_b**2
    return grad / p.shape[0]


def level_shape(shape, level):
    f = 2**level
    return tuple(max(1, n // f) for n in shape)


def downsample_nn(target, level: int):
    """Nearest-neighbor downsampling by ``2**level``: keeps index ``2**level * i``."""
    t = _arr(target)
    if level < 0:
        raise ValueError("level must be >= 0")
    if level == 0:
        return t
    f = 2**level
    out_shape = level_shape(t.shape[1:], level)
    sl = (slice(None),) + tuple(slice(0, n * f, f) for n in out_shape)
    return t[sl]


def validate_stack(preds, target_shape):
    if len(preds) != NUM_LEVELS:
        raise ValueError(f"deep supervision stack needs {NUM_LEVELS} levels, got {len(preds)}")
    arrs = [_arr(p) for p in preds]
    if arrs[0].shape != tuple(target_shape):
        raise ValueError(f"level 0 shape {arrs[0].shape} does not match target {tuple(target_shape)}")
    for i, a in enumerate(arrs):
        want = (target_shape[0],) + level_shape(target_shape[1:], i)
        if a.shape != want:
            raise ValueError(f"level {i} shape {a.shape}, expected {want}")
    return arrs


def deep_supervision_terms(preds, target, epsilon: float = 1e-5):
    """Unweighted per-level dice losses."""
    t = _arr(target)
    arrs = validate_stack(preds, t.shape)
    return [soft_dice_loss(p, downsample_nn(t, i), epsilon) for i, p in enumerate(arrs)]


def deep_supervision_loss(preds, target, epsilon: float = 1e-5) -> float:
    """``sum_i 2**-i * soft_dice_loss(preds[i], downsample_nn(target, i))`` over 5 levels."""
    terms = deep_supervision_terms(preds, target, epsilon)
    return float(sum(w * l for w, l in zip(LEVEL_WEIGHTS, terms)))
