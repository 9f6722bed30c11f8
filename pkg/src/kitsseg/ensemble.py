"""Weighted mean of member probability maps on a common (native) grid."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .volcore import Geometry, MultiChannelProb
from .xform import resample_to_geometry


@dataclass(frozen=True)
class EnsembleInput:
    member_id: str
    prob: MultiChannelProb
    weight: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"member {self.member_id!r}: weight must be > 0")


def ensemble_mean(members, native: Geometry, workers: int = 1) -> MultiChannelProb:
    """Resample every member to ``native`` (trilinear), then take the weighted mean.

    Members are summed in ``member_id`` order, so the result does not depend
    on the order of ``members`` at all, not even in the last bit.
    """
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    ids = [m.member_id for m in members]
    if len(set(ids)) != len(ids):
        raise ValueError("ensemble member ids must be unique")
    nchan = {m.prob.num_channels for m in members}
    if len(nchan) != 1:
        raise ValueError(f"members disagree on channel count: {sorted(nchan)}")

    members.sort(key=lambda m: m.member_id)

    def to_native(m):
        return resample_to_geometry(m.prob, native, "trilinear").data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            resampled = list(pool.map(to_native, members))
    else:
        resampled = [to_native(m) for m in members]

    acc = np.zeros((nchan.pop(),) + native.shape, dtype=np.float64)
    total = 0.0
    for m, data in zip(members, resampled):
        acc += m.weight * data.astype(np.float64)
        total += m.weight
    return MultiChannelProb(native, np.clip(acc / total, 0.0, 1.0))
