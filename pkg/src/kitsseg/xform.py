"""Intensity normalization, resampling between grids, bounding-box crop/uncrop.

Resampling convention: voxel ``i`` of a grid covers ``[origin + i*s, origin + (i+1)*s)``
along each axis, so its center sits at ``origin + (i + 0.5)*s``.  Samples outside
the source grid clamp to the nearest edge voxel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _kernels
from .volcore import Geometry, LabelMap, MultiChannelProb, Volume

DEFAULT_CROP_MARGIN = 5


@dataclass(frozen=True)
class IntensityWindow:
    lo: float = -54.0
    hi: float = 242.0

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid intensity window [{self.lo}, {self.hi}]")

    def scaled(self, hu):
        """Affine map of HU onto [-1, 1] (before the sigmoid)."""
        return 2.0 * (np.asarray(hu, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0


KITS_WINDOW = IntensityWindow(-54.0, 242.0)


def normalize_ct(vol: Volume, window: IntensityWindow = KITS_WINDOW) -> Volume:
    """Rescale ``[window.lo, window.hi]`` to ``[-1, 1]`` and squash with a sigmoid.

    No clipping happens first; the sigmoid bounds the tails.
    """
    return Volume(vol.geometry, expit(window.scaled(vol.data)))


def _rebuild(vol, geometry, data):
    return type(vol)(geometry, data)


def _axis_coords(src: Geometry, dst: Geometry, axis: int):
    s = src.spacing[axis]
    j = np.arange(dst.shape[axis], dtype=np.float64)
    shift = (dst.origin[axis] - src.origin[axis]) / s
    return shift + (j + 0.5) * (dst.spacing[axis] / s) - 0.5


def _resample_array(arr, src: Geometry, dst: Geometry, mode: str):
    out = arr
    for axis in range(3):
        coords = _axis_coords(src, dst, axis)
        n_src = src.shape[axis]
        if mode == "nearest":
            out = _kernels.take_axis(out, axis, _kernels.axis_nearest_index(n_src, coords))
        else:
            i0, i1, w = _kernels.axis_lerp_weights(n_src, coords)
            out = _kernels.lerp_axis(out, axis, i0, i1, w)
    return out


def _check_mode(vol, mode):
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if isinstance(vol, LabelMap) and mode != "nearest":
        raise ValueError("label maps can only be resampled with mode='nearest'")


def resample_to_geometry(vol, target: Geometry, mode: str = "trilinear"):
    """Resample ``vol`` onto exactly the grid ``target``."""
    _check_mode(vol, mode)
    if vol.geometry == target:
        return vol
    src = vol.geometry
    if isinstance(vol, MultiChannelProb):
        data = np.stack([_resample_array(c, src, target, mode) for c in vol.data])
        if mode == "trilinear":
            data = np.clip(data, 0.0, 1.0)
    else:
        data = _resample_array(vol.data, src, target, mode)
    return _rebuild(vol, target, data)


def resampled_shape(shape, spacing, target_spacing):
    """Round-half-up of ``shape * spacing / target_spacing``, at least 1."""
    return tuple(
        max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def resample(vol, target_spacing, mode: str = "trilinear"):
    """Resample to a new voxel spacing; origin is kept."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or any(not t > 0 for t in target_spacing):
        raise ValueError(f"target spacing must be 3 positive values, got {target_spacing}")
    _check_mode(vol, mode)
    g = vol.geometry
    probe = g.with_(spacing=target_spacing)  # float32-rounded like every Geometry
    shape = resampled_shape(g.shape, g.spacing, probe.spacing)
    return resample_to_geometry(vol, probe.with_(shape=shape), mode)


# ------------------------------------------------------------ bounding box


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel index box inside ``parent_geometry``."""

    lo: tuple
    hi: tuple
    parent_geometry: Geometry

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        shape = self.parent_geometry.shape
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounding box needs 3 axes")
        for a in range(3):
            if not 0 <= lo[a] <= hi[a] < shape[a]:
                raise ValueError(f"box [{lo}, {hi}] is not inside shape {shape}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self):
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    @property
    def geometry(self) -> Geometry:
        """Geometry of the cropped sub-volume."""
        g = self.parent_geometry
        origin = tuple(o + l * s for o, l, s in zip(g.origin, self.lo, g.spacing))
        return Geometry(self.shape, g.spacing, origin)

    def contains(self, ijk) -> bool:
        return all(l <= v <= h for v, l, h in zip(ijk, self.lo, self.hi))

    def to_dict(self):
        g = self.parent_geometry
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "parent": {"shape": list(g.shape), "spacing": list(g.spacing), "origin": list(g.origin)},
        }

    @classmethod
    def from_dict(cls, d):
        p = d["parent"]
        return cls(d["lo"], d["hi"], Geometry(p["shape"], p["spacing"], p["origin"]))


class EmptyForegroundError(ValueError):
    pass


def foreground_bbox(labels: LabelMap, margin_voxels: int = DEFAULT_CROP_MARGIN) -> BoundingBox:
    """Tight box around all nonzero voxels, grown by ``margin_voxels`` and clamped."""
    if margin_voxels < 0:
        raise ValueError("margin must be non-negative")
    data = np.asarray(labels.data)
    idx = np.nonzero(data)
    if idx[0].size == 0:
        raise EmptyForegroundError("label map has no foreground voxels")
    shape = labels.geometry.shape
    lo = [max(0, int(i.min()) - margin_voxels) for i in idx]
    hi = [min(n - 1, int(i.max()) + margin_voxels) for i, n in zip(idx, shape)]
    return BoundingBox(lo, hi, labels.geometry)


def crop(vol, box: BoundingBox):
    """Sub-volume inside ``box``; world coordinates of kept voxels are unchanged."""
    if vol.geometry != box.parent_geometry:
        raise ValueError("box was computed on a different geometry")
    if isinstance(vol, MultiChannelProb):
        data = vol.data[(slice(None),) + box.slices]
    else:
        data = vol.data[box.slices]
    return _rebuild(vol, box.geometry, data)


def uncrop(vol, box: BoundingBox, fill=0):
    """Paste ``vol`` back into a parent-sized grid filled with ``fill``."""
    if vol.geometry.shape != box.shape:
        raise ValueError(f"volume shape {vol.geometry.shape} does not match box extent {box.shape}")
    if isinstance(vol, MultiChannelProb):
        out = np.full((vol.num_channels,) + box.parent_geometry.shape, fill, dtype=vol.data.dtype)
        out[(slice(None),) + box.slices] = vol.data
    else:
        out = np.full(box.parent_geometry.shape, fill, dtype=vol.data.dtype)
        out[box.slices] = vol.data
    return _rebuild(vol, box.parent_geometry, out)
