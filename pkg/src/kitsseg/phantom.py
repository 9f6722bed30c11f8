"""Deterministic synthetic kidney CT phantoms with exact ground truth.

Generation algorithm (fixed, so a seed always reproduces the same phantom):

1. ``rng = numpy.random.default_rng(seed)`` (PCG64).
2. Body: an axis-aligned ellipsoid of soft tissue centered in the grid with
   semi-axes ``body_fraction * extent / 2``; everything else is air.
3. Kidneys: ``n = rng.integers(lo, hi + 1)``; for each kidney draw three
   semi-axes ``rng.uniform(*kidney_radius_mm)``. Candidate centers are voxels
   deeper inside the body than the largest semi-axis ``a`` and farther than
   ``a + gap_mm`` from earlier kidneys; the center is
   ``candidates[rng.integers(len(candidates))]`` (C order) and it is accepted
   when the ellipsoid lies inside the body and its ``gap_mm``-grown copy
   misses earlier kidneys.
4. Tumors then cysts: count as in 3; for each lesion draw a radius
   ``rng.uniform(*radius_mm)`` and a host kidney ``rng.integers(n_kidneys)``.
   Candidate centers are host voxels deeper than ``r`` plus one voxel
   (Euclidean distance to the host's outside) whose distance to every earlier lesion
   center is at least ``r + r_other + gap_mm``. If there are any, the center is
   ``candidates[rng.integers(len(candidates))]`` (C order) and it is accepted
   when the sphere and its face neighbors lie inside the host.
5. CT = tissue HU mean per voxel + ``rng.uniform(-noise, noise)`` per voxel.

Every rejection loop is bounded by ``max_tries`` draws.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volcore import Geometry, LabelMap, Volume

DEFAULT_HU = {"air": -1000.0, "soft_tissue": 40.0, "kidney": 30.0, "tumor": 70.0, "cyst": 10.0}


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    shape: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    kidney_count: tuple = (2, 2)
    kidney_radius_mm: tuple = (8.0, 12.0)
    tumor_count: tuple = (1, 2)
    tumor_radius_mm: tuple = (2.5, 4.5)
    cyst_count: tuple = (1, 1)
    cyst_radius_mm: tuple = (2.0, 3.0)
    hu: dict = field(default_factory=lambda: dict(DEFAULT_HU))
    noise: float = 4.0
    body_fraction: float = 0.9
    gap_mm: float = 3.0
    max_tries: int = 500

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("kidney_count", "tumor_count", "cyst_count"):
            lo, hi = (int(v) for v in getattr(self, name))
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
            setattr(self, name, (lo, hi))
        for name in ("kidney_radius_mm", "tumor_radius_mm", "cyst_radius_mm"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
            setattr(self, name, (lo, hi))
        missing = set(DEFAULT_HU) - set(self.hu)
        if missing:
            raise ValueError(f"missing HU means for {sorted(missing)}")
        means = sorted(self.hu.values())
        min_gap = min(b - a for a, b in zip(means, means[1:]))
        if not 0 <= self.noise < min_gap / 2:
            raise ValueError(f"noise amplitude must be below half the smallest HU gap ({min_gap / 2})")
        if self.kidney_count[1] == 0 and (self.tumor_count[0] or self.cyst_count[0]):
            raise ValueError("lesions need at least one kidney")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.shape, self.spacing)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(**d)


def _grid_mm(shape, spacing):
    idx = np.ogrid[tuple(slice(0, n) for n in shape)]
    return [i * s for i, s in zip(idx, spacing)]


def _ellipsoid(grid, center_mm, semi_axes):
    r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center_mm, semi_axes))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec):
    """Return ``(ct, labels)``; identical output for identical specs."""
    rng = np.random.default_rng(spec.seed)
    shape, spacing = spec.shape, spec.spacing
    grid = _grid_mm(shape, spacing)
    geom = spec.geometry

    extent = np.array(shape) * np.array(spacing)
    body_center = tuple((np.array(shape) - 1) / 2.0 * np.array(spacing))
    body = _ellipsoid(grid, body_center, tuple(spec.body_fraction * extent / 2.0))

    body_depth = ndimage.distance_transform_edt(np.pad(body, 1), sampling=spacing)[1:-1, 1:-1, 1:-1]

    kidneys = []
    occupied = np.zeros(shape, dtype=bool)
    for k in range(int(rng.integers(spec.kidney_count[0], spec.kidney_count[1] + 1))):
        free = ndimage.distance_transform_edt(~occupied, sampling=spacing) if occupied.any() else body_depth
        for _ in range(spec.max_tries):
            axes = tuple(rng.uniform(*spec.kidney_radius_mm, size=3))
            reach = max(axes)
            candidates = np.argwhere((body_depth > reach) & (free > reach + spec.gap_mm))
            if not len(candidates):
                continue
            center = tuple(candidates[int(rng.integers(len(candidates)))] * np.array(spacing))
            m = _ellipsoid(grid, center, axes)
            grown = _ellipsoid(grid, center, tuple(a + spec.gap_mm for a in axes))
            if m.any() and not (m & ~body).any() and not (grown & occupied).any():
                break
        else:
            raise PhantomError(f"could not place kidney {k} after {spec.max_tries} tries")
        kidneys.append(m)
        occupied |= m

    labels = np.zeros(shape, dtype=np.uint8)
    labels[occupied] = 1
    # distance (mm) from each kidney voxel to the nearest voxel outside that kidney
    depth = [ndimage.distance_transform_edt(np.pad(m, 1), sampling=spacing)[1:-1, 1:-1, 1:-1] for m in kidneys]

    lesions = []  # (center_mm, radius_mm)
    for kind, label, count, radius_rng in (
        ("tumor", 2, spec.tumor_count, spec.tumor_radius_mm),
        ("cyst", 3, spec.cyst_count, spec.cyst_radius_mm),
    ):
        for n in range(int(rng.integers(count[0], count[1] + 1))):
            for _ in range(spec.max_tries):
                r = float(rng.uniform(*radius_rng))
                k = int(rng.integers(len(kidneys)))
                host = kidneys[k]
                ok = depth[k] > r + max(spacing)
                for c, rc in lesions:
                    ok &= sum((g - ci) ** 2 for g, ci in zip(grid, c)) >= (r + rc + spec.gap_mm) ** 2
                candidates = np.argwhere(ok)
                if not len(candidates):
                    continue
                center = tuple(candidates[int(rng.integers(len(candidates)))] * np.array(spacing))
                m = _ellipsoid(grid, center, (r, r, r))
                # strictly inside: the lesion plus its face neighbors stay in the host
                if m.any() and not (ndimage.binary_dilation(m) & ~host).any():
                    break
            else:
                raise PhantomError(f"could not place {kind} {n} after {spec.max_tries} tries")
            lesions.append((center, r))
            labels[m] = label

    hu = spec.hu
    ct = np.where(body, hu["soft_tissue"], hu["air"]).astype(np.float64)
    for label, tissue in ((1, "kidney"), (2, "tumor"), (3, "cyst")):
        ct[labels == label] = hu[tissue]
    ct += rng.uniform(-spec.noise, spec.noise, size=shape)
    return Volume(geom, ct), LabelMap(geom, labels)
