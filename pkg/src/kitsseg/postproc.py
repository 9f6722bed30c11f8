"""Binary clean-up of decoded label maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volcore import LabelMap

TUMOR = 2
CYST = 3
DEFAULT_MIN_SIZE = 100
DEFAULT_RIM_VOXELS = 2


@dataclass(frozen=True)
class ComponentLabeling:
    """``component_id`` grid (0 = background) plus ``sizes[id]`` voxel counts."""

    component_id: np.ndarray
    sizes: np.ndarray  # sizes[0] is always 0

    @property
    def count(self) -> int:
        return len(self.sizes) - 1


def _as_array(mask):
    return np.asarray(mask.data if isinstance(mask, LabelMap) else mask)


def connected_components(mask, connectivity: int = 26) -> ComponentLabeling:
    """Label maximal connected foreground regions.

    Ids run from 1 in order of each component's first voxel in a C-order
    (lexicographic ``(i, j, k)``) scan.
    """
    ids, sizes = _kernels.label_components(_as_array(mask) != 0, connectivity)
    return ComponentLabeling(ids, sizes)


def remove_small_components(
    labels: LabelMap, min_size: int = DEFAULT_MIN_SIZE, connectivity: int = 26
) -> LabelMap:
    """Zero every merged-foreground component with fewer than ``min_size`` voxels."""
    if min_size < 1:
        raise ValueError("min_size must be positive")
    cc = connected_components(labels.data, connectivity)
    small = cc.sizes < min_size
    small[0] = False
    if not small.any():
        return labels
    out = labels.data.copy()
    out[small[cc.component_id]] = 0
    return LabelMap(labels.geometry, out)


def _absorb_rims_once(data, rim_voxels, connectivity):
    tumor = data == TUMOR
    if not tumor.any():
        return None
    cyst = data == CYST
    if not cyst.any():
        return None
    reach = _kernels.box_dilate(tumor, rim_voxels)
    cc = connected_components(cyst, connectivity)
    outside = np.zeros(cc.count + 1, dtype=bool)
    np.logical_or.at(outside, cc.component_id[cyst & ~reach], True)
    absorb = ~outside
    absorb[0] = False
    if not absorb.any():
        return None
    out = data.copy()
    out[absorb[cc.component_id]] = TUMOR
    return out


def fix_cyst_rim(
    labels: LabelMap, rim_voxels: int = DEFAULT_RIM_VOXELS, connectivity: int = 26
) -> LabelMap:
    """Relabel cyst components lying wholly within ``rim_voxels`` of tumor as tumor.

    Repeated until nothing changes, so the result is a fixed point and the
    operation is idempotent.
    """
    if rim_voxels < 1:
        raise ValueError("rim_voxels must be positive")
    data = labels.data
    changed = False
    while True:
        nxt = _absorb_rims_once(data, rim_voxels, connectivity)
        if nxt is None:
            break
        data, changed = nxt, True
    return LabelMap(labels.geometry, data) if changed else labels
