"""Hot inner loops: separable resampling, connected components, box dilation.

Linear interpolation and component labelling have a numba implementation
(``*_nb``) and a numpy/scipy one (``*_np``) with identical results; the public
wrappers dispatch on ``_accel.backend()``. Nearest-neighbor take and box
dilation are plain numpy because vectorized slicing already beats a compiled
loop there (see ``benchmarks/bench_kernels.py``).
"""
import itertools

import numpy as np
from scipy import ndimage

from . import _accel
from ._accel import njit

# ------------------------------------------------------------ resampling


def axis_lerp_weights(n_src, coords):
    """Clamped linear-interpolation indices/weights for continuous source coords."""
    x = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n_src - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = x - i0
    return i0, i1, w


def axis_nearest_index(n_src, coords):
    x = np.asarray(coords, dtype=np.float64)
    return np.clip(np.floor(x + 0.5), 0, n_src - 1).astype(np.int64)


@njit
def _lerp_axis0_nb(src, i0, i1, w):
    m = i0.shape[0]
    _, nb, nc = src.shape
    out = np.empty((m, nb, nc), dtype=np.float64)
    for j in range(m):
        a0 = i0[j]
        a1 = i1[j]
        wj = w[j]
        for b in range(nb):
            for c in range(nc):
                lo = src[a0, b, c]
                out[j, b, c] = lo + wj * (src[a1, b, c] - lo)
    return out


def _lerp_axis0_np(src, i0, i1, w):
    lo = src[i0]
    return lo + w[:, None, None] * (src[i1] - lo)


def lerp_axis(arr, axis, i0, i1, w):
    """Linear interpolation of float64 ``arr`` along ``axis``."""
    src = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    if _accel.backend() == "numba":
        out = _lerp_axis0_nb(np.ascontiguousarray(src), i0, i1, w)
    else:
        out = _lerp_axis0_np(src, i0, i1, w)
    return np.moveaxis(out, 0, axis)


def take_axis(arr, axis, idx):
    return np.take(np.asarray(arr), idx, axis=axis)


# ---------------------------------------------------- connected components


def neighbor_offsets(connectivity):
    """All nonzero offsets of the 6- or 26-neighborhood, lexicographic order."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    if connectivity == 6:
        offs = [o for o in offs if sum(abs(v) for v in o) == 1]
    return np.array(offs, dtype=np.int64)


def _backward_offsets(connectivity):
    # neighbors already visited in a C-order scan
    offs = neighbor_offsets(connectivity)
    keep = [tuple(o) < (0, 0, 0) for o in offs]
    return offs[np.array(keep)]


@njit
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit
def _cc_nb(mask, offsets):
    # two-pass union-find over provisional labels; the mask is padded by one
    # voxel so neighbor lookups need no bounds checks
    nx, ny, nz = mask.shape
    py, pz = ny + 2, nz + 2
    pad = np.zeros((nx + 2, py, pz), dtype=np.bool_)
    pad[1:-1, 1:-1, 1:-1] = mask
    flat = pad.ravel()
    no = offsets.shape[0]
    d = np.empty(no, dtype=np.int64)
    for o in range(no):
        d[o] = (offsets[o, 0] * py + offsets[o, 1]) * pz + offsets[o, 2]
    prov = np.zeros(flat.size, dtype=np.int32)
    parent = np.zeros(mask.sum() + 1, dtype=np.int32)
    nl = 0
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            base = (i * py + j) * pz
            for k in range(1, nz + 1):
                p = base + k
                if not flat[p]:
                    continue
                r = 0
                for o in range(no):
                    lab = prov[p + d[o]]
                    if lab == 0:
                        continue
                    rl = _find(parent, lab)
                    if r == 0:
                        r = rl
                    elif rl < r:
                        parent[r] = rl
                        r = rl
                    elif rl > r:
                        parent[rl] = r
                if r == 0:
                    nl += 1
                    parent[nl] = nl
                    r = nl
                prov[p] = r
    # a component's first voxel always opens a new provisional label and roots
    # are the smallest label, so numbering roots in order gives scan order
    final = np.zeros(nl + 1, dtype=np.int32)
    count = 0
    for lab in range(1, nl + 1):
        r = _find(parent, lab)
        if r == lab:
            count += 1
            final[lab] = count
        else:
            final[lab] = final[r]
    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    sizes = np.zeros(count + 1, dtype=np.int64)
    for i in range(nx):
        for j in range(ny):
            base = ((i + 1) * py + j + 1) * pz + 1
            for k in range(nz):
                lab = final[prov[base + k]]
                labels[i, j, k] = lab
                sizes[lab] += 1
    sizes[0] = 0
    return labels, sizes


def _cc_np(mask, connectivity):
    # scipy also numbers components by first voxel in C-order scan
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=count + 1).astype(np.int64)
    sizes[0] = 0
    return labels.astype(np.int32), sizes


def label_components(mask, connectivity=26):
    """Component ids (0 = background, 1.. in scan order) and per-id sizes."""
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    if mask.ndim != 3:
        raise ValueError("mask must be 3D")
    if _accel.backend() == "numba":
        return _cc_nb(mask, _backward_offsets(connectivity))
    neighbor_offsets(connectivity)  # validates
    return _cc_np(mask, connectivity)


# ------------------------------------------------------------- dilation


def _box_dilate_axis0(src, r):
    out = src.copy()
    n = src.shape[0]
    for s in range(1, min(r, n - 1) + 1):
        out[s:] |= src[:-s]
        out[:-s] |= src[s:]
    return out


def box_dilate(mask, radius):
    """Dilation by a (2r+1)^3 cube, i.e. ``radius`` iterations of 26-neighbor dilation."""
    out = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return out.copy()
    for axis in range(3):
        res = _box_dilate_axis0(np.moveaxis(out, axis, 0), int(radius))
        out = np.moveaxis(res, 0, axis)
    return np.ascontiguousarray(out)
