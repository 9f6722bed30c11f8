"""Sliding-window inference with pluggable window predictors."""
from __future__ import annotations

import itertools
import math
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit

from .labelspace import KITS_CLASSMAP, ClassMap, encode_array
from .volcore import Geometry, LabelMap, MultiChannelProb, Volume, read_nifti, write_nifti
from .xform import KITS_WINDOW, IntensityWindow, resample_to_geometry

WEIGHT_FLOOR = 1e-6


class Predictor(Protocol):
    window_shape: tuple
    num_channels: int

    def predict(self, window: Volume) -> MultiChannelProb: ...


class PredictorError(RuntimeError):
    """A predictor returned something that violates the window contract."""


@dataclass(frozen=True)
class SlidingWindowSpec:
    window_shape: tuple
    overlap: float = 0.25
    blend: str = "gaussian"
    sigma_fraction: float = 0.125

    def __post_init__(self):
        shape = tuple(int(w) for w in self.window_shape)
        if len(shape) != 3 or any(w < 1 for w in shape):
            raise ValueError(f"window shape must be 3 positive ints, got {self.window_shape}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend not in ("constant", "gaussian"):
            raise ValueError(f"unknown blend mode {self.blend!r}")
        if not self.sigma_fraction > 0:
            raise ValueError("sigma_fraction must be positive")
        object.__setattr__(self, "window_shape", shape)


def _axis_starts(n, w, overlap):
    if n <= w:
        return [0]
    stride = max(1, int(math.floor(w * (1.0 - overlap))))
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def tile_windows(volume_shape, spec: SlidingWindowSpec):
    """Window start indices, lexicographically sorted; the last window per axis ends flush."""
    per_axis = [_axis_starts(int(n), w, spec.overlap) for n, w in zip(volume_shape, spec.window_shape)]
    return sorted(set(itertools.product(*per_axis)))


def blend_weights(spec: SlidingWindowSpec):
    """Per-window weight map, shape ``spec.window_shape``."""
    if spec.blend == "constant":
        return np.ones(spec.window_shape, dtype=np.float64)
    axes = []
    for w in spec.window_shape:
        x = np.arange(w, dtype=np.float64)
        sigma = spec.sigma_fraction * w
        g = np.exp(-0.5 * ((x - (w - 1) / 2.0) / sigma) ** 2)
        axes.append(g / g.max())
    weights = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(weights, WEIGHT_FLOOR)


class _OrderedAccumulator:
    """Weighted-sum and weight-sum buffers filled strictly in tile order.

    Predictions may arrive in any order; they are held until every earlier
    tile has been added so the float summation order never changes.
    """

    def __init__(self, num_channels, shape, spec, tiles):
        self.spec = spec
        self.tiles = list(tiles)
        self.weights = blend_weights(spec)
        self.acc = np.zeros((num_channels,) + tuple(shape), dtype=np.float64)
        self.wsum = np.zeros(tuple(shape), dtype=np.float64)
        self._pending = {}
        self._next = 0

    def add(self, index, pred):
        self._pending[index] = pred
        while self._next in self._pending:
            p = self._pending.pop(self._next)
            start = self.tiles[self._next]
            sl = tuple(slice(s, s + w) for s, w in zip(start, self.spec.window_shape))
            self.acc[(slice(None),) + sl] += self.weights * p
            self.wsum[sl] += self.weights
            self._next += 1

    def result(self):
        if self._next != len(self.tiles):
            raise RuntimeError("not all windows were accumulated")
        if (self.wsum <= 0).any():
            raise RuntimeError("voxel not covered by any window")
        return self.acc / self.wsum


def _pad_amounts(shape, window):
    pads = []
    for n, w in zip(shape, window):
        extra = max(0, w - n)
        pads.append((extra // 2, extra - extra // 2))
    return pads


def _check_prediction(pred, window: Volume, num_channels):
    if isinstance(pred, MultiChannelProb):
        if pred.geometry != window.geometry:
            raise PredictorError("prediction geometry differs from the window geometry")
        data = pred.data
    else:
        data = np.asarray(pred, dtype=np.float32)
    expected = (num_channels,) + window.geometry.shape
    if data.shape != expected:
        raise PredictorError(f"prediction shape {data.shape}, expected {expected}")
    if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
        raise PredictorError("prediction values outside [0, 1]")
    return data


def sliding_window_predict(
    vol: Volume, predictor: Predictor, spec: SlidingWindowSpec | None = None, workers: int = 1
) -> MultiChannelProb:
    """Full-volume probability map from overlapping window predictions.

    Volumes smaller than the window are edge-padded symmetrically first.  With
    ``workers > 1`` windows are predicted concurrently; the result is
    bit-identical to ``workers=1``.
    """
    if spec is None:
        spec = SlidingWindowSpec(predictor.window_shape)
    if tuple(predictor.window_shape) != spec.window_shape:
        raise ValueError(
            f"predictor window {tuple(predictor.window_shape)} != spec window {spec.window_shape}"
        )
    g = vol.geometry
    pads = _pad_amounts(g.shape, spec.window_shape)
    data = np.pad(vol.data, pads, mode="edge") if any(p != (0, 0) for p in pads) else vol.data
    porigin = tuple(o - p[0] * s for o, p, s in zip(g.origin, pads, g.spacing))
    pshape = data.shape

    tiles = tile_windows(pshape, spec)
    nchan = int(predictor.num_channels)
    acc = _OrderedAccumulator(nchan, pshape, spec, tiles)

    def run(index):
        start = tiles[index]
        sl = tuple(slice(s, s + w) for s, w in zip(start, spec.window_shape))
        origin = tuple(o + st * s for o, st, s in zip(porigin, start, g.spacing))
        window = Volume(Geometry(spec.window_shape, g.spacing, origin), data[sl])
        return _check_prediction(predictor.predict(window), window, nchan)

    if workers <= 1:
        for i in range(len(tiles)):
            acc.add(i, run(i))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run, i): i for i in range(len(tiles))}
            for fut in as_completed(futures):
                acc.add(futures[fut], fut.result())

    out = acc.result()
    unpad = tuple(slice(lo, n - hi) for (lo, hi), n in zip(pads, pshape))
    out = np.clip(out[(slice(None),) + unpad], 0.0, 1.0)
    return MultiChannelProb(g, out)


# ------------------------------------------------------------- predictors


@dataclass
class ConstantPredictor:
    window_shape: tuple
    value: float = 0.5
    num_channels: int = 3

    def predict(self, window: Volume) -> MultiChannelProb:
        data = np.full((self.num_channels,) + window.geometry.shape, self.value, dtype=np.float32)
        return MultiChannelProb(window.geometry, data)


@dataclass
class OraclePredictor:
    """Encodes ground-truth labels sampled (nearest) on each window's grid."""

    labels: LabelMap
    window_shape: tuple
    cmap: ClassMap = KITS_CLASSMAP

    @property
    def num_channels(self):
        return len(self.cmap)

    def predict(self, window: Volume) -> MultiChannelProb:
        lab = resample_to_geometry(self.labels, window.geometry, "nearest")
        return MultiChannelProb(window.geometry, encode_array(lab.data, self.cmap))


DEFAULT_TISSUE_HU = {"air": -1000.0, "soft_tissue": 40.0, "kidney": 30.0, "tumor": 70.0, "cyst": 10.0}
TISSUE_LABEL = {"air": 0, "soft_tissue": 0, "kidney": 1, "tumor": 2, "cyst": 3}


@dataclass
class ThresholdPredictor:
    """Toy non-oracle predictor: nearest tissue mean in HU, on normalized input.

    The input window is expected to be ``normalize_ct`` output; thresholds are
    the HU midpoints between adjacent tissue means pushed through the same map.
    """

    window_shape: tuple
    tissue_hu: dict = None
    intensity_window: IntensityWindow = KITS_WINDOW
    cmap: ClassMap = KITS_CLASSMAP

    def __post_init__(self):
        tissue = dict(DEFAULT_TISSUE_HU if self.tissue_hu is None else self.tissue_hu)
        order = sorted(tissue, key=tissue.get)
        hu = np.array([tissue[t] for t in order])
        mids = (hu[:-1] + hu[1:]) / 2.0
        self._cuts = expit(self.intensity_window.scaled(mids)).astype(np.float32)
        self._labels = np.array([TISSUE_LABEL[t] for t in order], dtype=np.uint8)

    @property
    def num_channels(self):
        return len(self.cmap)

    def predict(self, window: Volume) -> MultiChannelProb:
        cls = np.searchsorted(self._cuts, window.data, side="right")
        return MultiChannelProb(window.geometry, encode_array(self._labels[cls], self.cmap))


@dataclass
class SubprocessPredictor:
    """Runs an external program per window.

    The program is called as ``command... <window.nii> <out_dir>`` and must
    write ``out_dir/prob_0.nii`` .. ``prob_{C-1}.nii``, float32 on the window grid.
    """

    command: Sequence[str]
    window_shape: tuple
    num_channels: int = 3
    timeout: float | None = None

    def predict(self, window: Volume) -> MultiChannelProb:
        with tempfile.TemporaryDirectory(prefix="kitsseg_win_") as tmp:
            tmp = Path(tmp)
            win_path = tmp / "window.nii"
            out_dir = tmp / "out"
            out_dir.mkdir()
            write_nifti(window, win_path)
            proc = subprocess.run(
                [*self.command, str(win_path), str(out_dir)],
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
            if proc.returncode != 0:
                raise PredictorError(
                    f"predictor exited with {proc.returncode}: {proc.stderr.strip()[-500:]}"
                )
            channels = []
            for c in range(self.num_channels):
                path = out_dir / f"prob_{c}.nii"
                if not path.exists():
                    raise PredictorError(f"predictor did not write {path.name}")
                ch = read_nifti(path, labels=False)
                if ch.geometry.shape != window.geometry.shape:
                    raise PredictorError(f"{path.name} has shape {ch.geometry.shape}")
                channels.append(ch.data)
        return MultiChannelProb(window.geometry, np.stack(channels))
