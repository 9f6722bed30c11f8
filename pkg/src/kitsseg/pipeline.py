"""End-to-end inference pipeline, dataset manifests and fold splitting."""
from __future__ import annotations

import json
import logging
import re
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ensemble import EnsembleInput, ensemble_mean
from .infer import (
    ConstantPredictor,
    OraclePredictor,
    SlidingWindowSpec,
    SubprocessPredictor,
    ThresholdPredictor,
    sliding_window_predict,
)
from .labelspace import KITS_CLASSMAP, ClassMap, decode
from .metrics import DEFAULT_TOLERANCE_MM, evaluate_case
from .postproc import DEFAULT_MIN_SIZE, DEFAULT_RIM_VOXELS, fix_cyst_rim, remove_small_components
from .volcore import LabelMap, read_nifti, write_nifti
from .xform import (
    DEFAULT_CROP_MARGIN,
    EmptyForegroundError,
    IntensityWindow,
    crop,
    foreground_bbox,
    normalize_ct,
    resample,
    resample_to_geometry,
    uncrop,
)

log = logging.getLogger("kitsseg")

COARSE_SPACING = (0.78, 0.78, 0.78)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- manifest


def case_id_from_path(path) -> str:
    name = Path(path).name
    name = re.sub(r"\.nii(\.gz)?$", "", name)
    return re.sub(r"_0000$", "", name)


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: str
    label: str | None = None
    fold: int = 0


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    k: int = 5

    def __post_init__(self):
        images = [e.image for e in self.entries]
        if len(set(images)) != len(images):
            raise ValueError("manifest image paths must be distinct")
        ids = [e.case_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest case ids must be distinct")
        for e in self.entries:
            if not 0 <= e.fold < self.k:
                raise ValueError(f"fold {e.fold} of {e.case_id} outside 0..{self.k - 1}")

    def fold_sizes(self):
        return [sum(1 for e in self.entries if e.fold == f) for f in range(self.k)]

    def to_json(self):
        items = []
        for e in self.entries:
            item = {"case_id": e.case_id, "image": e.image, "fold": e.fold}
            if e.label is not None:
                item["label"] = e.label
            items.append(item)
        return {"num_folds": self.k, "training": items}

    @classmethod
    def from_json(cls, d):
        entries = []
        for item in d.get("training", []) + d.get("testing", []):
            if isinstance(item, str):
                item = {"image": item}
            image = item["image"]
            entries.append(
                ManifestEntry(
                    item.get("case_id") or case_id_from_path(image),
                    image,
                    item.get("label"),
                    int(item.get("fold", 0)),
                )
            )
        k = int(d.get("num_folds", max([e.fold for e in entries], default=4) + 1))
        return cls(entries, max(k, 1))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def split_folds(cases, k: int = 5, seed: int = 0) -> DatasetManifest:
    """Seeded shuffle, then round-robin fold assignment (fold sizes differ by <= 1).

    ``cases`` holds case ids / image paths, or dicts with ``image`` and
    optional ``label`` / ``case_id``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    cases = list(cases)
    if len(cases) < k:
        raise ValueError(f"need at least k={k} cases, got {len(cases)}")
    order = np.random.default_rng(seed).permutation(len(cases))
    entries = [None] * len(cases)
    for pos, i in enumerate(order):
        item = cases[i]
        if isinstance(item, dict):
            image = str(item["image"])
            cid = item.get("case_id") or case_id_from_path(image)
            label = item.get("label")
        else:
            image = str(item)
            cid, label = case_id_from_path(image), None
        entries[i] = ManifestEntry(cid, image, None if label is None else str(label), pos % k)
    return DatasetManifest(entries, k)


# ------------------------------------------------------------------ config


@dataclass
class MemberConfig:
    member_id: str
    predictor: dict
    spacing: tuple | None = None
    weight: float = 1.0
    window: tuple | None = None


@dataclass
class PipelineConfig:
    dataroot: Path = Path(".")
    datalist: Path | None = None
    modality: str = "CT"
    cmap: ClassMap = KITS_CLASSMAP
    intensity_window: IntensityWindow = IntensityWindow()
    window: tuple = (96, 96, 96)
    overlap: float = 0.25
    blend: str = "gaussian"
    sigma_fraction: float = 0.125
    members: list = field(default_factory=list)
    coarse: dict | None = None
    crop_margin: int = DEFAULT_CROP_MARGIN
    threshold: object = 0.5
    min_component_size: int = DEFAULT_MIN_SIZE
    rim_voxels: int = DEFAULT_RIM_VOXELS
    tolerance_mm: object = DEFAULT_TOLERANCE_MM
    output_dir: Path = Path("predictions")
    workers: int = 1
    fold: int | None = None

    def window_spec(self, window=None) -> SlidingWindowSpec:
        return SlidingWindowSpec(window or self.window, self.overlap, self.blend, self.sigma_fraction)


def _triple(v, name):
    if v is None:
        return None
    if isinstance(v, (int, float)):
        v = [v] * 3
    v = tuple(v)
    if len(v) != 3:
        raise ConfigError(f"{name} needs 3 values")
    return v


def load_config(source, base_dir=None) -> PipelineConfig:
    """Build a PipelineConfig from a YAML/JSON path or an already-parsed dict.

    Relative ``dataroot`` / ``datalist`` / ``output_dir`` resolve against the
    config file's directory.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base_dir = path.parent if base_dir is None else base_dir
    else:
        raw = dict(source)
    base = Path(base_dir or ".")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        cfg = PipelineConfig()
        cfg.modality = raw.get("modality", "CT")
        if cfg.modality != "CT":
            raise ConfigError(f"unsupported modality {cfg.modality!r}")
        cfg.dataroot = rel(raw.get("dataroot", "."))
        cfg.datalist = rel(raw["datalist"]) if raw.get("datalist") else None
        if "class_names" in raw:
            cfg.cmap = ClassMap.from_config(raw)
        lo, hi = raw.get("intensity_window", [-54.0, 242.0])
        cfg.intensity_window = IntensityWindow(float(lo), float(hi))
        cfg.window = _triple(raw.get("window", cfg.window), "window")
        cfg.overlap = float(raw.get("overlap", cfg.overlap))
        cfg.blend = raw.get("blend", cfg.blend)
        cfg.sigma_fraction = float(raw.get("sigma_fraction", cfg.sigma_fraction))
        cfg.window_spec()  # validates window / overlap / blend
        members = raw.get("ensemble") or [{"id": "model0", "predictor": {"type": "threshold"}}]
        for i, m in enumerate(members):
            if "predictor" not in m:
                raise ConfigError(f"ensemble member {i} has no predictor")
            cfg.members.append(
                MemberConfig(
                    str(m.get("id", f"model{i}")),
                    dict(m["predictor"]),
                    _triple(m.get("spacing"), "spacing"),
                    float(m.get("weight", 1.0)),
                    _triple(m.get("window"), "window"),
                )
            )
        coarse = raw.get("coarse")
        if coarse:
            if "predictor" not in coarse:
                raise ConfigError("coarse pass needs a predictor")
            cfg.coarse = dict(coarse)
        cfg.crop_margin = int(raw.get("crop_margin", cfg.crop_margin))
        cfg.threshold = raw.get("threshold", cfg.threshold)
        cfg.min_component_size = int(raw.get("min_component_size", cfg.min_component_size))
        cfg.rim_voxels = int(raw.get("rim_voxels", cfg.rim_voxels))
        cfg.tolerance_mm = raw.get("tolerance_mm", cfg.tolerance_mm)
        cfg.output_dir = rel(raw.get("output_dir", "predictions"))
        cfg.workers = int(raw.get("workers", 1))
        cfg.fold = raw.get("fold")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def build_predictor(pspec: dict, window, cmap: ClassMap, gt: LabelMap | None = None):
    kind = pspec.get("type")
    window = tuple(window)
    if kind == "constant":
        return ConstantPredictor(window, float(pspec.get("value", 0.5)), len(cmap))
    if kind == "oracle":
        if gt is None:
            raise ValueError("oracle predictor needs a ground-truth label map")
        return OraclePredictor(gt, window, cmap)
    if kind == "threshold":
        return ThresholdPredictor(window, pspec.get("tissue_hu"), cmap=cmap)
    if kind == "subprocess":
        cmd = pspec["command"]
        cmd = cmd.split() if isinstance(cmd, str) else list(cmd)
        return SubprocessPredictor(cmd, window, len(cmap), pspec.get("timeout"))
    raise ValueError(f"unknown predictor type {kind!r}")


# ---------------------------------------------------------------- pipeline


def _predict_at(vol, predictor, spec, spacing, workers=1):
    """Sliding-window prediction at ``spacing`` (None = as is), returned on ``vol``'s grid."""
    work = vol if spacing is None else resample(vol, spacing, "trilinear")
    prob = sliding_window_predict(work, predictor, spec, workers)
    return resample_to_geometry(prob, vol.geometry, "trilinear")


def coarse_box(norm, cfg: PipelineConfig, gt=None):
    """Bounding box from a coarse predictor pass; None when it finds nothing."""
    c = cfg.coarse
    window = _triple(c.get("window"), "window") or cfg.window
    predictor = build_predictor(c["predictor"], window, cfg.cmap, gt)
    spacing = _triple(c.get("spacing", COARSE_SPACING), "spacing")
    work = norm if spacing is None else resample(norm, spacing, "trilinear")
    prob = sliding_window_predict(work, predictor, cfg.window_spec(window))
    coarse_labels = decode(prob, cfg.cmap, cfg.threshold)
    native = resample_to_geometry(coarse_labels, norm.geometry, "nearest")
    margin = int(c.get("margin", cfg.crop_margin))
    try:
        return foreground_bbox(native, margin)
    except EmptyForegroundError:
        return None


def segment(ct, cfg: PipelineConfig, gt: LabelMap | None = None, warnings=None):
    """normalize -> [coarse box -> crop] -> members -> ensemble -> decode -> postproc -> uncrop."""
    warnings = [] if warnings is None else warnings
    norm = normalize_ct(ct, cfg.intensity_window)
    box = None
    if cfg.coarse:
        box = coarse_box(norm, cfg, gt)
        if box is None:
            warnings.append("coarse pass found no foreground; crop skipped, full volume processed")
    work = crop(norm, box) if box is not None else norm

    inputs = []
    for m in cfg.members:
        window = m.window or cfg.window
        predictor = build_predictor(m.predictor, window, cfg.cmap, gt)
        prob = _predict_at(work, predictor, cfg.window_spec(window), m.spacing)
        inputs.append(EnsembleInput(m.member_id, prob, m.weight))
    ens = ensemble_mean(inputs, work.geometry)

    labels = decode(ens, cfg.cmap, cfg.threshold)
    labels = remove_small_components(labels, cfg.min_component_size)
    labels = fix_cyst_rim(labels, cfg.rim_voxels)
    if box is not None:
        labels = uncrop(labels, box, 0)
    return labels, box


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else cfg.dataroot / p


def run_case(entry: ManifestEntry, cfg: PipelineConfig) -> dict:
    """Process one case; never raises, failures come back as a diagnostic dict."""
    result = {"case_id": entry.case_id, "status": "ok", "warnings": []}
    stage = "read"
    try:
        ct = read_nifti(_resolve(cfg, entry.image), labels=False)
        gt = read_nifti(_resolve(cfg, entry.label), labels=True) if entry.label else None
        if gt is not None and gt.geometry.shape != ct.geometry.shape:
            raise ValueError("label and image shapes differ")
        stage = "segment"
        labels, box = segment(ct, cfg, gt, result["warnings"])
        if box is not None:
            result["bbox"] = {"lo": list(box.lo), "hi": list(box.hi)}
        stage = "write"
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        out = cfg.output_dir / f"{entry.case_id}.nii.gz"
        write_nifti(labels, out)
        result["prediction"] = str(out)
        if gt is not None:
            stage = "evaluate"
            scores = evaluate_case(labels, gt, cfg.cmap, cfg.tolerance_mm).to_json(entry.case_id)
            (cfg.output_dir / f"{entry.case_id}_scores.json").write_text(json.dumps(scores, indent=2))
            result["scores"] = scores
    except Exception as exc:  # noqa: BLE001 - one bad case must not stop the run
        result.update(
            status="error",
            error={"stage": stage, "type": type(exc).__name__, "message": str(exc)},
        )
        log.debug("case %s failed:\n%s", entry.case_id, traceback.format_exc())
    for w in result["warnings"]:
        log.warning("[%s] %s", entry.case_id, w)
    if result["status"] == "error":
        log.error("[%s] %s failed: %s", entry.case_id, stage, result["error"]["message"])
    else:
        log.info("[%s] done", entry.case_id)
    return result


def run_pipeline(cfg: PipelineConfig, manifest: DatasetManifest | None = None) -> dict:
    """Run every manifest case (optionally one fold) and collect a summary."""
    if manifest is None:
        if cfg.datalist is None:
            raise ConfigError("no datalist given")
        manifest = DatasetManifest.load(cfg.datalist)
    entries = [e for e in manifest.entries if cfg.fold is None or e.fold == int(cfg.fold)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda e: run_case(e, cfg), entries))
    else:
        results = [run_case(e, cfg) for e in entries]
    scored = [r["scores"] for r in results if "scores" in r]
    summary = {
        "cases": results,
        "num_failed": sum(r["status"] != "ok" for r in results),
    }
    if scored:
        summary["mean_average_dice"] = float(np.mean([s["average_dice"] for s in scored]))
        summary["mean_average_surface_dice"] = float(np.mean([s["average_surface_dice"] for s in scored]))
    return summary
