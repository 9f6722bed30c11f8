import json
from collections import Counter

import numpy as np
import pytest
import yaml

from kitsseg.metrics import evaluate_case
from kitsseg.phantom import PhantomSpec, generate_phantom
from kitsseg.pipeline import (
    ConfigError,
    DatasetManifest,
    ManifestEntry,
    load_config,
    run_pipeline,
    segment,
    split_folds,
)
from kitsseg.volcore import read_nifti, write_nifti

SMALL = dict(shape=(40, 40, 40), tumor_count=(1, 1), gap_mm=1.5, kidney_radius_mm=(5, 7), tumor_radius_mm=(1.5, 2.5), cyst_radius_mm=(1.5, 2))


def test_split_even():
    m = split_folds([f"case_{i}" for i in range(10)], 5, seed=1)
    assert m.fold_sizes() == [2] * 5


def test_split_489():
    m = split_folds([f"case_{i:05d}" for i in range(489)], 5, seed=0)
    assert Counter(m.fold_sizes()) == Counter({98: 4, 97: 1})
    again = split_folds([f"case_{i:05d}" for i in range(489)], 5, seed=0)
    assert m.to_json() == again.to_json()
    other = split_folds([f"case_{i:05d}" for i in range(489)], 5, seed=1)
    assert m.to_json() != other.to_json()


def test_split_errors():
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 5)
    with pytest.raises(ValueError):
        split_folds(["a", "b", "c"], 1)


def test_manifest_roundtrip_and_validation(tmp_path):
    m = split_folds([{"image": f"c{i}_0000.nii.gz", "label": f"c{i}_seg.nii.gz"} for i in range(7)], 3, 4)
    m.save(tmp_path / "d.json")
    back = DatasetManifest.load(tmp_path / "d.json")
    assert back.entries == m.entries and back.k == 3
    assert back.entries[0].case_id == "c0"
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("a", "x.nii", None, 5)], 5)
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("a", "x.nii"), ManifestEntry("b", "x.nii")])


def _cfg(predictor, coarse=True, **extra):
    raw = {
        "window": [24, 24, 24],
        "overlap": 0.25,
        "ensemble": [
            {"id": "segresnet", "predictor": {"type": predictor}},
            {"id": "dints", "predictor": {"type": predictor}, "spacing": [1.25, 1.25, 1.25], "window": [16, 16, 16]},
        ],
    }
    if coarse:
        raw["coarse"] = {"predictor": {"type": predictor}, "spacing": [0.78, 0.78, 0.78]}
    raw.update(extra)
    return load_config(raw)


@pytest.fixture(scope="module")
def phantom_case():
    return generate_phantom(PhantomSpec(seed=21, **SMALL))


def test_oracle_pipeline(phantom_case):
    ct, gt = phantom_case
    labels, box = segment(ct, _cfg("oracle"), gt)
    assert labels.geometry == ct.geometry
    assert box is not None
    scores = evaluate_case(labels, gt)
    assert all(v["dice"] >= 0.95 for v in scores.per_class.values())


def test_threshold_pipeline(phantom_case):
    ct, gt = phantom_case
    labels, _ = segment(ct, _cfg("threshold", coarse=False), gt)
    assert evaluate_case(labels, gt).average_dice >= 0.8


def test_crop_does_not_change_oracle_output(phantom_case):
    ct, gt = phantom_case
    with_crop, box = segment(ct, _cfg("oracle", coarse=True), gt)
    without, _ = segment(ct, _cfg("oracle", coarse=False), gt)
    assert box is not None and box.shape != ct.geometry.shape
    assert np.array_equal(with_crop.data, without.data)


def test_empty_coarse_pass_skips_crop(phantom_case):
    ct, gt = phantom_case
    cfg = _cfg("oracle", coarse=False)
    cfg.coarse = {"predictor": {"type": "constant", "value": 0.0}}
    warnings = []
    labels, box = segment(ct, cfg, gt, warnings)
    assert box is None and warnings and "crop skipped" in warnings[0]
    assert labels.geometry == ct.geometry


def _write_cases(root, n=2):
    items = []
    for i in range(n):
        ct, lab = generate_phantom(PhantomSpec(seed=100 + i, **SMALL))
        write_nifti(ct, root / f"case_{i}_0000.nii.gz")
        write_nifti(lab, root / f"case_{i}_seg.nii.gz")
        items.append({"image": f"case_{i}_0000.nii.gz", "label": f"case_{i}_seg.nii.gz"})
    return items


def test_run_pipeline_from_yaml(tmp_path):
    items = _write_cases(tmp_path)
    items.append({"image": "missing_0000.nii.gz"})
    manifest = split_folds(items, 2, seed=0)
    manifest.save(tmp_path / "dataset.json")
    config = {
        "modality": "CT",
        "datalist": "dataset.json",
        "dataroot": ".",
        "class_names": [
            {"name": "kidney_and_mass", "index": [1, 2, 3]},
            {"name": "mass", "index": [2, 3]},
            {"name": "tumor", "index": [2]},
        ],
        "sigmoid": True,
        "window": [24, 24, 24],
        "ensemble": [{"id": "m0", "predictor": {"type": "oracle"}}],
        "output_dir": "out",
        "workers": 2,
    }
    (tmp_path / "input.yaml").write_text(yaml.safe_dump(config))
    summary = run_pipeline(load_config(tmp_path / "input.yaml"))
    by_id = {c["case_id"]: c for c in summary["cases"]}
    assert summary["num_failed"] == 1
    assert by_id["missing"]["status"] == "error" and by_id["missing"]["error"]["stage"] == "read"
    for cid in ("case_0", "case_1"):
        case = by_id[cid]
        assert case["status"] == "ok"
        assert case["scores"]["average_dice"] == 1.0
        pred = read_nifti(case["prediction"], labels=True)
        assert pred.geometry == read_nifti(tmp_path / f"{cid}_0000.nii.gz").geometry
        scores = json.loads((tmp_path / "out" / f"{cid}_scores.json").read_text())
        assert set(scores) == {"case_id", "per_class", "average_dice", "average_surface_dice"}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config({"window": [0, 1, 1]})
    with pytest.raises(ConfigError):
        load_config({"modality": "MR"})
    with pytest.raises(ConfigError):
        load_config({"ensemble": [{"id": "x"}]})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
