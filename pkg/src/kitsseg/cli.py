"""``kitsseg`` command line.

Exit codes: 0 success, 1 a case (or the command's work) failed, 2 bad config
or arguments.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .ensemble import EnsembleInput, ensemble_mean
from .infer import SlidingWindowSpec, sliding_window_predict
from .labelspace import KITS_CLASSMAP, ClassMap, decode
from .metrics import evaluate_case
from .phantom import PhantomSpec, generate_phantom
from .pipeline import ConfigError, build_predictor, load_config, run_pipeline, split_folds
from .postproc import fix_cyst_rim, remove_small_components
from .volcore import LabelMap, MultiChannelProb, read_nifti, write_nifti
from .xform import BoundingBox, IntensityWindow, crop, foreground_bbox, normalize_ct, resample, uncrop

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("kitsseg")


def _load_cmap(path):
    if not path:
        return KITS_CLASSMAP
    import yaml

    return ClassMap.from_config(yaml.safe_load(Path(path).read_text()))


def _dump(obj, out):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_phantom(args):
    base = json.loads(Path(args.spec).read_text()) if args.spec else {}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed0 = int(args.seed if args.seed is not None else base.get("seed", 0))
    written = []
    for i in range(args.count):
        spec = PhantomSpec.from_dict({**base, "seed": seed0 + i})
        ct, labels = generate_phantom(spec)
        cid = f"case_{seed0 + i:05d}"
        img, lab = out_dir / f"{cid}_0000.nii.gz", out_dir / f"{cid}_seg.nii.gz"
        write_nifti(ct, img)
        write_nifti(labels, lab)
        written.append({"case_id": cid, "image": img.name, "label": lab.name})
    _dump(written, None)
    return EXIT_OK


def cmd_split_folds(args):
    if args.ids:
        cases = [l.strip() for l in Path(args.ids).read_text().splitlines() if l.strip()]
    else:
        images = sorted(p for p in Path(args.images).iterdir() if p.name.endswith((".nii", ".nii.gz")))
        if args.label_suffix:
            images = [p for p in images if args.label_suffix not in p.name]
        cases = []
        for p in images:
            item = {"image": p.name}
            if args.label_suffix:
                stem = p.name.split(".nii")[0]
                stem = stem[: -len("_0000")] if stem.endswith("_0000") else stem
                lab = p.with_name(f"{stem}{args.label_suffix}.nii.gz")
                if lab.exists():
                    item["label"] = lab.name
            cases.append(item)
    manifest = split_folds(cases, args.k, args.seed)
    _dump(manifest.to_json(), args.out)
    log.info("fold sizes: %s", manifest.fold_sizes())
    return EXIT_OK


def cmd_normalize(args):
    vol = read_nifti(args.input, labels=False)
    write_nifti(normalize_ct(vol, IntensityWindow(*args.window)), args.output)
    return EXIT_OK


def cmd_resample(args):
    vol = read_nifti(args.input)
    mode = "nearest" if isinstance(vol, LabelMap) else args.mode
    write_nifti(resample(vol, args.spacing, mode), args.output)
    return EXIT_OK


def cmd_bbox(args):
    box = foreground_bbox(read_nifti(args.labels, labels=True), args.margin)
    _dump(box.to_dict(), args.out)
    return EXIT_OK


def cmd_crop(args):
    box = BoundingBox.from_dict(json.loads(Path(args.box).read_text()))
    write_nifti(crop(read_nifti(args.input), box), args.output)
    return EXIT_OK


def cmd_uncrop(args):
    box = BoundingBox.from_dict(json.loads(Path(args.box).read_text()))
    write_nifti(uncrop(read_nifti(args.input), box, args.fill), args.output)
    return EXIT_OK


def _predictor_from_arg(text, window, cmap):
    kind, _, rest = text.partition(":")
    if kind == "constant":
        return build_predictor({"type": "constant", "value": float(rest or 0.5)}, window, cmap)
    if kind == "oracle":
        return build_predictor({"type": "oracle"}, window, cmap, read_nifti(rest, labels=True))
    if kind == "threshold":
        return build_predictor({"type": "threshold"}, window, cmap)
    if kind == "subprocess":
        return build_predictor({"type": "subprocess", "command": rest}, window, cmap)
    raise ValueError(f"unknown predictor {text!r}")


def cmd_predict(args):
    cmap = _load_cmap(args.classes)
    vol = read_nifti(args.input, labels=False)
    predictor = _predictor_from_arg(args.predictor, args.window, cmap)
    spec = SlidingWindowSpec(args.window, args.overlap, args.blend, args.sigma_fraction)
    write_nifti(sliding_window_predict(vol, predictor, spec, args.workers), args.output)
    return EXIT_OK


def cmd_ensemble(args):
    man = json.loads(Path(args.manifest).read_text())
    root = Path(args.manifest).parent
    members = []
    for i, m in enumerate(man["members"]):
        prob = read_nifti(root / m["path"])
        if not isinstance(prob, MultiChannelProb):
            raise ValueError(f"{m['path']} is not a multi-channel probability map")
        members.append(EnsembleInput(str(m.get("id", i)), prob, float(m.get("weight", 1.0))))
    native_ref = args.native or man.get("native")
    native = read_nifti(root / native_ref if not args.native else native_ref).geometry
    write_nifti(ensemble_mean(members, native), args.output)
    return EXIT_OK


def cmd_decode(args):
    prob = read_nifti(args.input)
    if not isinstance(prob, MultiChannelProb):
        raise ValueError("decode expects a 4D probability map")
    threshold = args.threshold if len(args.threshold) > 1 else args.threshold[0]
    write_nifti(decode(prob, _load_cmap(args.classes), threshold), args.output)
    return EXIT_OK


def cmd_postprocess(args):
    labels = read_nifti(args.input, labels=True)
    labels = remove_small_components(labels, args.min_size)
    labels = fix_cyst_rim(labels, args.rim)
    write_nifti(labels, args.output)
    return EXIT_OK


def cmd_evaluate(args):
    pred = read_nifti(args.pred, labels=True)
    gt = read_nifti(args.gt, labels=True)
    scores = evaluate_case(pred, gt, _load_cmap(args.classes), args.tolerance)
    case_id = args.case_id or Path(args.pred).name.split(".nii")[0]
    _dump(scores.to_json(case_id), args.out)
    return EXIT_OK


def cmd_run(args):
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg.output_dir = Path(args.output_dir)
        if args.fold is not None:
            cfg.fold = args.fold
        summary = run_pipeline(cfg)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _dump(summary, cfg.output_dir / "summary.json")
    for case in summary["cases"]:
        line = {"case_id": case["case_id"], "status": case["status"]}
        if "error" in case:
            line["error"] = case["error"]
        if "scores" in case:
            line["average_dice"] = case["scores"]["average_dice"]
        print(json.dumps(line))
    return EXIT_FAIL if summary["num_failed"] else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="kitsseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write synthetic CT/label pairs")
    s.add_argument("--spec", help="PhantomSpec JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("split-folds", help="random k-fold dataset manifest")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of image NIfTIs")
    src.add_argument("--ids", help="text file, one case id per line")
    s.add_argument("--label-suffix", default="_seg", help="label file = <case><suffix>.nii.gz")
    s.add_argument("-k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split_folds)

    s = sub.add_parser("normalize", help="HU window rescale + sigmoid")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--window", type=float, nargs=2, default=(-54.0, 242.0), metavar=("LO", "HI"))
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("resample", help="resample to a voxel spacing")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--spacing", type=float, nargs=3, required=True)
    s.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("bbox", help="foreground bounding box of a label map")
    s.add_argument("labels")
    s.add_argument("--margin", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bbox)

    for name, fn, helptext in (("crop", cmd_crop, "crop to a bbox"), ("uncrop", cmd_uncrop, "paste back")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("input")
        s.add_argument("output")
        s.add_argument("--box", required=True, help="bbox JSON from `kitsseg bbox`")
        if name == "uncrop":
            s.add_argument("--fill", type=float, default=0)
        s.set_defaults(func=fn)

    s = sub.add_parser("predict", help="sliding-window inference")
    s.add_argument("input")
    s.add_argument("output", help="4D probability NIfTI")
    s.add_argument(
        "--predictor",
        required=True,
        help="constant[:VALUE] | oracle:LABELS.nii | threshold | subprocess:'CMD ARGS'",
    )
    s.add_argument("--window", type=int, nargs=3, default=(96, 96, 96))
    s.add_argument("--overlap", type=float, default=0.25)
    s.add_argument("--blend", choices=("constant", "gaussian"), default="gaussian")
    s.add_argument("--sigma-fraction", type=float, default=0.125)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--classes", help="YAML/JSON with class_names")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble", help="mean of probability maps on the native grid")
    s.add_argument("--manifest", required=True, help='{"native": ref, "members": [{"id", "path", "weight"}]}')
    s.add_argument("--native", help="reference NIfTI for the output grid")
    s.add_argument("output")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("decode", help="probabilities -> KiTS labels")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--threshold", type=float, nargs="+", default=[0.5])
    s.add_argument("--classes")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("postprocess", help="small-component removal + cyst-rim fix")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--min-size", type=int, default=100)
    s.add_argument("--rim", type=int, default=2)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("evaluate", help="dice / surface dice JSON")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--tolerance", type=float, default=1.0)
    s.add_argument("--case-id")
    s.add_argument("--classes")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="full pipeline from a YAML/JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.add_argument("--fold", type=int)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s: %s", args.command, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
