"""Command-line entry point: ``heartrefine <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 when the data is at
fault (unreadable file, inconsistent geometry, failed stage).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .io import VolumeFormatError, load_volume, save_volume
from .labels import (
    Annotation,
    Connectivity,
    extract_pav,
    fuse_predictions,
    largest_component_cleanup,
    lv_myo_reassign,
    parcellate_la_boxes,
    split_by_plane,
)
from .metrics import dice_report
from .phantom import PhantomError, generate_phantom, random_params
from .schema import SEVEN, SIX, TEN, get_schema
from .volume import FOVError, LabelVolume, preprocess

log = logging.getLogger("heartrefine")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use e.g. 128,192,192") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _connectivity(text: str) -> Connectivity:
    try:
        return Connectivity.parse(text)
    except (KeyError, ValueError):
        raise argparse.ArgumentTypeError(f"connectivity must be face6, edge18 or vertex26, got {text!r}") from None


def _schema_arg(text: str):
    try:
        return get_schema(text.upper())
    except (KeyError, ValueError):
        raise argparse.ArgumentTypeError(f"unknown schema {text!r}") from None


def _labels(path, schema=None) -> LabelVolume:
    return load_volume(path, "label", schema)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_preprocess(a):
    img = load_volume(a.image, "intensity")
    lab = _labels(a.labels, a.schema) if a.labels else None
    img2, lab2, spacing = preprocess(img, lab, a.target_dims, a.spacing)
    save_volume(img2, a.out_image)
    if lab2 is not None and a.out_labels:
        save_volume(lab2, a.out_labels)
    print(f"dims {'x'.join(map(str, img2.dims))} spacing {spacing:.6g}")


def cmd_refine_lv(a):
    img = load_volume(a.image, "intensity")
    lab = _labels(a.labels, a.schema)
    res = lv_myo_reassign(img, lab, a.max_iterations, a.connectivity)
    save_volume(res.labels, a.out)
    print(f"iterations {res.iterations_run} transferred {res.voxels_transferred}")


def cmd_extract_pav(a):
    lab = _labels(a.labels, a.schema)
    mask = extract_pav(lab, a.connectivity)
    out = LabelVolume(mask.astype(np.uint8), lab.spacing, lab.origin, schema=get_schema("SIX"))
    save_volume(out, a.out)
    print(f"pav voxels {int(mask.sum())}")


def cmd_split_plane(a):
    lab = _labels(a.labels, a.schema)
    ann = Annotation.load(a.annotation)
    if ann.plane is None:
        raise ValueError(f"{a.annotation}: no plane")
    target = lab.schema if a.far in lab.schema else SEVEN
    out = split_by_plane(lab, a.source, ann.plane, a.near, a.far, schema=target)
    save_volume(out, a.out)


def cmd_parcellate(a):
    lab = _labels(a.labels, a.schema)
    ann = Annotation.load(a.annotation)
    save_volume(parcellate_la_boxes(lab, ann.boxes), a.out)


def cmd_fuse(a):
    base = _labels(a.base, get_schema("SIX_NO_PA_REFINED"))
    ext = _labels(a.extrapolated, SEVEN) if a.extrapolated else None
    parc = _labels(a.parcellated, TEN) if a.parcellated else None
    save_volume(fuse_predictions(base, ext, parc), a.out)


def cmd_cleanup(a):
    from .pipeline import SINGLE_OBJECT_LABELS

    lab = _labels(a.labels, a.schema)
    names = a.only or [n for n in SINGLE_OBJECT_LABELS if n in lab.schema]
    save_volume(largest_component_cleanup(lab, names, a.connectivity), a.out)


def cmd_dice(a):
    if len(a.pred) != len(a.ref):
        raise UsageError("--pred and --ref must be given the same number of times")
    cases = [(_labels(p, a.schema), _labels(r, a.schema)) for p, r in zip(a.pred, a.ref)]
    for (p, r), name in zip(cases, a.pred):
        if p.schema is not r.schema:
            raise ValueError(f"{name}: schema {p.schema.variant.value} does not match "
                             f"reference {r.schema.variant.value}")
    schema = a.schema or cases[0][1].schema
    report = dice_report(cases, schema, [Path(p).name.split(".")[0] for p in a.pred])
    if a.format == "csv":
        sys.stdout.write(report.to_csv())
    elif report.n_cases == 1:
        (row,) = report.scores.values()
        for name, v in row.items():
            print(f"{name}\t{'n/a' if np.isnan(v) else f'{v:.3f}'}")
    else:
        sys.stdout.write(report.to_table())


def _dataset(path):
    from .pipeline import CaseRecord

    path = Path(path)
    obj = json.loads(path.read_text())
    cases = obj["cases"] if isinstance(obj, dict) else obj
    return [CaseRecord.from_json(c, path.parent) for c in cases]


def _ground_truth(record):
    from .pipeline import build_ground_truth

    img = record.load_intensity()
    if "SIX" in record.labels:
        six = record.load_labels("SIX")
    elif "TEN" in record.labels:
        ten = record.load_labels("TEN")
        six = LabelVolume(TEN.merge_to(SIX, ten.data), ten.spacing, ten.origin, schema=SIX)
    else:
        raise ValueError(f"case {record.case_id}: needs SIX or TEN labels")
    return img, build_ground_truth(img, six, record.load_annotation())


def cmd_train(a):
    from .pipeline import Stage, split_cases, stage_pair, train_stage
    from .unet import TrainParams, save_weights

    cfg = json.loads(Path(a.config).read_text())
    if "stage" not in cfg:
        raise UsageError(f"{a.config}: training config needs a 'stage'")
    stage = Stage(cfg["stage"])
    if a.seed is not None:
        cfg["seed"] = a.seed
    for key in ("lr", "steps"):
        if getattr(a, key) is not None:
            cfg[key] = getattr(a, key)
    hp = TrainParams.from_json(cfg)
    records = _dataset(a.cases)
    split = split_cases([r.case_id for r in records], cfg.get("split"), seed=hp.seed)
    by_id = {r.case_id: r for r in records}

    def pairs(ids):
        out = []
        for cid in ids:
            img, gt = _ground_truth(by_id[cid])
            out.append(stage_pair(stage, img, gt, la_dims=cfg.get("la_dims"),
                                  crop_fraction=cfg.get("crop_fraction", 0.0),
                                  with_intensity=cfg.get("with_intensity", False)))
        return out

    model = train_stage(stage, pairs(split[0]), hp, pairs(split[1]), pairs(split[2]),
                        width_scale=cfg.get("width_scale", 1),
                        with_intensity=cfg.get("with_intensity", False))
    model.weights.meta["split"] = {"train": split[0], "val": split[1], "test": split[2]}
    save_weights(model.weights, a.out)
    if a.report:
        Path(a.report).write_text(model.report.to_csv())
    print(f"loss {model.loss_history[0]:.5f} -> {model.loss_history[-1]:.5f}")
    sys.stdout.write(model.report.to_table())


def _models(specs):
    from .pipeline import Stage
    from .unet import load_weights

    models = {}
    for spec in specs:
        stage, sep, path = spec.partition("=")
        if not sep:
            path, stage = spec, None
        store = load_weights(path)
        stage = stage or store.meta.get("stage")
        if not stage:
            raise UsageError(f"{path}: stage unknown; pass STAGE=path")
        models[Stage(stage)] = store
    return models


def cmd_infer(a):
    from .pipeline import run_inference

    img = load_volume(a.image, "intensity")
    models = _models(a.model)
    stages = a.stages or (["UNET4"] if list(models) == ["UNET4"] else None)
    save_volume(run_inference(img, models, stages, la_dims=a.la_dims), a.out)


def cmd_pipeline(a):
    from .pipeline import run_manifest

    for prov in run_manifest(a.manifest, a.jobs):
        print(prov["output"])


def cmd_phantom(a):
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(a.count):
        seed = a.seed + i
        params = random_params(seed, a.dims, a.spacing, a.scale)
        ph = generate_phantom(params, f"phantom{seed:04d}")
        cid = ph.annotation.case_id
        ten = ph.labels
        six = LabelVolume(TEN.merge_to(SIX, ten.data), ten.spacing, ten.origin, schema=SIX)
        save_volume(ph.intensity, out / f"{cid}_image.nii.gz")
        save_volume(ten, out / f"{cid}_TEN.nii.gz")
        save_volume(six, out / f"{cid}_SIX.nii.gz")
        ph.annotation.save(out / f"{cid}_annotation.json")
        cases.append({
            "case_id": cid,
            "intensity": f"{cid}_image.nii.gz",
            "labels": {"TEN": f"{cid}_TEN.nii.gz", "SIX": f"{cid}_SIX.nii.gz"},
            "annotation": f"{cid}_annotation.json",
            "provenance": "phantom",
        })
    _write_json(out / "cases.json", {"cases": cases})
    print(f"{a.count} phantom(s) written to {out}")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heartrefine", description="Whole-heart label refinement tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def schema_opt(sp):
        sp.add_argument("--schema", type=_schema_arg, help="label schema (default: from file)")

    sp = cmd("preprocess", cmd_preprocess, "resample, centre and fit the field of view")
    sp.add_argument("--image", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out-image", required=True)
    sp.add_argument("--out-labels")
    sp.add_argument("--target-dims", type=_dims, default=(128, 192, 192))
    sp.add_argument("--spacing", type=_positive, default=1.0)
    schema_opt(sp)

    sp = cmd("refine-lv", cmd_refine_lv, "move mislabelled myocardium out of the LV")
    sp.add_argument("--image", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-iterations", type=int, default=3)
    sp.add_argument("--connectivity", type=_connectivity, default=Connectivity.FACE6)
    schema_opt(sp)

    sp = cmd("extract-pav", cmd_extract_pav, "write the RV/PA adjacency band as a mask")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--connectivity", type=_connectivity, default=Connectivity.FACE6)
    schema_opt(sp)

    sp = cmd("split-plane", cmd_split_plane, "split one label along the annotated plane")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--annotation", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--source", default="RV")
    sp.add_argument("--near", default="RV")
    sp.add_argument("--far", default="PA")
    schema_opt(sp)

    sp = cmd("parcellate", cmd_parcellate, "split LA into body, veins and appendage")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--annotation", required=True)
    sp.add_argument("--out", required=True)
    schema_opt(sp)

    sp = cmd("fuse", cmd_fuse, "combine stage predictions into the 10-label map")
    sp.add_argument("--base", required=True)
    sp.add_argument("--extrapolated")
    sp.add_argument("--parcellated")
    sp.add_argument("--out", required=True)

    sp = cmd("cleanup", cmd_cleanup, "keep the largest component of single-object labels")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--only", nargs="+", metavar="LABEL")
    sp.add_argument("--connectivity", type=_connectivity, default=Connectivity.VERTEX26)
    schema_opt(sp)

    sp = cmd("dice", cmd_dice, "per-label Dice between predictions and references")
    sp.add_argument("--pred", required=True, action="append")
    sp.add_argument("--ref", required=True, action="append")
    sp.add_argument("--format", choices=("csv", "table"), default="table")
    schema_opt(sp)

    sp = cmd("train", cmd_train, "train one stage network")
    sp.add_argument("--config", required=True, help="JSON {stage, width_scale, lr, steps, batch, seed}")
    sp.add_argument("--cases", required=True, help="dataset JSON (as written by 'phantom')")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--steps", type=int)

    sp = cmd("infer", cmd_infer, "segment one image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--model", required=True, action="append", metavar="[STAGE=]PATH")
    sp.add_argument("--stages", nargs="+")
    sp.add_argument("--la-dims", type=_dims)
    sp.add_argument("--out", required=True)

    sp = cmd("pipeline", cmd_pipeline, "run inference over a manifest of cases")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = cmd("phantom", cmd_phantom, "write synthetic cases")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--dims", type=_dims, default=(64, 80, 80))
    sp.add_argument("--spacing", type=_positive, default=2.0)
    sp.add_argument("--scale", type=_positive, default=1.0)
    return p


DATA_ERRORS = (ValueError, OSError, KeyError, RuntimeError, VolumeFormatError, FOVError, PhantomError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1 or getattr(args, "count", 1) < 1:
        print("heartrefine: error: --jobs and --count must be >= 1", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except UsageError as exc:
        print(f"heartrefine: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"heartrefine {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
