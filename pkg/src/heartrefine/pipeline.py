"""Multi-stage refinement: ground-truth construction, stage training and inference.

Stage flow::

    image --UNET1_NO_PA--> 6 labels --UNET2--> 7 labels (adds PA)
                              |
                              +--LA window--UNET3--> LA sublabels
    fuse(6, 7, sublabels) -> largest-component cleanup -> 10 labels

``UNET4`` maps the image straight to 10 labels.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import load_volume, save_volume
from .labels import (
    Annotation,
    fuse_predictions,
    largest_component_cleanup,
    lv_myo_reassign,
    one_hot_encode,
    parcellate_la_boxes,
    relabel,
    split_by_plane,
)
from .metrics import dice_all, dice_report
from .schema import LA_SUBLABELS, SEVEN, SIX, SIX_NO_PA_REFINED, TEN, LabelSchema, get_schema
from .unet import TrainParams, UNetConfig, WeightStore, load_weights, predict, train
from .volume import IntensityVolume, LabelVolume, _bbox, crop_or_pad, preprocess

__all__ = [
    "Stage",
    "StageSpec",
    "STAGES",
    "CaseRecord",
    "build_ground_truth",
    "simulate_fov_crop",
    "crop_line",
    "la_window_center",
    "paste_window",
    "normalize_intensity",
    "stage_pair",
    "split_cases",
    "train_stage",
    "StageModel",
    "run_inference",
    "run_manifest",
    "SINGLE_OBJECT_LABELS",
]

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    UNET1 = "UNET1"
    REFINE_LABELS = "REFINE_LABELS"
    UNET1_NO_PA = "UNET1_NO_PA"
    UNET2_EXTRAPOLATE = "UNET2_EXTRAPOLATE"
    UNET3_PARCELLATE = "UNET3_PARCELLATE"
    FUSE = "FUSE"
    UNET4 = "UNET4"


@dataclass(frozen=True)
class StageSpec:
    stage: Stage
    input_schema: LabelSchema | None  # None: the stage reads the image
    output_schema: LabelSchema | None  # None for UNET3, whose output is LA sublabels
    dims: tuple[int, int, int] | None
    network: bool

    def in_channels(self, with_intensity: bool = False) -> int:
        if self.stage is Stage.UNET3_PARCELLATE:
            return 2
        if self.input_schema is None:
            return 1
        return self.input_schema.n_channels + int(with_intensity)

    def out_channels(self) -> int:
        if self.stage is Stage.UNET3_PARCELLATE:
            return len(LA_SUBLABELS) + 1
        return self.output_schema.n_channels

    def config(self, width_scale=1, with_intensity: bool = False) -> UNetConfig:
        return UNetConfig(self.in_channels(with_intensity), self.out_channels(), width_scale=width_scale)


IMAGE_DIMS = (128, 192, 192)
LA_DIMS = (128, 128, 128)

STAGES = {
    Stage.UNET1: StageSpec(Stage.UNET1, None, SIX, IMAGE_DIMS, True),
    Stage.REFINE_LABELS: StageSpec(Stage.REFINE_LABELS, SIX, SIX_NO_PA_REFINED, None, False),
    Stage.UNET1_NO_PA: StageSpec(Stage.UNET1_NO_PA, None, SIX_NO_PA_REFINED, IMAGE_DIMS, True),
    Stage.UNET2_EXTRAPOLATE: StageSpec(Stage.UNET2_EXTRAPOLATE, SIX_NO_PA_REFINED, SEVEN, IMAGE_DIMS, True),
    Stage.UNET3_PARCELLATE: StageSpec(Stage.UNET3_PARCELLATE, SIX_NO_PA_REFINED, None, LA_DIMS, True),
    Stage.FUSE: StageSpec(Stage.FUSE, SEVEN, TEN, None, False),
    Stage.UNET4: StageSpec(Stage.UNET4, None, TEN, IMAGE_DIMS, True),
}

# structures expected to be a single object; vein labels may hold several vessels
SINGLE_OBJECT_LABELS = ("LV", "LVMyo", "RV", "RA", "AA", "PA", "LAbody", "LAA")

_SUB_TO_TEN = np.array([0] + [TEN.id_of(n) for n in LA_SUBLABELS], dtype=np.uint8)
_TEN_TO_SUB = np.zeros(TEN.n_channels, dtype=np.uint8)
_TEN_TO_SUB[_SUB_TO_TEN[1:]] = np.arange(1, len(LA_SUBLABELS) + 1)


@dataclass
class CaseRecord:
    """On-disk description of one case."""

    case_id: str
    intensity: str
    labels: dict[str, str] = field(default_factory=dict)  # schema variant -> path
    annotation: str | None = None
    provenance: str = "external"
    group: str | None = None

    @classmethod
    def from_json(cls, d: dict, base: Path | None = None) -> CaseRecord:
        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str(base / p)

        return cls(
            case_id=str(d["case_id"]),
            intensity=resolve(d["intensity"]),
            labels={k: resolve(v) for k, v in d.get("labels", {}).items()},
            annotation=resolve(d.get("annotation")),
            provenance=d.get("provenance", "external"),
            group=d.get("group"),
        )

    def load_intensity(self) -> IntensityVolume:
        return load_volume(self.intensity, "intensity")

    def load_labels(self, variant: str) -> LabelVolume:
        return load_volume(self.labels[variant], "label", get_schema(variant))

    def load_annotation(self) -> Annotation:
        if not self.annotation:
            raise ValueError(f"case {self.case_id}: no annotation file")
        return Annotation.load(self.annotation)


# ---------------------------------------------------------------- ground truth


def build_ground_truth(intensity: IntensityVolume, initial: LabelVolume,
                       annotation: Annotation | None) -> dict[str, LabelVolume]:
    """Refined label maps for every stage from an initial 6-label map.

    Corrects the LV/LVMyo boundary, splits RV into RV and PA along the
    annotated valve plane, and parcellates the LA with the annotated boxes.
    Returns maps keyed ``SIX_NO_PA_REFINED``, ``SEVEN`` and ``TEN``.
    """
    if annotation is None:
        raise ValueError("build_ground_truth needs an annotation (plane and boxes)")
    if initial.schema.names != SIX.names:
        raise ValueError(f"initial labels must be 6-label, got {initial.schema.variant.value}")
    refined = lv_myo_reassign(intensity, initial).labels
    if annotation.plane is not None and refined.count("RV"):
        seven = split_by_plane(refined, "RV", annotation.plane, "RV", "PA", schema=SEVEN)
    else:
        seven = LabelVolume(relabel(refined, SEVEN), refined.spacing, refined.origin, schema=SEVEN)
    no_pa = LabelVolume(
        relabel(seven, SIX_NO_PA_REFINED, {"PA": None}), seven.spacing, seven.origin,
        schema=SIX_NO_PA_REFINED,
    )
    ten = parcellate_la_boxes(seven, annotation.boxes)
    return {"SIX_NO_PA_REFINED": no_pa, "SEVEN": seven, "TEN": ten}


def simulate_fov_crop(intensity: IntensityVolume, labels: LabelVolume | None, fraction: float,
                      fill: float = 0.0):
    """Blank the superior-most ``fraction`` of slices (highest z indices)."""
    if not 0 <= fraction < 0.5:
        raise ValueError("fraction must be in [0, 0.5)")
    n = int(round(intensity.dims[0] * fraction))
    if n == 0:
        return intensity, labels
    img = np.array(intensity.data)
    img[-n:] = fill
    out_img = intensity.with_data(img)
    if labels is None:
        return out_img, None
    lab = np.array(labels.data)
    lab[-n:] = 0
    return out_img, labels.with_data(lab)


def crop_line(dims_z: int, fraction: float) -> int:
    """First blanked slice index for :func:`simulate_fov_crop`."""
    return dims_z - int(round(dims_z * fraction))


# ------------------------------------------------------------ stage datasets


def normalize_intensity(vol: IntensityVolume) -> np.ndarray:
    """Per-volume z-score, float32."""
    x = np.asarray(vol.data, dtype=np.float64)
    sd = x.std()
    return ((x - x.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)


def la_window_center(labels: LabelVolume) -> tuple[int, int, int] | None:
    la_id = labels.schema.id_of("LA") if "LA" in labels.schema else None
    if la_id is None:
        m = np.isin(labels.data, _SUB_TO_TEN[1:])
    else:
        m = labels.data == la_id
    box = _bbox(m)
    if box is None:
        return None
    lo, hi = box
    return tuple((a + b + 1) // 2 for a, b in zip(lo, hi))


def paste_window(window: np.ndarray, dims: Sequence[int], center: Sequence[int]) -> np.ndarray:
    """Place a window cut by ``crop_or_pad(vol, window.shape, center)`` back into ``dims``."""
    # window index j came from volume index center - w // 2 + j
    inv = tuple(w // 2 + n // 2 - c for w, n, c in zip(window.shape, dims, center))
    return crop_or_pad(LabelVolume(window, schema=TEN), dims, inv).data


def _la_input(base: LabelVolume, dims, center) -> np.ndarray:
    win = crop_or_pad(base, dims, center)
    la = (win.data == base.schema.id_of("LA")).astype(np.float32)
    return np.stack([1.0 - la, la])


def stage_pair(stage: Stage | str, intensity: IntensityVolume | None, gt: dict[str, LabelVolume],
               la_dims: Sequence[int] | None = None, crop_fraction: float = 0.0,
               with_intensity: bool = False):
    """(input grid, target indices) for training ``stage`` on one case.

    ``gt`` holds the ground truths from :func:`build_ground_truth`.  For
    ``UNET2_EXTRAPOLATE`` a non-zero ``crop_fraction`` blanks the top of the
    input while the target keeps the full PA.
    """
    stage = Stage(stage)
    if stage in (Stage.UNET1, Stage.UNET1_NO_PA, Stage.UNET4):
        key = {Stage.UNET1: "SIX", Stage.UNET1_NO_PA: "SIX_NO_PA_REFINED", Stage.UNET4: "TEN"}[stage]
        target = gt[key] if key in gt else gt["SIX_NO_PA_REFINED"]
        return normalize_intensity(intensity)[None], np.asarray(target.data, dtype=np.int64)
    if stage is Stage.UNET2_EXTRAPOLATE:
        base = gt["SIX_NO_PA_REFINED"]
        img = intensity
        if crop_fraction:
            img, base = simulate_fov_crop(intensity, base, crop_fraction)
        target = relabel(base, SEVEN)
        target[gt["SEVEN"].mask("PA")] = SEVEN.id_of("PA")
        x = one_hot_encode(base)
        if with_intensity:
            x = np.concatenate([x, normalize_intensity(img)[None]])
        return x, target.astype(np.int64)
    if stage is Stage.UNET3_PARCELLATE:
        base = gt["SIX_NO_PA_REFINED"]
        dims = tuple(la_dims or LA_DIMS)
        center = la_window_center(base)
        if center is None:
            raise ValueError("case has no LA label")
        x = _la_input(base, dims, center)
        ten = crop_or_pad(gt["TEN"], dims, center)
        return x, _TEN_TO_SUB[ten.data].astype(np.int64)
    raise ValueError(f"stage {stage.value} has no network")


def split_cases(case_ids: Sequence[str], sizes: Sequence[int] | None = None,
                ratios=(200, 30, 30), seed: int = 0):
    """Deterministic train/validation/test partition.

    Without explicit ``sizes`` the ratios are scaled to the number of cases.
    """
    ids = list(case_ids)
    n = len(ids)
    if sizes is None:
        total = sum(ratios)
        n_val = int(round(n * ratios[1] / total))
        n_test = int(round(n * ratios[2] / total))
        sizes = (n - n_val - n_test, n_val, n_test)
    if sum(sizes) != n:
        raise ValueError(f"split sizes {tuple(sizes)} do not add up to {n} cases")
    if sizes[0] < 1:
        raise ValueError("training split is empty")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


@dataclass
class StageModel:
    stage: Stage
    weights: WeightStore
    loss_history: list[float]
    report: object | None = None
    best_step: int | None = None


def _decode_target(stage: Stage, target: np.ndarray) -> tuple[np.ndarray, LabelSchema]:
    if stage is Stage.UNET3_PARCELLATE:
        return _SUB_TO_TEN[target], TEN
    return target, STAGES[stage].output_schema


def train_stage(stage: Stage | str, train_pairs, hp: TrainParams, val_pairs=(), test_pairs=(),
                width_scale=1, with_intensity: bool = False) -> StageModel:
    """Train one stage's network on prepared (input, target) pairs.

    Validation pairs drive best-loss checkpoint selection; test pairs (or the
    training pairs, if no test split is given) are scored into a Dice report.
    """
    stage = Stage(stage)
    spec = STAGES[stage]
    if not spec.network:
        raise ValueError(f"stage {stage.value} is not a network stage")
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("training split is empty")
    cfg = spec.config(width_scale, with_intensity)
    if hp.val_every == 0 and val_pairs:
        hp = TrainParams(**{**hp.__dict__, "val_every": max(1, hp.steps // 10)})
    result = train(cfg, train_pairs, hp, val_dataset=list(val_pairs) or None)
    result.weights.meta.update({"stage": stage.value, "with_intensity": with_intensity})
    scored = list(test_pairs) or train_pairs
    cases = []
    for x, y in scored:
        pred = np.argmax(predict(result.weights, x), axis=0)
        p, schema = _decode_target(stage, pred)
        t, _ = _decode_target(stage, y)
        cases.append((p, t))
    report = dice_report(cases, schema)
    return StageModel(stage, result.weights, result.loss_history, report, result.best_step)


# ------------------------------------------------------------------ inference


def _run_net(store: WeightStore, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict(store, x), axis=0).astype(np.uint8)


def run_inference(intensity: IntensityVolume, models: dict, stages: Sequence[str | Stage] | None = None,
                  la_dims: Sequence[int] | None = None, cleanup: bool = True,
                  trace: dict | None = None) -> LabelVolume:
    """Segment one preprocessed image into the 10-label schema.

    ``models`` maps stage names to :class:`WeightStore`.  ``stages`` picks
    the path: the default multi-stage flow, or ``["UNET4"]``.  Leaving out
    UNET2 or UNET3 yields an empty PA or an all-LAbody atrium respectively.
    ``trace`` (if given) collects intermediate maps.
    """
    models = {Stage(k): v for k, v in models.items()}
    if stages is None:
        stages = [Stage.UNET1_NO_PA, Stage.UNET2_EXTRAPOLATE, Stage.UNET3_PARCELLATE, Stage.FUSE]
    stages = [Stage(s) for s in stages]
    for s in stages:
        if STAGES[s].network and s not in models:
            raise ValueError(f"no model loaded for stage {s.value}")

    def geom(data, schema):
        return LabelVolume(data, intensity.spacing, intensity.origin, schema=schema)

    def step(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise RuntimeError(f"stage {name} failed: {exc}") from exc

    if Stage.UNET4 in stages:
        x = normalize_intensity(intensity)[None]
        out = step("UNET4", lambda: geom(_run_net(models[Stage.UNET4], x), TEN))
    else:
        first = Stage.UNET1_NO_PA if Stage.UNET1_NO_PA in stages else Stage.UNET1
        if first not in stages:
            raise ValueError("stage list needs UNET1_NO_PA (or UNET1) or UNET4")
        x = normalize_intensity(intensity)[None]
        base = step(first.value, lambda: geom(_run_net(models[first], x), SIX_NO_PA_REFINED))
        extrap = None
        if Stage.UNET2_EXTRAPOLATE in stages:
            store = models[Stage.UNET2_EXTRAPOLATE]

            def unet2():
                inp = one_hot_encode(base)
                if store.meta.get("with_intensity"):
                    inp = np.concatenate([inp, normalize_intensity(intensity)[None]])
                return geom(_run_net(store, inp), SEVEN)

            extrap = step("UNET2_EXTRAPOLATE", unet2)
        parc = None
        if Stage.UNET3_PARCELLATE in stages:

            def unet3():
                center = la_window_center(base)
                if center is None:
                    return None
                dims = tuple(la_dims or LA_DIMS)
                sub = _run_net(models[Stage.UNET3_PARCELLATE], _la_input(base, dims, center))
                return geom(paste_window(_SUB_TO_TEN[sub], base.dims, center), TEN)

            parc = step("UNET3_PARCELLATE", unet3)
        out = step("FUSE", lambda: fuse_predictions(base, extrap, parc))
        if trace is not None:
            trace.update({"base": base, "extrapolated": extrap, "parcellated": parc, "fused": out})
    if cleanup:
        out = largest_component_cleanup(out, SINGLE_OBJECT_LABELS)
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _process_case(record: CaseRecord, stages, model_paths: dict, out_dir: str, options: dict) -> dict:
    models = {k: load_weights(v) for k, v in model_paths.items()}
    img = record.load_intensity()
    if options.get("preprocess"):
        img, _, _ = preprocess(img, None, tuple(options.get("target_dims", IMAGE_DIMS)))
    result = run_inference(img, models, stages, la_dims=options.get("la_dims"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seg_path = out / f"{record.case_id}_TEN.nii.gz"
    save_volume(result, seg_path)
    prov = {
        "case_id": record.case_id,
        "stages": [Stage(s).value for s in stages] if stages else None,
        "models": {Stage(k).value: {"path": str(v), "sha256": _sha256(v)} for k, v in model_paths.items()},
        "output": str(seg_path),
        "provenance": record.provenance,
    }
    if "TEN" in record.labels:
        ref = record.load_labels("TEN")
        if ref.dims == result.dims:
            prov["dice"] = dice_all(result, ref, TEN)
    (out / f"{record.case_id}_provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
    return prov


def run_manifest(manifest_path, jobs: int = 1) -> list[dict]:
    """Run inference for every case listed in a pipeline manifest.

    Manifest JSON::

        {"stages": [...], "models": {stage: path}, "cases": [CaseRecord...],
         "output_dir": path, "options": {...}}

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    resolve = lambda p: str(p if Path(p).is_absolute() else base / p)  # noqa: E731
    stages = m.get("stages")
    model_paths = {Stage(k).value: resolve(v) for k, v in m.get("models", {}).items()}
    out_dir = resolve(m.get("output_dir", "out"))
    options = m.get("options", {})
    records = [CaseRecord.from_json(c, base) for c in m["cases"]]
    if jobs > 1 and len(records) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_process_case, r, stages, model_paths, out_dir, options) for r in records]
            return [f.result() for f in futures]
    return [_process_case(r, stages, model_paths, out_dir, options) for r in records]
