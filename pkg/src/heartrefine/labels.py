"""Deterministic label-map algorithms used to refine a cardiac segmentation.

Everything here is a pure function of its inputs.  Masks are plain boolean
numpy arrays in (z, y, x) order; label maps are :class:`LabelVolume`.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .schema import LA_SUBLABELS, SEVEN, SIX_NO_PA_REFINED, TEN, LabelSchema
from .volume import IntensityVolume, LabelVolume

__all__ = [
    "Connectivity",
    "Plane",
    "CropBox",
    "Annotation",
    "neighbor_offsets",
    "dilate",
    "lv_myo_reassign",
    "extract_pav",
    "split_by_plane",
    "connected_components",
    "largest_component_cleanup",
    "parcellate_la_boxes",
    "fuse_predictions",
    "one_hot_encode",
    "argmax_decode",
    "relabel",
]


class Connectivity(enum.IntEnum):
    """Neighbourhoods by the largest number of coordinates allowed to differ."""

    FACE6 = 1
    EDGE18 = 2
    VERTEX26 = 3

    @classmethod
    def parse(cls, value) -> Connectivity:
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.upper()
            aliases = {"6": "FACE6", "18": "EDGE18", "26": "VERTEX26"}
            return cls[aliases.get(key, key)]
        value = int(value)
        if value in (1, 2, 3):
            return cls(value)
        return {6: cls.FACE6, 18: cls.EDGE18, 26: cls.VERTEX26}[value]

    def structure(self) -> np.ndarray:
        return ndimage.generate_binary_structure(3, int(self))


def neighbor_offsets(connectivity) -> list[tuple[int, int, int]]:
    rank = int(Connectivity.parse(connectivity))
    return [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if 0 < abs(dz) + abs(dy) + abs(dx) <= rank
    ]


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(v) for v in n / norm))
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))

    def signed_distance(self, coords: np.ndarray) -> np.ndarray:
        # elementwise on purpose: the result must not depend on array size or BLAS path
        c = np.asarray(coords, dtype=np.float64)
        p, n = self.point, self.normal
        return (c[..., 0] - p[0]) * n[0] + (c[..., 1] - p[1]) * n[1] + (c[..., 2] - p[2]) * n[2]

    def flipped(self) -> Plane:
        return Plane(self.point, tuple(-v for v in self.normal))


@dataclass(frozen=True)
class CropBox:
    """Half-open voxel ranges ``[z0, z1) x [y0, y1) x [x0, x1)`` and a target sublabel."""

    ranges: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    label: str

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        if len(ranges) != 3 or any(a >= b or a < 0 for a, b in ranges):
            raise ValueError(f"crop box ranges must be non-empty and non-negative: {ranges}")
        object.__setattr__(self, "ranges", ranges)

    def slices(self, dims: Sequence[int]) -> tuple[slice, slice, slice]:
        for (a, b), n in zip(self.ranges, dims):
            if b > n:
                raise ValueError(f"crop box {self.ranges} exceeds volume dims {tuple(dims)}")
        return tuple(slice(a, b) for a, b in self.ranges)


@dataclass(frozen=True)
class Annotation:
    """Per-case landmarks: the valve plane and the LA parcellation boxes."""

    case_id: str
    plane: Plane | None
    boxes: tuple[CropBox, ...] = ()

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "plane": None
            if self.plane is None
            else {"point": list(self.plane.point), "normal": list(self.plane.normal)},
            "boxes": [{"range": [list(r) for r in b.ranges], "label": b.label} for b in self.boxes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> Annotation:
        plane = obj.get("plane")
        return cls(
            case_id=str(obj.get("case_id", "")),
            plane=None if plane is None else Plane(tuple(plane["point"]), tuple(plane["normal"])),
            boxes=tuple(CropBox(tuple(map(tuple, b["range"])), _box_label(b["label"])) for b in obj.get("boxes", ())),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> Annotation:
        return cls.from_json(json.loads(Path(path).read_text()))


def _box_label(label) -> str:
    if isinstance(label, int):
        return TEN.name_of(label)
    return str(label)


def dilate(mask: np.ndarray, connectivity=Connectivity.FACE6, iterations: int = 1) -> np.ndarray:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(
        mask, structure=Connectivity.parse(connectivity).structure(), iterations=iterations
    )


@dataclass(frozen=True)
class ReassignResult:
    labels: LabelVolume
    iterations_run: int
    voxels_transferred: int

    def __iter__(self):
        return iter((self.labels, self.iterations_run, self.voxels_transferred))


def lv_myo_reassign(
    intensity: IntensityVolume,
    labels: LabelVolume,
    max_iterations: int = 3,
    connectivity=Connectivity.FACE6,
) -> ReassignResult:
    """Move over-segmented LV cavity voxels back into the myocardium.

    Each round dilates the current LVMyo mask by one voxel and looks at its
    overlap with the LV.  If the overlap's mean intensity is nearer the
    current LVMyo mean than the current LV mean, overlap voxels darker than
    (mean + std) of the *original* LVMyo are relabelled LVMyo.  The loop
    stops on an empty overlap, a failed mean test, or after
    ``max_iterations`` rounds.
    """
    if not intensity.same_geometry(labels):
        raise ValueError("intensity and labels differ in geometry")
    lv_id, myo_id = labels.schema.id_of("LV"), labels.schema.id_of("LVMyo")
    img = np.asarray(intensity.data, dtype=np.float64)
    data = np.array(labels.data)
    myo = data == myo_id
    if not myo.any():
        raise ValueError("LVMyo label is empty; cannot compute myocardial statistics")
    threshold = img[myo].mean() + img[myo].std()

    transferred = 0
    rounds = 0
    for _ in range(max_iterations):
        rounds += 1
        lv = data == lv_id
        overlap = dilate(myo, connectivity, 1) & lv
        if not overlap.any():
            break
        mu_overlap = img[overlap].mean()
        mu_myo = img[myo].mean()
        mu_lv = img[lv].mean()
        if not abs(mu_overlap - mu_myo) < abs(mu_overlap - mu_lv):
            break
        move = overlap & (img < threshold)
        n = int(np.count_nonzero(move))
        data[move] = myo_id
        myo |= move
        transferred += n
    return ReassignResult(labels.with_data(data), rounds, transferred)


def _shifted_neighbor_any(mask: np.ndarray, connectivity) -> np.ndarray:
    """Voxels with at least one ``mask`` voxel among their neighbours."""
    return ndimage.binary_dilation(mask, structure=_punctured(connectivity))


def _punctured(connectivity) -> np.ndarray:
    s = Connectivity.parse(connectivity).structure().copy()
    s[1, 1, 1] = False
    return s


def extract_pav(labels: LabelVolume, connectivity=Connectivity.FACE6,
                first: str = "RV", second: str = "PA") -> np.ndarray:
    """Valve band: RV voxels touching PA plus PA voxels touching RV."""
    a = labels.mask(first)
    b = labels.mask(second)
    if not a.any() or not b.any():
        return np.zeros(labels.dims, dtype=bool)
    return (a & _shifted_neighbor_any(b, connectivity)) | (b & _shifted_neighbor_any(a, connectivity))


def split_by_plane(labels: LabelVolume, source: str, plane: Plane, near: str, far: str,
                   schema: LabelSchema | None = None) -> LabelVolume:
    """Relabel ``source`` voxels by side of ``plane``.

    Voxel centres with a non-negative signed distance along the normal go to
    ``far``, the rest to ``near``.  Output uses ``schema`` (default: the input
    schema); every non-source label keeps its name.
    """
    src_mask = labels.mask(source)
    if not src_mask.any():
        raise ValueError(f"source label {source!r} is absent")
    out_schema = schema or labels.schema
    data = relabel(labels, out_schema).astype(np.uint8)
    idx = np.nonzero(src_mask)
    coords = np.stack(
        [labels.origin[a] + labels.spacing[a] * idx[a] for a in range(3)], axis=-1
    )
    side = plane.signed_distance(coords) >= 0
    data[idx] = np.where(side, out_schema.id_of(far), out_schema.id_of(near))
    return LabelVolume(data, labels.spacing, labels.origin, schema=out_schema)


def relabel(labels: LabelVolume, schema: LabelSchema, missing: dict | None = None) -> np.ndarray:
    """Translate IDs into ``schema`` by label name.

    Names absent from ``schema`` must be routed through ``missing``
    (name -> target name, or None for background).
    """
    missing = missing or {}
    lut = np.zeros(labels.schema.n_channels, dtype=np.uint8)
    for label_id, name in labels.schema.entries():
        target = name if name in schema else missing.get(name, KeyError)
        if target is KeyError:
            raise ValueError(f"label {name!r} has no counterpart in {schema.variant.value}")
        lut[label_id] = 0 if target is None else schema.id_of(target)
    return lut[labels.data]


@dataclass(frozen=True)
class Components:
    labels: np.ndarray  # int32 component id per voxel, 0 outside the mask
    sizes: np.ndarray  # sizes[i - 1] is the size of component i

    @property
    def count(self) -> int:
        return len(self.sizes)

    def __iter__(self):
        return iter((self.labels, self.sizes))


def connected_components(mask: np.ndarray, connectivity=Connectivity.VERTEX26) -> Components:
    """Label connected regions; ID 1 is the largest.

    Equal sizes are ordered by the smallest linear index of any voxel in the
    component.
    """
    mask = np.asarray(mask, dtype=bool)
    raw, n = ndimage.label(mask, structure=Connectivity.parse(connectivity).structure())
    if n == 0:
        return Components(np.zeros(mask.shape, dtype=np.int32), np.zeros(0, dtype=np.int64))
    flat = raw.ravel()
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    ids, first = np.unique(flat, return_index=True)
    first_index = first[ids > 0]
    order = np.lexsort((first_index, -sizes))
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return Components(remap[raw], sizes[order])


def largest_component_cleanup(labels: LabelVolume, ids_to_clean: Iterable, connectivity=Connectivity.VERTEX26) -> LabelVolume:
    """Keep only the largest connected piece of each listed label."""
    data = np.array(labels.data)
    for label in ids_to_clean:
        label_id = labels.schema.id_of(label) if isinstance(label, str) else int(label)
        m = data == label_id
        if not m.any():
            continue
        comp = connected_components(m, connectivity)
        if comp.count > 1:
            data[m & (comp.labels != 1)] = 0
    return labels.with_data(data)


def parcellate_la_boxes(labels: LabelVolume, boxes: Sequence[CropBox]) -> LabelVolume:
    """Split the LA into body, veins and appendage using crop boxes.

    LA voxels inside a box take its sublabel, later boxes overriding earlier
    ones; LA voxels outside every box become ``LAbody``.  Returns a TEN map.
    """
    la = labels.mask("LA")
    data = relabel(labels, TEN, {"LA": "LAbody"})
    for box in boxes:
        if box.label not in LA_SUBLABELS:
            raise ValueError(f"crop box targets {box.label!r}, not an LA sublabel")
        sl = box.slices(labels.dims)
        region = np.zeros(labels.dims, dtype=bool)
        region[sl] = True
        data[la & region] = TEN.id_of(box.label)
    return LabelVolume(data, labels.spacing, labels.origin, schema=TEN)


def fuse_predictions(base: LabelVolume, extrapolated: LabelVolume | None,
                     parcellated: LabelVolume | None) -> LabelVolume:
    """Combine the refined 6-label map with the PA and LA-sublabel predictions.

    PA from ``extrapolated`` is written only over base RV or background.
    Base LA voxels take the sublabel ``parcellated`` assigns them, falling
    back to ``LAbody``.  Either auxiliary prediction may be None.
    """
    if base.schema.names != SIX_NO_PA_REFINED.names:
        raise ValueError(f"base must be a 6-label map, got {base.schema.variant.value}")
    for other, want in ((extrapolated, SEVEN), (parcellated, TEN)):
        if other is None:
            continue
        if other.schema.variant != want.variant:
            raise ValueError(f"expected {want.variant.value} labels, got {other.schema.variant.value}")
        if not other.same_geometry(base):
            raise ValueError("fusion inputs differ in geometry")

    data = relabel(base, TEN, {"LA": "LAbody"})
    la = base.mask("LA")
    if parcellated is not None:
        sub = parcellated.data
        sub_ok = np.isin(sub, [TEN.id_of(n) for n in LA_SUBLABELS])
        take = la & sub_ok
        data[take] = sub[take]
    if extrapolated is not None:
        pa = extrapolated.mask("PA")
        open_ = (base.data == 0) | base.mask("RV")
        data[pa & open_] = TEN.id_of("PA")
    return LabelVolume(data, base.spacing, base.origin, schema=TEN)


def one_hot_encode(labels: LabelVolume, schema: LabelSchema | None = None, dtype=np.float32) -> np.ndarray:
    """(channels, z, y, x) indicator grid; channel 0 is background."""
    schema = schema or labels.schema
    schema.validate(labels.data)
    out = np.zeros((schema.n_channels,) + labels.dims, dtype=dtype)
    np.put_along_axis(out, labels.data[None].astype(np.intp), 1, axis=0)
    return out


def argmax_decode(logits: np.ndarray, schema: LabelSchema, like=None) -> LabelVolume:
    """Per-voxel argmax over axis 0 (ties go to the lowest channel).

    ``like`` supplies spacing and origin; otherwise unit spacing at the origin.
    """
    logits = np.asarray(logits)
    if logits.ndim == 5:
        if logits.shape[0] != 1:
            raise ValueError("argmax_decode takes one case at a time")
        logits = logits[0]
    if logits.shape[0] < 1:
        raise ValueError("need at least one channel")
    data = np.argmax(logits, axis=0).astype(np.uint8)
    if like is None:
        return LabelVolume(data, schema=schema)
    return LabelVolume(data, like.spacing, like.origin, schema=schema)
