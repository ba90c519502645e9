"""Procedural heart phantoms with a known 10-label ground truth.

Geometry lives in millimetres relative to a heart centre, with z superior,
y posterior and x towards the patient's left.  Chambers are ellipsoids and
vessels are straight cylinders.  Two structures are built so that the label
algorithms can reproduce them exactly:

* the RV ellipsoid is clipped to the near side of the valve plane and the PA
  cylinder starts on that plane, so splitting RV+PA by the plane recovers PA;
* the LA sublabels are *defined* by the recorded crop boxes, so re-applying
  the boxes to the merged LA recovers them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .labels import Annotation, Connectivity, CropBox, Plane, dilate
from .schema import TEN
from .volume import IntensityVolume, LabelVolume

__all__ = [
    "Ellipsoid",
    "Tube",
    "PhantomParams",
    "Phantom",
    "PhantomError",
    "generate_phantom",
    "random_params",
    "degrade_labels",
    "DEFAULT_MEANS",
]


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def mask(self, coords: np.ndarray, grow: float = 0.0) -> np.ndarray:
        r = np.asarray(self.radii, dtype=np.float64) + grow
        q = (coords - np.asarray(self.center)) / r
        return (q * q).sum(axis=-1) <= 1.0

    def bounds(self, grow: float = 0.0):
        c, r = np.asarray(self.center), np.asarray(self.radii) + grow
        return c - r, c + r


@dataclass(frozen=True)
class Tube:
    start: tuple[float, float, float]
    direction: tuple[float, float, float]
    length: float
    radius: float

    @property
    def unit(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        return d / np.linalg.norm(d)

    def mask(self, coords: np.ndarray) -> np.ndarray:
        d = self.unit
        rel = coords - np.asarray(self.start)
        t = rel[..., 0] * d[0] + rel[..., 1] * d[1] + rel[..., 2] * d[2]
        radial = rel - t[..., None] * d
        return (t >= 0) & (t <= self.length) & ((radial * radial).sum(axis=-1) <= self.radius**2)

    def bounds(self):
        a = np.asarray(self.start, dtype=np.float64)
        b = a + self.length * self.unit
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


# mean attenuation per TEN structure and for background; blood pools bright,
# myocardium dark, roughly in the spirit of contrast CT
DEFAULT_MEANS = {
    "background": 0.0,
    "LV": 420.0,
    "LVMyo": 120.0,
    "RV": 370.0,
    "RA": 340.0,
    "AA": 460.0,
    "PA": 390.0,
    "LAbody": 400.0,
    "LPV": 400.0,
    "RPV": 400.0,
    "LAA": 400.0,
}


@dataclass(frozen=True)
class PhantomParams:
    """Everything needed to rasterize one phantom.

    ``offset`` places the heart centre relative to the volume centre.
    """

    seed: int = 0
    dims: tuple[int, int, int] = (64, 80, 80)
    spacing: float = 2.0
    offset: tuple[float, float, float] = (-7.0, -10.0, -2.0)
    lv: Ellipsoid = Ellipsoid((-12.0, 0.0, 14.0), (26.0, 18.0, 18.0))
    myo_thickness: float = 8.0
    rv: Ellipsoid = Ellipsoid((-10.0, -6.0, -26.0), (24.0, 16.0, 13.0))
    la: Ellipsoid = Ellipsoid((14.0, 36.0, 8.0), (14.0, 13.0, 18.0))
    ra: Ellipsoid = Ellipsoid((8.0, 22.0, -32.0), (16.0, 13.0, 13.0))
    aa: Tube = Tube((26.0, 6.0, 4.0), (1.0, 0.1, -0.05), 36.0, 11.0)
    valve_point: tuple[float, float, float] = (4.0, -7.0, -27.0)
    valve_normal: tuple[float, float, float] = (0.85, -0.45, 0.27)
    pa_radius: float = 8.0
    pa_length: float = 58.0
    lpv: tuple[Tube, ...] = (
        Tube((20.0, 38.0, 16.0), (0.1, 0.5, 1.0), 32.0, 5.0),
        Tube((8.0, 40.0, 16.0), (-0.1, 0.5, 1.0), 32.0, 5.0),
    )
    rpv: tuple[Tube, ...] = (
        Tube((20.0, 38.0, 0.0), (0.1, 0.5, -1.0), 30.0, 5.0),
        Tube((8.0, 40.0, 0.0), (-0.1, 0.5, -1.0), 30.0, 5.0),
    )
    laa: Ellipsoid = Ellipsoid((18.0, 24.0, 21.0), (7.0, 7.0, 9.0))
    means: dict = field(default_factory=lambda: dict(DEFAULT_MEANS))
    noise_std: float = 25.0

    def with_grid(self, dims: Sequence[int], spacing: float) -> PhantomParams:
        return replace(self, dims=tuple(int(d) for d in dims), spacing=float(spacing))

    def scaled(self, factor: float) -> PhantomParams:
        """Same anatomy, every length multiplied by ``factor``."""
        def e(x: Ellipsoid) -> Ellipsoid:
            return Ellipsoid(_mul(x.center, factor), _mul(x.radii, factor))

        def t(x: Tube) -> Tube:
            return Tube(_mul(x.start, factor), x.direction, x.length * factor, x.radius * factor)

        return replace(
            self,
            lv=e(self.lv), rv=e(self.rv), la=e(self.la), ra=e(self.ra), laa=e(self.laa),
            aa=t(self.aa), lpv=tuple(map(t, self.lpv)), rpv=tuple(map(t, self.rpv)),
            myo_thickness=self.myo_thickness * factor,
            valve_point=_mul(self.valve_point, factor),
            pa_radius=self.pa_radius * factor, pa_length=self.pa_length * factor,
        )


def _mul(v, f):
    return tuple(float(a) * f for a in v)


@dataclass(frozen=True, eq=False)
class Phantom:
    intensity: IntensityVolume
    labels: LabelVolume
    annotation: Annotation
    params: PhantomParams


class _Grid:
    """Voxel-centre coordinates, evaluated lazily inside primitive bounding boxes."""

    def __init__(self, params: PhantomParams):
        self.dims = params.dims
        s = params.spacing
        self.pad = s
        self.origin = tuple(-(n - 1) / 2.0 * s for n in self.dims)
        self.axes = [self.origin[a] + s * np.arange(self.dims[a]) for a in range(3)]
        self.offset = tuple(float(v) for v in params.offset)

    def window(self, lo, hi):
        sl = []
        for a in range(3):
            local = self.axes[a] - self.offset[a]
            i0 = int(np.searchsorted(local, lo[a] - self.pad, "left"))
            i1 = int(np.searchsorted(local, hi[a] + self.pad, "right"))
            sl.append(slice(i0, max(i0, i1)))
        return tuple(sl)

    def coords(self, sl, world: bool = False) -> np.ndarray:
        parts = [
            self.axes[a][sl[a]] if world else self.axes[a][sl[a]] - self.offset[a]
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*parts, indexing="ij"), axis=-1)

    def raster(self, bounds, fn) -> np.ndarray:
        """Full-size mask; ``fn(local_coords, window)`` evaluated on the window only."""
        out = np.zeros(self.dims, dtype=bool)
        sl = self.window(*bounds)
        if all(x.stop > x.start for x in sl):
            out[sl] = fn(self.coords(sl), sl)
        return out


def _box_around(mask: np.ndarray, label: str) -> CropBox | None:
    if not mask.any():
        return None
    ranges = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        nz = np.flatnonzero(mask.any(axis=other))
        ranges.append((int(nz[0]), int(nz[-1]) + 1))
    return CropBox(tuple(ranges), label)


def generate_phantom(params: PhantomParams, case_id: str | None = None) -> Phantom:
    """Rasterize ``params`` into intensity, TEN labels and annotations.

    Raises :class:`PhantomError` if distinct structures overlap or a
    required structure is missing from the grid.
    """
    grid = _Grid(params)
    origin = grid.origin
    plane_world = Plane(
        tuple(np.asarray(params.valve_point) + np.asarray(params.offset)), params.valve_normal
    )

    def far_side(sl):
        return plane_world.signed_distance(grid.coords(sl, world=True)) >= 0

    def ellipsoid(e: Ellipsoid, grow: float = 0.0):
        return grid.raster(e.bounds(grow), lambda c, sl: e.mask(c, grow))

    def tubes(items):
        m = np.zeros(params.dims, dtype=bool)
        for t in items:
            m |= grid.raster(t.bounds(), lambda c, sl, t=t: t.mask(c))
        return m

    lv = ellipsoid(params.lv)
    lv_outer = ellipsoid(params.lv, params.myo_thickness)
    myo = lv_outer & ~lv
    rv = grid.raster(params.rv.bounds(), lambda c, sl: params.rv.mask(c) & ~far_side(sl))
    pa_tube = Tube(params.valve_point, plane_world.normal, params.pa_length, params.pa_radius)
    pa = grid.raster(pa_tube.bounds(), lambda c, sl: pa_tube.mask(c) & far_side(sl))
    la_body = ellipsoid(params.la)
    lpv = tubes(params.lpv)
    rpv = tubes(params.rpv)
    laa = ellipsoid(params.laa)
    la = la_body | lpv | rpv | laa
    ra = ellipsoid(params.ra)
    aa = tubes([params.aa])

    solids = {"LV+LVMyo": lv_outer, "RV": rv, "PA": pa, "LA": la, "RA": ra, "AA": aa}
    names = list(solids)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if np.any(solids[a] & solids[b]):
                raise PhantomError(f"structures {a} and {b} overlap")
    for name, m in (("LV", lv), ("LVMyo", myo), ("RV", rv), ("PA", pa), ("LA", la_body),
                    ("RA", ra), ("AA", aa)):
        if not m.any():
            raise PhantomError(f"structure {name} does not intersect the grid")
    if np.any(lv & dilate(~lv_outer, Connectivity.FACE6)):
        raise PhantomError("myocardial shell does not enclose the LV cavity")
    if not np.any(rv & dilate(pa, Connectivity.FACE6)):
        raise PhantomError("PA does not attach to the RV at the valve plane")

    # sublabel boxes: the bounding box of each appendage outside the LA body
    boxes = []
    for label, items in (("LPV", params.lpv), ("RPV", params.rpv)):
        for tube in items:
            b = _box_around(tubes([tube]) & ~la_body, label)
            if b is not None:
                boxes.append(b)
    b = _box_around(laa & ~la_body, "LAA")
    if b is not None:
        boxes.append(b)

    data = np.zeros(params.dims, dtype=np.uint8)
    data[lv] = TEN.id_of("LV")
    data[myo] = TEN.id_of("LVMyo")
    data[rv] = TEN.id_of("RV")
    data[pa] = TEN.id_of("PA")
    data[ra] = TEN.id_of("RA")
    data[aa] = TEN.id_of("AA")
    data[la] = TEN.id_of("LAbody")
    for box in boxes:
        region = np.zeros(params.dims, dtype=bool)
        region[box.slices(params.dims)] = True
        data[la & region] = TEN.id_of(box.label)

    rng = np.random.default_rng(params.seed)
    means = np.array([params.means["background"]] + [params.means[n] for n in TEN.names])
    img = means[data] + rng.normal(0.0, params.noise_std, size=params.dims)

    spacing = (params.spacing,) * 3
    case_id = case_id or f"phantom{params.seed:04d}"
    return Phantom(
        IntensityVolume(img.astype(np.float32), spacing, origin),
        LabelVolume(data, spacing, origin, schema=TEN),
        Annotation(case_id, plane_world, tuple(boxes)),
        params,
    )


def _jitter_ellipsoid(e: Ellipsoid, rng, shift: float, scale: float) -> Ellipsoid:
    return Ellipsoid(
        tuple(c + rng.uniform(-shift, shift) for c in e.center),
        tuple(r * rng.uniform(1 - scale, 1 + scale) for r in e.radii),
    )


def _jitter_tube(t: Tube, rng, shift: float, scale: float) -> Tube:
    return Tube(
        tuple(c + rng.uniform(-shift, shift) for c in t.start),
        tuple(d + rng.uniform(-0.1, 0.1) for d in t.direction),
        t.length * rng.uniform(1 - scale, 1 + scale),
        t.radius * rng.uniform(1 - scale, 1 + scale),
    )


def random_params(seed: int, dims=(64, 80, 80), spacing: float = 2.0, scale: float = 1.0,
                  shift: float = 2.5, size_jitter: float = 0.08, max_tries: int = 200) -> PhantomParams:
    """A valid, randomly perturbed layout; deterministic in ``seed``.

    Candidate layouts that collide are discarded and redrawn from the same
    stream, so the result depends on ``seed`` alone.
    """
    rng = np.random.default_rng([seed, 7919])
    base = PhantomParams(seed=seed, dims=tuple(dims), spacing=spacing)
    if scale != 1.0:
        base = base.scaled(scale)
    for _ in range(max_tries):
        p = replace(
            base,
            offset=tuple(o * scale + rng.uniform(-shift, shift) for o in base.offset),
            lv=_jitter_ellipsoid(base.lv, rng, shift, size_jitter),
            rv=_jitter_ellipsoid(base.rv, rng, shift, size_jitter),
            la=_jitter_ellipsoid(base.la, rng, shift, size_jitter),
            ra=_jitter_ellipsoid(base.ra, rng, shift, size_jitter),
            laa=_jitter_ellipsoid(base.laa, rng, shift / 2, size_jitter),
            aa=_jitter_tube(base.aa, rng, shift, size_jitter),
            lpv=tuple(_jitter_tube(t, rng, shift / 2, size_jitter) for t in base.lpv),
            rpv=tuple(_jitter_tube(t, rng, shift / 2, size_jitter) for t in base.rpv),
            myo_thickness=base.myo_thickness * rng.uniform(1 - size_jitter, 1 + size_jitter),
            valve_point=tuple(c + rng.uniform(-shift / 2, shift / 2) for c in base.valve_point),
            valve_normal=tuple(c + rng.uniform(-0.1, 0.1) for c in base.valve_normal),
        )
        try:
            generate_phantom(p)
        except PhantomError:
            continue
        return p
    raise PhantomError(f"no valid layout found for seed {seed} in {max_tries} tries")


def degrade_labels(labels: LabelVolume, mode: str, magnitude: float = 1, seed: int = 0) -> LabelVolume:
    """Corrupt a label map the way an imperfect initial segmentation would.

    ``LV_OVERSEGMENT``
        the innermost ``magnitude`` layers of LVMyo become LV;
    ``PA_INTO_RV``
        PA is folded into RV (any non-zero magnitude);
    ``FOV_CROP``
        the superior-most ``magnitude`` fraction of slices becomes background.

    ``seed`` is accepted for interface symmetry; the modes are deterministic.
    """
    mode = mode.upper()
    if magnitude == 0:
        return labels
    data = np.array(labels.data)
    if mode == "LV_OVERSEGMENT":
        k = int(magnitude)
        if k != magnitude or k < 0:
            raise ValueError("LV_OVERSEGMENT magnitude must be a non-negative integer")
        lv_id, myo_id = labels.schema.id_of("LV"), labels.schema.id_of("LVMyo")
        for _ in range(k):
            layer = (data == myo_id) & dilate(data == lv_id, Connectivity.FACE6)
            data[layer] = lv_id
        lv = data == lv_id
        if np.any(dilate(lv, Connectivity.FACE6) & ~lv & (data != myo_id)):
            raise ValueError(f"LV_OVERSEGMENT by {k} voxels cuts through the myocardium")
    elif mode == "PA_INTO_RV":
        data[data == labels.schema.id_of("PA")] = labels.schema.id_of("RV")
    elif mode == "FOV_CROP":
        if not 0 <= magnitude < 1:
            raise ValueError("FOV_CROP magnitude is a fraction in [0, 1)")
        n = int(round(labels.dims[0] * magnitude))
        if n:
            data[labels.dims[0] - n :] = 0
    else:
        raise ValueError(f"unknown degradation mode {mode!r}")
    return labels.with_data(data)
