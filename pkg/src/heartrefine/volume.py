"""Volume types and the geometric preprocessing chain.

Arrays are stored in (z, y, x) order with x varying fastest.  ``spacing`` and
``origin`` follow the same axis order and are in millimetres; ``origin`` is the
physical centre of voxel (0, 0, 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .schema import LabelSchema

__all__ = [
    "IntensityVolume",
    "LabelVolume",
    "resample_isotropic",
    "heart_center",
    "crop_or_pad",
    "fit_field_of_view",
    "FOVError",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


def _triple(value, name: str) -> tuple[float, float, float]:
    if np.isscalar(value):
        value = (value,) * 3
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class _Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def is_isotropic(self) -> bool:
        return self.spacing[0] == self.spacing[1] == self.spacing[2]

    def same_geometry(self, other: _Volume) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-6)
        )

    def physical_centers(self) -> np.ndarray:
        """(z, y, x, 3) array of voxel-centre coordinates in mm."""
        axes = [
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a])
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_data(self, data: np.ndarray, **changes):
        return replace(self, data=data, **changes)


@dataclass(frozen=True, eq=False)
class IntensityVolume(_Volume):
    """Scalar attenuation grid."""

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.number) or np.iscomplexobj(self.data):
            raise TypeError(f"intensity data must be real-valued, got {self.data.dtype}")


@dataclass(frozen=True, eq=False)
class LabelVolume(_Volume):
    """Grid of small non-negative label IDs under a :class:`LabelSchema`."""

    schema: LabelSchema | None = field(default=None, kw_only=True)

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            raise TypeError(f"label data must be integer, got {self.data.dtype}")
        if self.schema is None:
            raise ValueError("LabelVolume requires a schema")
        self.schema.validate(self.data)

    def mask(self, name: str) -> np.ndarray:
        return self.data == self.schema.id_of(name)

    def count(self, name: str) -> int:
        return int(np.count_nonzero(self.mask(name)))

    def histogram(self) -> np.ndarray:
        return np.bincount(self.data.ravel().astype(np.int64), minlength=self.schema.n_channels)


def _extent_dims(dims, spacing, target: float) -> tuple[int, int, int]:
    out = []
    for n, s in zip(dims, spacing):
        if n == 0:
            raise ValueError("cannot resample a volume with an empty axis")
        out.append(max(1, int(round(n * s / target))))
    return tuple(out)


def _nearest_indices(n_out: int, n_in: int, s_in: float, s_out: float) -> np.ndarray:
    # output centre i sits at input index (i + 0.5) * s_out / s_in - 0.5; round half up
    i = np.arange(n_out, dtype=np.float64)
    src = np.floor((2.0 * i + 1.0) * s_out / (2.0 * s_in)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resample_isotropic(vol, target_spacing: float):
    """Resample onto an isotropic grid with edge ``target_spacing`` mm.

    Intensities are trilinearly interpolated; labels use nearest neighbour so
    no new IDs can appear.  The physical extent of the grid is kept (up to
    rounding to a whole voxel) and the origin moves so that the outer voxel
    faces stay put.
    """
    target_spacing = float(target_spacing)
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    new_dims = _extent_dims(vol.dims, vol.spacing, target_spacing)
    new_spacing = (target_spacing,) * 3
    new_origin = tuple(
        o - 0.5 * s + 0.5 * target_spacing for o, s in zip(vol.origin, vol.spacing)
    )
    if new_dims == vol.dims and vol.spacing == new_spacing:
        return vol

    if isinstance(vol, LabelVolume):
        idx = [
            _nearest_indices(n, m, s, target_spacing)
            for n, m, s in zip(new_dims, vol.dims, vol.spacing)
        ]
        data = vol.data[np.ix_(*idx)]
    else:
        scale = [s_out / s_in for s_in, s_out in zip(vol.spacing, new_spacing)]
        offset = [0.5 * r - 0.5 for r in scale]
        src = vol.data if np.issubdtype(vol.data.dtype, np.floating) else vol.data.astype(np.float64)
        data = ndimage.affine_transform(
            src, np.diag(scale), offset=offset, output_shape=new_dims, order=1, mode="nearest"
        )
    return vol.with_data(data, spacing=new_spacing, origin=new_origin)


def _bbox(mask: np.ndarray):
    if not mask.any():
        return None
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        nz = np.flatnonzero(mask.any(axis=other))
        lo.append(int(nz[0]))
        hi.append(int(nz[-1]))
    return tuple(lo), tuple(hi)


def heart_center(labels: LabelVolume) -> tuple[int, int, int]:
    """Centre of the bounding box of all foreground voxels (rounded half up)."""
    box = _bbox(labels.data != 0)
    if box is None:
        raise ValueError("label volume has no foreground voxels")
    lo, hi = box
    return tuple((a + b + 1) // 2 for a, b in zip(lo, hi))


def crop_or_pad(vol, target_dims: Sequence[int], center: Sequence[int], fill=None):
    """Window of size ``target_dims`` whose middle voxel is input voxel ``center``.

    The middle of an axis of length n is index n // 2.  Voxels outside the
    source get 0 for labels and ``fill`` (default: the input minimum) for
    intensities.  The origin shifts so retained voxels keep their physical
    coordinates.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or min(target_dims) <= 0:
        raise ValueError(f"target_dims must be 3 positive ints, got {target_dims}")
    start = [int(c) - d // 2 for c, d in zip(center, target_dims)]

    if isinstance(vol, LabelVolume):
        fill_value = 0
    else:
        fill_value = vol.data.min() if fill is None else fill
    out = np.full(target_dims, fill_value, dtype=vol.data.dtype)

    src, dst = [], []
    for s, d, n in zip(start, target_dims, vol.dims):
        a, b = max(s, 0), min(s + d, n)
        if a >= b:
            src = None
            break
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    if src is not None:
        out[tuple(dst)] = vol.data[tuple(src)]
    origin = tuple(o + s * sp for o, s, sp in zip(vol.origin, start, vol.spacing))
    return vol.with_data(out, origin=origin)


class FOVError(RuntimeError):
    pass


def _fits(labels: LabelVolume, target_dims) -> bool:
    box = _bbox(labels.data != 0)
    if box is None:
        return True
    center = heart_center(labels)
    for lo, hi, c, d in zip(*box, center, target_dims):
        if lo - c + d // 2 < 0 or hi - c + d // 2 > d - 1:
            return False
    return True


def fit_field_of_view(
    intensity: IntensityVolume,
    labels: LabelVolume,
    target_dims: Sequence[int] = (128, 192, 192),
    base_spacing: float = 1.0,
    growth: float = 1.1,
    max_iter: int = 20,
):
    """Grow the voxel size by ``growth`` until every labelled voxel fits.

    Both volumes are resampled from the inputs at ``base_spacing * growth**k``
    for k = 0, 1, ...; the first k at which the labelled bounding box, centred,
    fits inside ``target_dims`` wins.  Returns the cropped/padded pair and the
    spacing used.
    """
    if not intensity.same_geometry(labels):
        raise ValueError("intensity and label volumes differ in geometry")
    for k in range(max_iter + 1):
        spacing = base_spacing * growth**k
        lab = resample_isotropic(labels, spacing)
        if _fits(lab, target_dims):
            img = resample_isotropic(intensity, spacing)
            center = heart_center(lab) if lab.data.any() else tuple(d // 2 for d in lab.dims)
            return (
                crop_or_pad(img, target_dims, center),
                crop_or_pad(lab, target_dims, center),
                spacing,
            )
    raise FOVError(f"labelled region does not fit {tuple(target_dims)} after {max_iter} iterations")


def preprocess(intensity: IntensityVolume, labels: LabelVolume | None = None,
               target_dims=(128, 192, 192), spacing: float = 1.0):
    """Resample, centre on the heart and fit the field of view.

    Without labels the image is resampled and centre-cropped only.
    """
    img = resample_isotropic(intensity, spacing)
    if labels is None:
        center = tuple(d // 2 for d in img.dims)
        return crop_or_pad(img, target_dims, center), None, spacing
    lab = resample_isotropic(labels, spacing)
    return fit_field_of_view(img, lab, target_dims, base_spacing=spacing)
