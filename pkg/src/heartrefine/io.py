"""Reading and writing volumes.

Two formats are supported:

* NIfTI-1 single files (``.nii`` / ``.nii.gz``), little-endian.  Only
  axis-aligned affines with positive voxel sizes are accepted; anything with a
  rotation or flip is rejected rather than silently resampled.
* A raw sidecar pair: ``name.raw`` holding a flat little-endian array and
  ``name.json`` holding ``{dims, spacing, origin, kind}``.

NIfTI axis i is our x, j is y and k is z, so the on-disk byte order equals a
C-ordered (z, y, x) array and no transpose is needed.
"""
from __future__ import annotations

import gzip
import json
import os
import struct
from pathlib import Path

import numpy as np

from .schema import LabelSchema, get_schema
from .volume import IntensityVolume, LabelVolume

__all__ = ["load_volume", "save_volume", "VolumeFormatError"]

_HDR_SIZE = 348
_VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype
_NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
}
_CODE_FOR = {dt: code for code, dt in _NIFTI_DTYPES.items()}

_SCHEMA_TAG = "heartrefine:schema="
# full-precision geometry rides in a comment extension; header fields are float32
_ECODE_COMMENT = 6


class VolumeFormatError(ValueError):
    """The file is not a volume this package can read."""


def _is_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if _is_gz(path) else open
    with opener(path, "rb") as f:
        return f.read()


def _write_bytes(path: Path, payload: bytes) -> None:
    # write to a sibling then rename so a failed write never leaves half a file
    tmp = path.with_name(path.name + ".tmp")
    if _is_gz(path):
        with open(tmp, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
            f.write(payload)
    else:
        with open(tmp, "wb") as f:
            f.write(payload)
    os.replace(tmp, path)


def _quat_is_identity(b, c, d, qfac) -> bool:
    return abs(b) < 1e-6 and abs(c) < 1e-6 and abs(d) < 1e-6 and qfac >= 0


def _parse_nifti(raw: bytes, path: Path):
    if len(raw) < _HDR_SIZE:
        raise VolumeFormatError(f"{path}: too short for a NIfTI header")
    if struct.unpack_from("<i", raw, 0)[0] != _HDR_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == _HDR_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI is not supported")
        raise VolumeFormatError(f"{path}: not a NIfTI-1 file")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0]={ndim}")
    shape = list(dim[1 : 1 + ndim])
    if any(n > 1 for n in shape[3:]):
        raise VolumeFormatError(f"{path}: only scalar 3-D volumes are supported, dims {shape}")
    shape = (shape + [1, 1, 1])[:3]
    nx, ny, nz = shape
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = _NIFTI_DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope, inter = struct.unpack_from("<2f", raw, 112)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quat = struct.unpack_from("<6f", raw, 256)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)

    if sform_code > 0:
        lin = srow[:, :3]
        if np.any(np.abs(lin - np.diag(np.diag(lin))) > 1e-6 * np.abs(lin).max()):
            raise VolumeFormatError(f"{path}: rotated affines are not supported")
        diag_xyz = np.diag(lin)
        origin_xyz = srow[:, 3]
    elif qform_code > 0:
        qfac = pixdim[0] if pixdim[0] != 0 else 1.0
        if not _quat_is_identity(quat[0], quat[1], quat[2], qfac):
            raise VolumeFormatError(f"{path}: rotated or flipped qform is not supported")
        diag_xyz = np.array(pixdim[1:4], dtype=np.float64)
        origin_xyz = np.array(quat[3:6], dtype=np.float64)
    else:
        diag_xyz = np.array(pixdim[1:4], dtype=np.float64)
        origin_xyz = np.zeros(3)
    if np.any(diag_xyz <= 0):
        raise VolumeFormatError(f"{path}: non-positive or flipped voxel axes {diag_xyz.tolist()}")

    count = nx * ny * nz
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise VolumeFormatError(f"{path}: truncated data ({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset).reshape(nz, ny, nx)
    scaling = (slope, inter) if slope not in (0.0, 1.0) or inter != 0.0 else None
    spacing = tuple(float(v) for v in diag_xyz[::-1])
    origin = tuple(float(v) for v in origin_xyz[::-1])
    meta = _read_extension(raw, vox_offset)
    if meta:
        exact_sp, exact_or = tuple(meta["spacing"]), tuple(meta["origin"])
        # trust the extension only while it agrees with the float32 header
        if np.allclose(exact_sp, spacing, rtol=1e-6, atol=1e-6) and np.allclose(
            exact_or, origin, rtol=1e-6, atol=1e-3
        ):
            spacing, origin = exact_sp, exact_or
    return data, spacing, origin, scaling, descrip


def _extension(meta: dict) -> bytes:
    body = json.dumps(meta, separators=(",", ":")).encode()
    esize = 8 + len(body)
    esize += -esize % 16
    return struct.pack("<2i", esize, _ECODE_COMMENT) + body.ljust(esize - 8, b"\x00")


def _read_extension(raw: bytes, vox_offset: int) -> dict:
    if len(raw) < _VOX_OFFSET or raw[_HDR_SIZE] == 0:
        return {}
    pos = _VOX_OFFSET
    while pos + 8 <= vox_offset:
        esize, ecode = struct.unpack_from("<2i", raw, pos)
        if esize < 8:
            break
        if ecode == _ECODE_COMMENT:
            body = raw[pos + 8 : pos + esize].rstrip(b"\x00")
            try:
                meta = json.loads(body)
            except ValueError:
                meta = None
            if isinstance(meta, dict) and meta.get("writer") == "heartrefine":
                return meta
        pos += esize
    return {}


def _nifti_bytes(vol, data: np.ndarray, descrip: str) -> bytes:
    nz, ny, nx = data.shape
    sz, sy, sx = vol.spacing
    oz, oy, ox = vol.origin
    ext = _extension({"writer": "heartrefine", "spacing": list(vol.spacing), "origin": list(vol.origin)})
    vox_offset = _VOX_OFFSET + len(ext)
    hdr = bytearray(_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    code = _CODE_FOR[data.dtype]
    struct.pack_into("<2h", hdr, 70, code, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    hdr[148 : 148 + min(len(descrip), 79)] = descrip.encode("latin-1")[:79]
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    hdr[_HDR_SIZE] = 1
    return bytes(hdr) + ext + np.ascontiguousarray(data).tobytes()


def _default_schema(data: np.ndarray) -> LabelSchema:
    hi = int(data.max()) if data.size else 0
    if hi <= 6:
        return get_schema("SIX")
    if hi == 7:
        return get_schema("SEVEN")
    return get_schema("TEN")


def _as_labels(data: np.ndarray, path) -> np.ndarray:
    if np.issubdtype(data.dtype, np.floating):
        if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
            raise VolumeFormatError(f"{path}: label file contains fractional values")
    if data.size and data.min() < 0:
        raise VolumeFormatError(f"{path}: label file contains negative values")
    if data.size and data.max() > 255:
        raise VolumeFormatError(f"{path}: label IDs exceed 255")
    return data.astype(np.uint8)


def _make(kind: str, data, spacing, origin, path, schema, tag):
    if kind == "intensity":
        return IntensityVolume(np.array(data), spacing, origin)
    if kind != "label":
        raise ValueError(f"kind must be 'intensity' or 'label', got {kind!r}")
    labels = _as_labels(data, path)
    if schema is None:
        schema = get_schema(tag) if tag else _default_schema(labels)
    try:
        return LabelVolume(labels, spacing, origin, schema=schema)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None


def _raw_paths(path: Path) -> tuple[Path, Path]:
    stem = path.with_suffix("")
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def load_volume(path, kind: str = "intensity", schema: LabelSchema | None = None):
    """Load an :class:`IntensityVolume` or :class:`LabelVolume` from disk.

    For labels the schema is taken from ``schema``, else from the tag this
    package writes into the NIfTI description field, else guessed from the
    largest ID present.
    """
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        raw_path, json_path = _raw_paths(path)
        try:
            meta = json.loads(json_path.read_text())
            dims = tuple(int(d) for d in meta["dims"])
            dtype = np.dtype(meta.get("dtype", "<f4" if meta.get("kind") != "label" else "<u1"))
            payload = raw_path.read_bytes()
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise VolumeFormatError(f"{path}: unreadable raw volume ({exc})") from None
        if dtype not in (np.dtype("<f4"), np.dtype("<u1")):
            raise VolumeFormatError(f"{path}: raw dtype must be float32 or uint8, got {dtype}")
        count = int(np.prod(dims))
        if len(payload) != count * dtype.itemsize:
            raise VolumeFormatError(
                f"{path}: raw payload has {len(payload)} bytes, expected {count * dtype.itemsize}"
            )
        data = np.frombuffer(payload, dtype=dtype).reshape(dims)
        return _make(kind, data, meta["spacing"], meta["origin"], path, schema, meta.get("schema"))

    try:
        raw = _read_bytes(path)
    except (OSError, EOFError) as exc:
        raise VolumeFormatError(f"{path}: cannot read ({exc})") from None
    data, spacing, origin, scaling, descrip = _parse_nifti(raw, path)
    if scaling is not None:
        data = data.astype(np.float64) * scaling[0] + scaling[1]
    tag = descrip[len(_SCHEMA_TAG):] if descrip.startswith(_SCHEMA_TAG) else None
    return _make(kind, data, spacing, origin, path, schema, tag)


def _storage_array(vol) -> np.ndarray:
    data = vol.data
    if isinstance(vol, LabelVolume):
        return data.astype("<u1")
    dt = data.dtype.newbyteorder("<") if data.dtype.byteorder == ">" else data.dtype
    if dt in _CODE_FOR:
        return data.astype(dt, copy=False)
    if np.issubdtype(data.dtype, np.floating):
        return data.astype("<f8")
    if data.dtype == np.bool_:
        return data.astype("<u1")
    return data.astype("<f8")


def save_volume(vol, path) -> None:
    """Write ``vol`` as NIfTI (``.nii``/``.nii.gz``) or raw+JSON (``.raw``/``.json``).

    NIfTI keeps the array dtype (labels as uint8) so reloading is bit-exact.
    The raw format stores float32 intensities and uint8 labels only.
    """
    path = Path(path)
    kind = "label" if isinstance(vol, LabelVolume) else "intensity"
    if path.suffix in (".raw", ".json"):
        raw_path, json_path = _raw_paths(path)
        dtype = np.dtype("<u1") if kind == "label" else np.dtype("<f4")
        meta = {
            "dims": list(vol.dims),
            "spacing": list(vol.spacing),
            "origin": list(vol.origin),
            "kind": kind,
            "dtype": dtype.str,
        }
        if kind == "label":
            meta["schema"] = vol.schema.variant.value
        _write_bytes(raw_path, np.ascontiguousarray(vol.data, dtype=dtype).tobytes())
        _write_bytes(json_path, (json.dumps(meta, indent=2) + "\n").encode())
        return
    descrip = _SCHEMA_TAG + vol.schema.variant.value if kind == "label" else "heartrefine"
    _write_bytes(path, _nifti_bytes(vol, _storage_array(vol), descrip))
