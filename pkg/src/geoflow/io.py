"""Binary field files and 2D image export.

Field file layout (all little-endian)::

    8 bytes   magic  b"GEOFLOW1"
    u8        kind   1 scalar, 2 vector, 3 labels, 4 map
    u8        dtype  1 f32, 2 f64, 3 u16
    u8        ndim
    u8        components per point
    u32       label count (labels only, else 0)
    u32[ndim] dims
    f64[ndim] spacing
    f64[ndim] origin
    payload   x fastest, components interleaved per point

The header fully determines the payload size; files with missing or extra
payload bytes are rejected.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from geoflow.errors import (
    BadMagicError,
    DtypeMismatchError,
    ExportError,
    FieldFileError,
    KindMismatchError,
    TruncatedPayloadError,
)
from geoflow.grid import DeformationMap, GridSpec, ScalarField, VectorField
from geoflow.labels import LabelMap

MAGIC = b"GEOFLOW1"
KINDS = {"scalar": 1, "vector": 2, "labels": 3, "map": 4}
DTYPES = {"f32": (1, np.dtype("<f4")), "f64": (2, np.dtype("<f8")), "u16": (3, np.dtype("<u2"))}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_DTYPE_NAMES = {v[0]: k for k, v in DTYPES.items()}
_FIXED = struct.Struct("<BBBBI")

Field = Union[ScalarField, VectorField, LabelMap, DeformationMap]

# 16 well-separated colors; label ids beyond 15 wrap around
PALETTE = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25),
    (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
    (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
    (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 128, 128),
)


def field_kind(field: Field) -> str:
    if isinstance(field, ScalarField):
        return "scalar"
    if isinstance(field, VectorField):
        return "vector"
    if isinstance(field, LabelMap):
        return "labels"
    if isinstance(field, DeformationMap):
        return "map"
    raise TypeError(f"cannot store {type(field).__name__}")


def _payload(field: Field) -> np.ndarray:
    kind = field_kind(field)
    if kind == "scalar":
        return field.values[..., None]
    if kind == "labels":
        return field.labels[..., None]
    return field.vectors if kind == "vector" else field.coords


def _to_file_order(a: np.ndarray, ndim: int) -> np.ndarray:
    # arrays are indexed [x, y(, z), c]; files want x fastest, so reverse the spatial axes
    return np.transpose(a, tuple(range(ndim - 1, -1, -1)) + (ndim,))


def _pick_float(a: np.ndarray) -> str:
    with np.errstate(over="ignore"):
        return "f32" if np.array_equal(a.astype(np.float32).astype(np.float64), a) else "f64"


def write_field(path: Union[str, Path], field: Field, dtype: Optional[str] = None) -> Path:
    """Write ``field``; real-valued fields default to f32 when that is lossless,
    f64 otherwise, so a default round trip is always bit-exact."""
    kind = field_kind(field)
    data = _payload(field)
    grid = field.grid
    if kind == "labels":
        dtype = dtype or "u16"
        if dtype != "u16":
            raise DtypeMismatchError("labels are stored as u16")
        if field.label_count > 65536:
            raise DtypeMismatchError("label count exceeds the u16 range")
    else:
        dtype = dtype or _pick_float(data)
        if dtype not in ("f32", "f64"):
            raise DtypeMismatchError(f"{kind} fields are stored as f32 or f64, not {dtype}")
    code, np_dtype = DTYPES[dtype]
    aux = field.label_count if kind == "labels" else 0
    header = MAGIC + _FIXED.pack(KINDS[kind], code, grid.ndim, data.shape[-1], aux)
    header += struct.pack(f"<{grid.ndim}I", *grid.dims)
    header += struct.pack(f"<{2 * grid.ndim}d", *grid.spacing, *grid.origin)
    body = np.ascontiguousarray(_to_file_order(data, grid.ndim), dtype=np_dtype).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
    os.replace(tmp, path)
    return path


def read_header(raw: bytes) -> dict:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a field file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + _FIXED.size:
        raise TruncatedPayloadError("header is truncated")
    kind, dcode, ndim, ncomp, aux = _FIXED.unpack_from(raw, off)
    off += _FIXED.size
    if kind not in _KIND_NAMES:
        raise KindMismatchError(f"unknown kind code {kind}")
    if dcode not in _DTYPE_NAMES:
        raise DtypeMismatchError(f"unknown dtype code {dcode}")
    if ndim not in (2, 3):
        raise FieldFileError(f"unsupported dimensionality {ndim}")
    need = off + 4 * ndim + 16 * ndim
    if len(raw) < need:
        raise TruncatedPayloadError("header is truncated")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    geo = struct.unpack_from(f"<{2 * ndim}d", raw, off + 4 * ndim)
    return {
        "kind": _KIND_NAMES[kind], "dtype": _DTYPE_NAMES[dcode], "ncomp": ncomp, "aux": aux,
        "grid": GridSpec(tuple(dims), geo[:ndim], geo[ndim:]), "offset": need,
    }


def read_field(path: Union[str, Path], kind: Optional[str] = None) -> Field:
    """Read a field file; ``kind`` (if given) must match the stored kind."""
    raw = Path(path).read_bytes()
    h = read_header(raw)
    if kind is not None and h["kind"] != kind:
        raise KindMismatchError(f"expected a {kind} field, file holds {h['kind']}")
    grid = h["grid"]
    expected_dtype = ("u16",) if h["kind"] == "labels" else ("f32", "f64")
    if h["dtype"] not in expected_dtype:
        raise DtypeMismatchError(f"{h['kind']} field stored as {h['dtype']}")
    expected_comp = grid.ndim if h["kind"] in ("vector", "map") else 1
    if h["ncomp"] != expected_comp:
        raise FieldFileError(f"{h['kind']} field with {h['ncomp']} components")
    np_dtype = DTYPES[h["dtype"]][1]
    count = grid.size * expected_comp
    size = count * np_dtype.itemsize
    body = raw[h["offset"]:]
    if len(body) != size:
        raise TruncatedPayloadError(f"payload has {len(body)} bytes, header requires {size}")
    flat = np.frombuffer(body, dtype=np_dtype)
    rev = tuple(reversed(grid.dims)) + (expected_comp,)
    data = np.transpose(flat.reshape(rev), tuple(range(grid.ndim - 1, -1, -1)) + (grid.ndim,))
    if h["kind"] == "labels":
        return LabelMap(grid, data[..., 0].astype(np.int64), h["aux"])
    data = data.astype(np.float64)
    if h["kind"] == "scalar":
        return ScalarField(grid, data[..., 0])
    if h["kind"] == "vector":
        return VectorField(grid, data)
    return DeformationMap(grid, data)


# ---------------------------------------------------------------------------
# image export


def _plane(a: np.ndarray, ndim: int, axis: Optional[int], index: Optional[int]) -> np.ndarray:
    if ndim == 2:
        return a
    if axis is None or index is None:
        raise ExportError("3D export needs an axis and a slice index")
    if axis not in (0, 1, 2):
        raise ExportError(f"bad axis {axis}")
    if not 0 <= index < a.shape[axis]:
        raise ExportError(f"slice index {index} outside [0, {a.shape[axis]})")
    return np.take(a, index, axis=axis)


def export_image_2d(field: Union[ScalarField, LabelMap], path: Union[str, Path],
                    axis: Optional[int] = None, index: Optional[int] = None) -> Path:
    """8-bit grayscale (min-max window) for scalars, fixed palette for labels.

    The first array axis (x) runs left to right and the second top to bottom.
    """
    from PIL import Image

    if isinstance(field, LabelMap):
        plane = _plane(field.labels, field.grid.ndim, axis, index)
        rgb = np.asarray(PALETTE, dtype=np.uint8)[plane.T % len(PALETTE)]
        img = Image.fromarray(np.ascontiguousarray(rgb), mode="RGB")
    elif isinstance(field, ScalarField):
        plane = _plane(field.values, field.grid.ndim, axis, index)
        lo, hi = float(plane.min()), float(plane.max())
        if hi > lo:
            gray = np.round((plane - lo) / (hi - lo) * 255.0)
        else:
            gray = np.full(plane.shape, 128.0)
        img = Image.fromarray(np.ascontiguousarray(gray.T.astype(np.uint8)), mode="L")
    else:
        raise ExportError(f"cannot export {type(field).__name__} as an image")
    path = Path(path)
    img.save(path, format="PNG")
    return path


def lambda_t_name(lam: Sequence[float], t: float) -> str:
    lam_part = "_".join(f"{x:.3f}" for x in lam)
    return f"lam_{lam_part}_t_{t:+.3f}.png"
