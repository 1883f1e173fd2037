"""Bit-exact binary serialization for scalar, vector, and tensor fields.

A field file is one UTF-8 JSON header line followed by raw little-endian
float64 planes in row-major order:

    {"schema":"acdii-field/1","kind":"scalar","nx":3,"ny":3,
     "hx":0.5,"hy":0.5,"order":"row-major","payload":"f64le"}\n<payload>

`nx` and `ny` are the per-plane array dimensions: node counts for scalar
files, cell counts for vector (2 planes) and tensor (3 planes) files.
The payload must hold exactly planes*nx*ny float64 values.  Reading a
file and writing it back reproduces the canonical bytes exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .fields import Grid2D, ScalarField, TensorField2, VectorField2

SCHEMA = "acdii-field/1"

_PLANES = {"scalar": 1, "vector": 2, "tensor": 3}
_HEADER_KEYS = ("schema", "kind", "nx", "ny", "hx", "hy", "order", "payload")


class FieldFormatError(ValueError):
    """Structured parse error; `field` names the offending header field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _planes_of(field):
    if isinstance(field, ScalarField):
        return "scalar", [field.values]
    if isinstance(field, VectorField2):
        return "vector", [field.v1, field.v2]
    if isinstance(field, TensorField2):
        return "tensor", [field.s11, field.s12, field.s22]
    raise TypeError(f"cannot serialize object of type {type(field).__name__}")


def write_field(field) -> bytes:
    """Serialize a field to canonical bytes."""
    kind, planes = _planes_of(field)
    ny, nx = planes[0].shape
    header = {
        "schema": SCHEMA,
        "kind": kind,
        "nx": int(nx),
        "ny": int(ny),
        "hx": field.grid.hx,
        "hy": field.grid.hy,
        "order": "row-major",
        "payload": "f64le",
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in planes)
    return head + body


def read_field(data: bytes):
    """Parse field bytes into a ScalarField, VectorField2, or TensorField2.

    Scalar files come back node-located on an (nx, ny)-node grid; vector
    and tensor planes are cell data, so their grid has one extra node per
    direction.  The mask information is not part of the format and the
    reconstructed grid covers the full rectangle.
    """
    nl = data.find(b"\n")
    if nl < 0:
        raise FieldFormatError("missing header newline", field="header")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"header is not valid JSON: {exc}", field="header") from exc
    if not isinstance(header, dict):
        raise FieldFormatError("header must be a JSON object", field="header")

    for key in _HEADER_KEYS:
        if key not in header:
            raise FieldFormatError(f"header is missing required field '{key}'", field=key)
    for key in header:
        if key not in _HEADER_KEYS:
            raise FieldFormatError(f"header has unknown field '{key}'", field=key)

    if header["schema"] != SCHEMA:
        raise FieldFormatError(
            f"unsupported schema {header['schema']!r}, expected {SCHEMA!r}", field="schema"
        )
    kind = header["kind"]
    if kind not in _PLANES:
        raise FieldFormatError(f"unknown kind {kind!r}", field="kind")
    if header["order"] != "row-major":
        raise FieldFormatError(f"unsupported order {header['order']!r}", field="order")
    if header["payload"] != "f64le":
        raise FieldFormatError(f"unsupported payload {header['payload']!r}", field="payload")

    nx, ny = header["nx"], header["ny"]
    for name, val in (("nx", nx), ("ny", ny)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise FieldFormatError(f"header field '{name}' must be a positive integer", field=name)
    hx, hy = header["hx"], header["hy"]
    for name, val in (("hx", hx), ("hy", hy)):
        if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
            raise FieldFormatError(f"header field '{name}' must be a positive number", field=name)

    planes = _PLANES[kind]
    body = data[nl + 1 :]
    expected = planes * nx * ny * 8
    if len(body) != expected:
        raise FieldFormatError(
            f"payload length {len(body)} does not match expected {expected} bytes "
            f"({planes} plane(s) of {nx}x{ny} float64 for kind '{kind}')",
            field="payload length",
        )
    raw = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(raw)):
        bad = int(np.flatnonzero(~np.isfinite(raw))[0])
        raise FieldFormatError(
            f"payload has a non-finite value at flat index {bad}", field="payload"
        )
    arrays = [raw[p * nx * ny : (p + 1) * nx * ny].reshape(ny, nx) for p in range(planes)]

    if kind == "scalar":
        grid = Grid2D(nx, ny, hx, hy)
        return ScalarField(grid, arrays[0], location="node")
    grid = Grid2D(nx + 1, ny + 1, hx, hy)
    if kind == "vector":
        return VectorField2(grid, arrays[0], arrays[1])
    return TensorField2(grid, arrays[0], arrays[1], arrays[2])


def write_field_file(field, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_field(field))


def read_field_file(path):
    with open(path, "rb") as fh:
        return read_field(fh.read())
