"""Flat binary tensor files (`.ten`) with a JSON sidecar.

The format is deliberately minimal so it can be read from any language:
a fixed little-endian header (magic, dtype code, rank, dims) followed by
the row-major payload.  A ``<path>.json`` sidecar duplicates shape/dtype
and carries the semantic name and units.  Complex values are stored as
interleaved (real, imag) float32 pairs, which is also how feature
extraction splits them downstream.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"

# dtype name -> (code, numpy dtype). All payloads little-endian, row-major.
DTYPES = {
    "real32": (1, np.dtype("<f4")),
    "real64": (2, np.dtype("<f8")),
    "complex64": (3, np.dtype("<c8")),
    "int32": (4, np.dtype("<i4")),
}
_CODE_TO_NAME = {code: name for name, (code, _) in DTYPES.items()}


class TensorFormatError(ValueError):
    """Raised for malformed `.ten` files or unsupported arrays."""


def dtype_name(arr: np.ndarray) -> str:
    """Map a numpy array to its on-disk dtype name, or raise."""
    for name, (_, dt) in DTYPES.items():
        if arr.dtype == dt:
            return name
    raise TensorFormatError(
        f"unsupported dtype {arr.dtype}; supported: {sorted(DTYPES)}"
    )


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_tensor(arr: np.ndarray, path, name: str = "", units: str = "") -> None:
    """Write ``arr`` to ``path`` (payload) and ``path + '.json'`` (sidecar).

    The array must be finite-valued and of a supported dtype
    (float32/float64/complex64/int32).  Round-trips bitwise through
    :func:`read_tensor`.
    """
    arr = np.ascontiguousarray(arr)
    dname = dtype_name(arr)
    if dname != "int32" and arr.size and not np.all(np.isfinite(arr)):
        raise TensorFormatError("refusing to write non-finite values")

    path = Path(path)
    code = DTYPES[dname][0]
    header = MAGIC + struct.pack("<II", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())

    sidecar = {
        "shape": list(arr.shape),
        "dtype": dname,
        "order": "row-major",
        "byte_order": "little-endian",
        "name": name,
        "units": units,
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=1)
        f.write("\n")


def read_tensor(path, with_meta: bool = False):
    """Read a `.ten` file back into a numpy array.

    Validates the header against the payload length and against the
    sidecar.  With ``with_meta=True`` returns ``(array, sidecar_dict)``.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: corrupt header (bad magic)")
    code, ndim = struct.unpack_from("<II", raw, 4)
    if code not in _CODE_TO_NAME:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if len(raw) < 12 + 8 * ndim:
        raise TensorFormatError(f"{path}: corrupt header (truncated dims)")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    dname = _CODE_TO_NAME[code]
    dt = DTYPES[dname][1]
    payload = raw[12 + 8 * ndim:]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, header shape "
            f"{list(shape)} implies {expected}"
        )

    sc_path = sidecar_path(path)
    if not sc_path.exists():
        raise TensorFormatError(f"{path}: missing sidecar {sc_path.name}")
    with open(sc_path) as f:
        sidecar = json.load(f)
    if list(sidecar.get("shape", [])) != list(shape):
        raise TensorFormatError(
            f"{path}: sidecar shape {sidecar.get('shape')} disagrees with "
            f"header shape {list(shape)}"
        )
    if sidecar.get("dtype") != dname:
        raise TensorFormatError(
            f"{path}: sidecar dtype {sidecar.get('dtype')!r} disagrees with "
            f"header dtype {dname!r}"
        )

    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if with_meta:
        return arr, sidecar
    return arr
