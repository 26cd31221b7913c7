"""Raw little-endian array persistence.

Arrays are stored as bare buffers (float32 '<f4' or uint8) so files are
language neutral and byte-identical across runs; shape and dtype travel in a
JSON sidecar or manifest, never in the binary.
"""

import json
import os

import numpy as np

from .errors import DataError

DTYPES = {"f32": "<f4", "u8": "u1"}


def write_array(path, arr, kind: str):
    if kind not in DTYPES:
        raise DataError(f"unknown array kind {kind!r}")
    data = np.ascontiguousarray(arr, dtype=DTYPES[kind])
    with open(path, "wb") as fh:
        fh.write(data.tobytes())


def read_array(path, shape, kind: str):
    if kind not in DTYPES:
        raise DataError(f"unknown array kind {kind!r}")
    dtype = np.dtype(DTYPES[kind])
    expected = int(np.prod(shape)) * dtype.itemsize
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(buf) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, got {len(buf)}"
        )
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def write_json(path, obj):
    """Canonical JSON writer: sorted keys, no trailing whitespace drift."""
    text = json.dumps(obj, indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
