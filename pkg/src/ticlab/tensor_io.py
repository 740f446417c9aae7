"""Tensor file format used for latents, caches and checkpoints.

A ``.tns`` file is one JSON header line followed by the raw contiguous
element bytes::

    {"shape": [4, 16, 16], "dtype": "f64", "byte_order": "little"}\n
    <4*16*16 little-endian float64 values, C order>
"""

import json
from pathlib import Path

import numpy as np
import torch

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _code_for(dtype):
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return "f32"
    if dtype == np.float64:
        return "f64"
    raise ValueError(f"unsupported element type {dtype}; only float32/float64 are stored")


def save_tensor(path, array):
    """Write ``array`` (numpy or torch) to ``path`` in the tensor format."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    code = _code_for(array.dtype)
    header = {"shape": list(array.shape), "dtype": code, "byte_order": "little"}
    data = np.ascontiguousarray(array, dtype=_DTYPES[code])
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(data.tobytes(order="C"))


def load_tensor(path):
    """Read a tensor file and return a native-endian numpy array."""
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("byte_order", "little") != "little":
        raise ValueError(f"{path}: unsupported byte order {header['byte_order']!r}")
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
