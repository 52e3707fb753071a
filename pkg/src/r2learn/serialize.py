"""Bit-exact array encoding for JSON checkpoints."""

import base64

import numpy as np

from r2learn.errors import DataError


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a)
    if a.dtype == np.bool_:
        dtype = "bool"
    elif np.issubdtype(a.dtype, np.integer):
        a, dtype = a.astype("<i8"), "int64"
    else:
        a, dtype = a.astype("<f8"), "float64"
    return {"dtype": dtype, "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    try:
        dt = {"float64": "<f8", "int64": "<i8", "bool": "?"}[obj["dtype"]]
        raw = base64.b64decode(obj["data"].encode("ascii"), validate=True)
        return np.frombuffer(raw, dtype=dt).reshape(obj["shape"]).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"corrupt array payload: {exc}") from exc
