"""Element dtypes and the promotion table.

The dtype set is a closed enumeration. Promotion follows
bool < int32 < int64 < float32 < float64, except that mixing an integer
with a float always yields the float operand's dtype (so int64 + float32
stays float32 rather than widening).
"""
from __future__ import annotations

import numpy as np

from .errors import TypeMismatch

FLOAT32 = "float32"
FLOAT64 = "float64"
INT32 = "int32"
INT64 = "int64"
BOOL = "bool"

ALL_DTYPES = (FLOAT32, FLOAT64, INT32, INT64, BOOL)
FLOAT_DTYPES = (FLOAT32, FLOAT64)
INT_DTYPES = (INT32, INT64)

_RANK = {BOOL: 0, INT32: 1, INT64: 2, FLOAT32: 3, FLOAT64: 4}


def as_dtype(dtype) -> str:
    """Normalize a dtype spelling (str or numpy dtype) to one of ALL_DTYPES."""
    name = np.dtype(dtype).name if not isinstance(dtype, str) else dtype
    if name not in ALL_DTYPES:
        raise TypeMismatch(f"unsupported dtype {dtype!r}; expected one of {ALL_DTYPES}")
    return name


def is_float(dtype: str) -> bool:
    return dtype in FLOAT_DTYPES


def is_int(dtype: str) -> bool:
    return dtype in INT_DTYPES


def promote(a: str, b: str) -> str:
    a, b = as_dtype(a), as_dtype(b)
    if is_float(a) and not is_float(b):
        return a
    if is_float(b) and not is_float(a):
        return b
    return a if _RANK[a] >= _RANK[b] else b


def promote_all(dtypes) -> str:
    out = None
    for d in dtypes:
        out = d if out is None else promote(out, d)
    if out is None:
        raise TypeMismatch("cannot promote an empty dtype list")
    return out


def np_dtype(dtype: str) -> np.dtype:
    return np.dtype(as_dtype(dtype))


def dtype_of_value(value) -> str:
    """Dtype to use for a host value pushed into a graph as a constant."""
    arr = np.asarray(value)
    if arr.dtype.kind == "b":
        return BOOL
    if arr.dtype.kind in "iu":
        return INT64
    if arr.dtype == np.float32:
        return FLOAT32
    if arr.dtype.kind == "f":
        return FLOAT64
    raise TypeMismatch(f"cannot infer a supported dtype for value of dtype {arr.dtype}")
