"""Input validation helpers shared by the functional API and the estimators."""

import numbers

import numpy as np


def check_matrix(x, name="X", allow_empty_cols=True):
    """Return ``x`` as a finite 2-D float64 array.

    Zero-width matrices are accepted (``n x 0`` values are legal inputs);
    zero-row matrices are not.
    """
    if np.iscomplexobj(x):
        raise TypeError(f"{name} must be real, got a complex array")
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise TypeError(f"{name} is not convertible to a float64 array: {exc}") from exc
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {arr.ndim}-D with shape {arr.shape}")
    if arr.shape[0] == 0 or (arr.shape[1] == 0 and not allow_empty_cols):
        raise ValueError(f"{name} has an empty dimension, shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return arr


def check_square(x, name="A"):
    arr = check_matrix(x, name=name)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    return arr


def check_same_rows(a_rows, v, name="V"):
    if v.shape[0] != a_rows:
        raise ValueError(
            f"{name} has {v.shape[0]} rows but the attention matrix has {a_rows}"
        )


def check_gamma(gamma):
    if not isinstance(gamma, numbers.Real) or isinstance(gamma, bool):
        raise TypeError(f"gamma must be a real number, got {type(gamma).__name__}")
    gamma = float(gamma)
    if not np.isfinite(gamma) or not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma!r}")
    return gamma


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value
