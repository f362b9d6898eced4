"""Dense float64 matrix foundation.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and rank 2.
This module adds the pieces the rest of the package builds on:

* :class:`MaskMode` and :class:`CausalAttention`, a validated wrapper for a
  causally masked, row-normalised attention matrix;
* :func:`causal_softmax`, the masked softmax that builds one from logits;
* :func:`matmul` and :func:`forward_substitution`;
* :func:`solve_lower_stack`, the batched lower-triangular kernel every
  resolvent evaluation goes through;
* the ``BRM1`` binary matrix format (:func:`write_brm`, :func:`read_brm`).
"""

import enum
import struct
from dataclasses import InitVar, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from ._validation import check_matrix, check_square

__all__ = [
    "MaskMode",
    "CausalAttention",
    "causal_softmax",
    "matmul",
    "forward_substitution",
    "solve_lower_stack",
    "write_brm",
    "read_brm",
    "ROW_SUM_TOL",
]

ROW_SUM_TOL = 1e-12

# Tiles up to this size are solved by a row sweep vectorised over the whole
# stack; larger ones go to LAPACK one at a time. The choice depends on the
# tile size only, so a tile gives bit-identical results whether it is solved
# alone or as part of a stack.
SMALL_TILE = 32


class MaskMode(enum.Enum):
    """Which key positions a query row may attend to."""

    STRICT = "strict"  # j < i, zero diagonal
    INCLUSIVE = "inclusive"  # j <= i

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown mask mode {value!r}; expected 'strict' or 'inclusive'"
            ) from None

    def permitted(self, n):
        """Boolean ``n x n`` array of allowed (query, key) pairs."""
        offset = -1 if self is MaskMode.STRICT else 0
        return np.tri(n, n, offset, dtype=bool)

    def forbidden_upper(self, mat):
        """Entries that must be zero under this mask."""
        return np.triu(mat, 0 if self is MaskMode.STRICT else 1)


@dataclass(frozen=True, eq=False)
class CausalAttention:
    """An ``n x n`` causal attention matrix together with its mask.

    Every row is either all zero or non-negative with unit sum over the
    permitted entries; entries outside the mask are exactly zero.

    Parameters
    ----------
    mat : ndarray of shape (n, n)
    mask : MaskMode or str
    validate : bool, default=True
        Skip the O(n^2) invariant check. Only for matrices built by trusted
        code paths (for example the benchmark generator).
    """

    mat: np.ndarray
    mask: MaskMode = MaskMode.INCLUSIVE
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        object.__setattr__(self, "mask", MaskMode.parse(self.mask))
        if not validate:
            if self.mat.ndim != 2 or self.mat.shape[0] != self.mat.shape[1]:
                raise ValueError("attention matrix must be square")
            return
        mat = check_square(self.mat, name="attention")
        if self.mask.forbidden_upper(mat).any():
            raise ValueError(f"attention has nonzero entries outside the {self.mask.value} mask")
        if (mat < 0).any() or (mat > 1).any():
            raise ValueError("attention entries must lie in [0, 1]")
        sums = mat.sum(axis=1)
        bad = ~((sums == 0) | (np.abs(sums - 1.0) <= ROW_SUM_TOL))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"attention row {row} sums to {sums[row]!r}; rows must sum to 1 or be all zero"
            )
        object.__setattr__(self, "mat", mat)

    @property
    def n(self):
        return self.mat.shape[0]

    @property
    def shape(self):
        return self.mat.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.mat, dtype=dtype)


def causal_softmax(logits, mask=MaskMode.INCLUSIVE):
    """Row-wise softmax restricted to the causally permitted entries.

    Forbidden entries are exactly zero. A row with no permitted key (row 0
    under the strict mask) is returned as all zeros.

    Examples
    --------
    >>> causal_softmax(np.zeros((3, 3)), "strict").mat
    array([[0. , 0. , 0. ],
           [1. , 0. , 0. ],
           [0.5, 0.5, 0. ]])
    """
    mask = MaskMode.parse(mask)
    logits = check_square(logits, name="logits")
    n = logits.shape[0]
    allowed = mask.permitted(n)
    masked = np.where(allowed, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    row_max[~np.isfinite(row_max)] = 0.0
    expd = np.exp(masked - row_max)  # exp(-inf) == 0 on forbidden entries
    total = expd.sum(axis=1, keepdims=True)
    np.divide(expd, total, out=expd, where=total > 0)
    expd[~allowed] = 0.0
    return CausalAttention(expd, mask, validate=False)


def matmul(a, b):
    """Matrix product in float64 (``n x 0`` operands allowed)."""
    a = check_matrix(a, name="a")
    b = check_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def solve_lower_stack(lower, rhs):
    """Solve ``lower[i] @ X[i] = rhs[i]`` for a stack of triangular systems.

    No validation: callers guarantee ``lower`` is lower triangular with a
    nonzero diagonal. Both arrays are 3-D, ``(b, m, m)`` and ``(b, m, d)``.
    """
    batch, m, _ = lower.shape
    if m <= SMALL_TILE:
        x = np.array(rhs, dtype=np.float64, copy=True)
        diag = lower[:, np.arange(m), np.arange(m)]
        for r in range(m):
            if r:
                x[:, r, :] -= np.matmul(lower[:, r : r + 1, :r], x[:, :r, :])[:, 0, :]
            x[:, r, :] /= diag[:, r, None]
        return x
    out = np.empty(rhs.shape, dtype=np.float64)
    for i in range(batch):
        out[i] = solve_triangular(lower[i], rhs[i], lower=True, check_finite=False)
    return out


def forward_substitution(l, b, min_diag=1e-12):
    """Solve ``l @ X = b`` for lower-triangular ``l`` by forward substitution.

    Parameters
    ----------
    l : array_like of shape (n, n)
        Lower triangular, every diagonal entry at least ``min_diag``.
    b : array_like of shape (n, d)
    min_diag : float
        Positivity threshold for the diagonal. A violation usually means the
        damping factor upstream was out of range.

    Returns
    -------
    ndarray of shape (n, d)
    """
    l = check_square(l, name="l")
    b = check_matrix(b, name="b")
    n = l.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"b has {b.shape[0]} rows, expected {n}")
    if np.triu(l, 1).any():
        raise ValueError("l is not lower triangular")
    diag = np.diagonal(l)
    if (diag < min_diag).any():
        i = int(np.argmin(diag))
        raise ValueError(f"diagonal entry l[{i},{i}] = {diag[i]!r} is below {min_diag!r}")
    if b.shape[1] == 0:
        return np.empty((n, 0))
    return solve_lower_stack(l[None], b[None])[0]


_MAGIC = b"BRM1"
_HEADER = struct.Struct("<4sII")


def write_brm(path, mat):
    """Write a float64 matrix in ``BRM1`` layout (little-endian, row-major)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("BRM1 stores 2-D matrices only")
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    return Path(path)


def read_brm(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated BRM1 header")
        magic, rows, cols = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        payload = fh.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
