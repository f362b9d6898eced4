"""Row-wise top-k pruning of attention and mass diagnostics."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive_int
from .tensor_core import CausalAttention

__all__ = ["TopKConfig", "topk_prune", "mass_coverage", "block_mass_fraction"]


@dataclass(frozen=True)
class TopKConfig:
    """Keep ``k`` entries per row. Ties go to the lowest column index."""

    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "k", check_positive_int(self.k, "k"))


def _descending_order(mat):
    # stable sort on the negated values keeps equal entries in column order
    return np.argsort(-mat, axis=1, kind="stable")


def topk_prune(a, cfg):
    """Keep each row's ``k`` largest entries and renormalise them to sum 1.

    Rows that already have at most ``k`` nonzeros are returned bit-for-bit
    unchanged, as are all-zero rows.

    Examples
    --------
    >>> a = CausalAttention(np.array([[1.0, 0, 0, 0], [1, 0, 0, 0],
    ...                               [0.5, 0.5, 0, 0], [0.5, 0.3, 0.2, 0]]))
    >>> topk_prune(a, TopKConfig(2)).mat[3]
    array([0.625, 0.375, 0.   , 0.   ])
    """
    if isinstance(cfg, int):
        cfg = TopKConfig(cfg)
    mat = np.asarray(a.mat, dtype=np.float64)
    out = mat.copy()
    k = cfg.k
    nnz = np.count_nonzero(mat, axis=1)
    rows = np.flatnonzero(nnz > k)
    if rows.size:
        sub = mat[rows]
        order = _descending_order(sub)
        keep = np.zeros(sub.shape, dtype=bool)
        np.put_along_axis(keep, order[:, :k], True, axis=1)
        kept = np.where(keep, sub, 0.0)
        kept /= kept.sum(axis=1, keepdims=True)
        out[rows] = kept
    return CausalAttention(out, a.mask, validate=False)


def mass_coverage(a, k):
    """Per-row sum of the ``k`` largest entries, before any renormalisation.

    Summed sequentially in descending order, so the result never decreases
    as ``k`` grows, even in floating point.
    """
    k = check_positive_int(k, "k")
    mat = np.asarray(a.mat, dtype=np.float64)
    if mat.shape[1] == 0:
        return np.zeros(mat.shape[0])
    ordered = -np.sort(-mat, axis=1)
    return np.cumsum(ordered, axis=1)[:, min(k, mat.shape[1]) - 1]


def block_mass_fraction(a, plan):
    """Share of the total attention mass that falls inside the diagonal tiles.

    An all-zero matrix has no off-block mass and reports 1.0.
    """
    mat = np.asarray(a.mat, dtype=np.float64)
    if mat.shape[0] != plan.n:
        raise ValueError(f"plan covers n={plan.n} but attention is {mat.shape[0]} x {mat.shape[1]}")
    total = mat.sum()
    if total == 0.0:
        return 1.0
    inside = sum(mat[s:e, s:e].sum() for s, e in plan.tiles)
    return float(inside / total)
