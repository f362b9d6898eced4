"""Dense resolvent attention and the operators used in the sparsity study.

The resolvent map aggregates every power of the attention matrix with
geometric weights::

    S(A) V = (1 - gamma) * A (I - gamma A)^-1 V
           = (1 - gamma) * sum_{t >= 1} gamma^(t-1) A^t V

It is evaluated as ``R = A V`` followed by one forward substitution with
``I - gamma A``. ``A`` and ``(I - gamma A)^-1`` commute, so this ordering
gives the same operator as the product written above.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core
from ._validation import check_gamma, check_matrix, check_positive_int, check_same_rows
from .tensor_core import CausalAttention, MaskMode

__all__ = [
    "ResolventConfig",
    "resolvent_apply",
    "neumann_oracle",
    "default_t_max",
    "t_raw",
    "t_post",
    "t_pre",
]


@dataclass(frozen=True)
class ResolventConfig:
    """Damping factor of the resolvent, ``0 <= gamma < 1``."""

    gamma: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "gamma", check_gamma(self.gamma))


def _as_config(cfg):
    if isinstance(cfg, ResolventConfig):
        return cfg
    return ResolventConfig(cfg)


def _check_attention(a):
    if not isinstance(a, CausalAttention):
        raise TypeError(
            f"expected CausalAttention, got {type(a).__name__}; build one with causal_softmax"
        )
    return a


def resolve_stack(tiles, values, gamma):
    """``(1 - gamma) (I - gamma T)^-1 (T V)`` for a stack of lower tiles.

    ``tiles`` is ``(b, m, m)`` and contiguous, ``values`` is ``(b, m, d)``.
    This is the one kernel behind the dense operator, the local branch and
    the reduced residual system.
    """
    m = tiles.shape[1]
    rhs = np.matmul(tiles, values)
    lower = tiles * -gamma
    lower[:, np.arange(m), np.arange(m)] += 1.0
    out = tensor_core.solve_lower_stack(lower, rhs)
    out *= 1.0 - gamma
    return out


def resolvent_apply(a, v, cfg=ResolventConfig()):
    """Apply the resolvent operator of ``a`` to the values ``v``.

    Parameters
    ----------
    a : CausalAttention
    v : array_like of shape (n, d)
    cfg : ResolventConfig or float
        A bare float is taken as ``gamma``.

    Returns
    -------
    ndarray of shape (n, d)
    """
    a = _check_attention(a)
    cfg = _as_config(cfg)
    v = check_matrix(v, name="V")
    check_same_rows(a.n, v)
    if v.shape[1] == 0:
        return np.empty(v.shape)
    tile = np.ascontiguousarray(a.mat, dtype=np.float64)
    return resolve_stack(tile[None], v[None], cfg.gamma)[0]


def default_t_max(gamma, tol=1e-12):
    """Number of series terms whose geometric tail drops below ``tol``.

    Uses ``ceil(log(tol (1 - gamma)) / log(gamma))``; ``gamma = 0`` needs a
    single term.
    """
    gamma = check_gamma(gamma)
    if gamma == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma)))


def neumann_oracle(a, v, gamma, t_max):
    """Truncated multi-hop series ``(1-gamma) sum_{t=1..t_max} gamma^(t-1) A^t V``.

    Under the strict mask ``A`` is nilpotent (``A^n = 0``), so any
    ``t_max >= n - 1`` makes the sum exact. Under the inclusive mask the
    truncation error is bounded by ``gamma^t_max / (1 - gamma)`` times the
    magnitude of ``V``.
    """
    a = _check_attention(a)
    gamma = check_gamma(gamma)
    t_max = check_positive_int(t_max, "t_max")
    v = check_matrix(v, name="V")
    check_same_rows(a.n, v)
    mat = np.asarray(a.mat, dtype=np.float64)
    power = mat @ v
    total = power.copy()
    weight = 1.0
    for _ in range(t_max - 1):
        power = mat @ power
        weight *= gamma
        if weight == 0.0 or not power.any():
            break
        total += weight * power
    return (1.0 - gamma) * total


def t_raw(a, v):
    """One-hop routing ``A V``."""
    a = _check_attention(a)
    v = check_matrix(v, name="V")
    check_same_rows(a.n, v)
    return np.asarray(a.mat) @ v


def _unit_lower(a):
    a = _check_attention(a)
    if a.mask is not MaskMode.STRICT:
        raise ValueError(
            "undamped inverse needs a strict causal mask; I - A can be singular otherwise"
        )
    mat = np.ascontiguousarray(a.mat, dtype=np.float64)
    lower = -mat
    lower[np.diag_indices_from(lower)] += 1.0
    return mat, lower


def t_post(a, v):
    """``A (I - A)^-1 V``, i.e. ``sum_{t >= 1} A^t V`` for strict-mask ``A``."""
    mat, lower = _unit_lower(a)
    v = check_matrix(v, name="V")
    check_same_rows(mat.shape[0], v)
    if v.shape[1] == 0:
        return np.empty(v.shape)
    z = tensor_core.solve_lower_stack(lower[None], v[None])[0]
    return mat @ z


def t_pre(a, v):
    """``(I - A)^-1 A V``; equal to :func:`t_post` but solved after the product."""
    mat, lower = _unit_lower(a)
    v = check_matrix(v, name="V")
    check_same_rows(mat.shape[0], v)
    if v.shape[1] == 0:
        return np.empty(v.shape)
    return tensor_core.solve_lower_stack(lower[None], (mat @ v)[None])[0]
