"""scikit-learn style wrappers around the functional API.

``fit`` takes the attention matrix and does the value-independent work;
``transform`` applies the fitted operator to a value matrix.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import bench
from ._validation import check_matrix, check_same_rows
from .blockwise import SamplerKind, _PreparedBlockwise, parse_block_size
from .resolvent import ResolventConfig, resolvent_apply
from .sparsify import TopKConfig, topk_prune
from .tensor_core import CausalAttention, MaskMode

__all__ = [
    "ResolventAttention",
    "BlockwiseResolventAttention",
    "TopKPruner",
    "CostModelRegressor",
]


def _as_attention(a, mask):
    if isinstance(a, CausalAttention):
        return a
    return CausalAttention(np.asarray(a, dtype=np.float64), MaskMode.parse(mask))


class ResolventAttention(TransformerMixin, BaseEstimator):
    """Dense resolvent operator.

    Parameters
    ----------
    gamma : float, default=0.9
    mask : {"inclusive", "strict"}, default="inclusive"
        Used only when ``fit`` receives a plain array.
    """

    def __init__(self, gamma=0.9, mask="inclusive"):
        self.gamma = gamma
        self.mask = mask

    def fit(self, a, y=None):
        self.config_ = ResolventConfig(self.gamma)
        self.attention_ = _as_attention(a, self.mask)
        self.n_ = self.attention_.n
        return self

    def transform(self, v):
        check_is_fitted(self)
        return resolvent_apply(self.attention_, v, self.config_)


class BlockwiseResolventAttention(TransformerMixin, BaseEstimator):
    """Blockwise resolvent operator.

    Parameters
    ----------
    gamma : float, default=0.9
    block_size : int or str, default="n"
        An int, ``"n"`` or ``"n//K"``.
    sampler : {"mean", "strided"}, default="mean"
    branches : {"both", "local", "residual"}, default="both"
        Which branches contribute to the output.
    mask : {"inclusive", "strict"}, default="inclusive"
    """

    def __init__(self, gamma=0.9, block_size="n", sampler="mean", branches="both",
                 mask="inclusive"):
        self.gamma = gamma
        self.block_size = block_size
        self.sampler = sampler
        self.branches = branches
        self.mask = mask

    def fit(self, a, y=None):
        if self.branches not in ("both", "local", "residual"):
            raise ValueError(f"branches must be 'both', 'local' or 'residual', got {self.branches!r}")
        self.config_ = ResolventConfig(self.gamma)
        attention = _as_attention(a, self.mask)
        m = parse_block_size(self.block_size, attention.n)
        self.prepared_ = _PreparedBlockwise(attention, m, SamplerKind.parse(self.sampler))
        self.plan_ = self.prepared_.plan
        self.n_ = attention.n
        return self

    def transform_parts(self, v):
        """Return the full :class:`~blockres.blockwise.BlockwiseOutput`."""
        check_is_fitted(self)
        v = check_matrix(v, name="V")
        check_same_rows(self.n_, v)
        return self.prepared_.apply(
            v,
            self.config_.gamma,
            local=self.branches != "residual",
            residual=self.branches != "local",
        )

    def transform(self, v):
        return self.transform_parts(v).y


class TopKPruner(TransformerMixin, BaseEstimator):
    """Row-wise top-k pruning; stateless, ``fit`` only validates ``k``."""

    def __init__(self, k=1, mask="inclusive"):
        self.k = k
        self.mask = mask

    def fit(self, a=None, y=None):
        self.config_ = TopKConfig(self.k)
        return self

    def transform(self, a):
        check_is_fitted(self)
        return topk_prune(_as_attention(a, self.mask), self.config_)


class CostModelRegressor(RegressorMixin, BaseEstimator):
    """Fit ``c1 n m d + c2 (n/m)^2 d`` to measured runtimes.

    ``X`` has columns ``(n, d, m)`` and ``y`` holds seconds.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"X must have columns (n, d, m), got {X.shape[1]} columns")
        records = [
            bench.TimingRecord(int(n), int(d), int(m), 0.0, "", 1, 0, (float(t),))
            for (n, d, m), t in zip(X, y)
        ]
        self.model_ = bench.fit_cost_model(records)
        self.coef_ = np.array([self.model_.c1, self.model_.c2])
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.model_.predict(X[:, 0], X[:, 1], X[:, 2])

    def optimal_block_size(self, n):
        check_is_fitted(self)
        return bench.optimal_block_size(self.model_, n)
