"""Resolvent attention with a blockwise local-plus-residual evaluation."""

from .blockwise import (
    BlockPlan,
    BlockwiseOutput,
    SamplerKind,
    SamplerPair,
    block_split,
    blockwise_apply,
    local_branch,
    make_plan,
    make_samplers,
    per_head_apply,
    residual_branch,
)
from .resolvent import (
    ResolventConfig,
    default_t_max,
    neumann_oracle,
    resolvent_apply,
    t_post,
    t_pre,
    t_raw,
)
from .sparsify import TopKConfig, block_mass_fraction, mass_coverage, topk_prune
from .tensor_core import (
    CausalAttention,
    MaskMode,
    causal_softmax,
    forward_substitution,
    matmul,
    read_brm,
    write_brm,
)

__version__ = "0.1.0"

_ESTIMATORS = ("BlockwiseResolventAttention", "CostModelRegressor", "ResolventAttention", "TopKPruner")


def __getattr__(name):
    # scikit-learn is slow to import; load the estimator wrappers on first use
    if name in _ESTIMATORS:
        from . import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
