import numpy as np
import pytest
from sklearn.base import clone

from blockres import (
    BlockwiseResolventAttention,
    CostModelRegressor,
    ResolventAttention,
    TopKPruner,
    blockwise_apply,
    causal_softmax,
    resolvent_apply,
)


def test_resolvent_estimator(rng):
    a = causal_softmax(rng.normal(size=(10, 10)))
    v = rng.standard_normal((10, 3))
    est = ResolventAttention(gamma=0.7)
    np.testing.assert_array_equal(est.fit(a).transform(v), resolvent_apply(a, v, 0.7))
    np.testing.assert_array_equal(est.fit_transform(a.mat), resolvent_apply(a, a.mat, 0.7))
    assert clone(est).get_params() == {"gamma": 0.7, "mask": "inclusive"}


def test_blockwise_estimator_branches(rng):
    a = causal_softmax(rng.normal(size=(12, 12)), "strict")
    v = rng.standard_normal((12, 2))
    ref = blockwise_apply(a, v, 0.9, 4, "strided")
    est = BlockwiseResolventAttention(0.9, block_size=4, sampler="strided", mask="strict").fit(a)
    np.testing.assert_array_equal(est.transform(v), ref.y)
    np.testing.assert_array_equal(est.set_params(branches="local").fit(a).transform(v), ref.y_blk)
    np.testing.assert_array_equal(est.set_params(branches="residual").fit(a).transform(v), ref.y_res)
    assert est.plan_.k == 3
    with pytest.raises(ValueError):
        est.set_params(branches="neither").fit(a)


def test_unfitted_raises(rng):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        BlockwiseResolventAttention().transform(np.ones((3, 1)))


def test_topk_pruner(rng):
    a = causal_softmax(rng.normal(size=(6, 6)))
    out = TopKPruner(k=2).fit().transform(a)
    assert np.count_nonzero(out.mat, 1).max() <= 2


def test_cost_model_regressor():
    X = np.array([[n, 64, m] for n in (1024, 4096) for m in (8, 32, 128, 512)], dtype=float)
    y = 2e-9 * X[:, 0] * X[:, 2] * 64 + 5e-9 * (X[:, 0] / X[:, 2]) ** 2 * 64
    reg = CostModelRegressor().fit(X, y)
    np.testing.assert_allclose(reg.coef_, [2e-9, 5e-9], rtol=1e-9)
    assert reg.score(X, y) == pytest.approx(1.0)
    assert reg.optimal_block_size(4096) in (27, 28)
