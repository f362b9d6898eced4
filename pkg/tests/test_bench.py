import io
import math
import warnings

import numpy as np
import pytest

from blockres import bench
from blockres.tensor_core import MaskMode


def test_random_attention_is_row_stochastic_and_seeded():
    a = bench.random_attention(300, 4)
    np.testing.assert_allclose(a.mat.sum(1), 1.0, rtol=0, atol=1e-12)
    assert not np.triu(a.mat, 1).any()
    np.testing.assert_array_equal(a.mat, bench.random_attention(300, 4).mat)
    s = bench.random_attention(40, 4, MaskMode.STRICT)
    assert not np.triu(s.mat).any() and not s.mat[0].any()


def test_random_attention_memmap_path(monkeypatch, tmp_path):
    monkeypatch.setattr(bench, "IN_MEMORY_LIMIT", 1000)
    a = bench.random_attention(300, 4, scratch_dir=tmp_path)
    assert isinstance(a.mat, np.memmap)
    np.testing.assert_array_equal(np.asarray(a.mat), bench.random_attention(300, 4).mat)
    assert not list(tmp_path.iterdir())


def test_time_blockwise_protocol():
    rec = bench.time_blockwise(512, 32, 0.9, 512, reps=3, warmup=1)
    assert len(rec.seconds) == 3 and rec.reps == 3 and rec.m == 512
    assert rec.median == sorted(rec.seconds)[1]
    with pytest.raises(ValueError):
        bench.time_blockwise(64, 4, 0.9, 65)
    with pytest.raises(ValueError):
        bench.time_blockwise(64, 4, 0.9, 8, reps=2)


def test_sweep_and_dedupe():
    recs = bench.sweep_block_sizes(512, 32, 0.9, [256, 171, 128], reps=3)
    assert [r.m for r in recs] == [256, 171, 128]
    with pytest.warns(UserWarning, match="duplicate"):
        recs = bench.sweep_block_sizes(16, 4, 0.9, [16 // k for k in range(2, 9)] + [16], reps=3)
    assert [r.m for r in recs] == [8, 5, 4, 3, 2, 16]


def test_csv_formats():
    rec = bench.TimingRecord(64, 4, 8, 0.9, "mean", 3, 1, (0.1, 0.3, 0.2))
    raw, summ = io.StringIO(), io.StringIO()
    bench.write_timings_csv([rec], raw)
    bench.write_summary_csv([rec], summ)
    assert raw.getvalue().splitlines()[0] == "n,d,m,gamma,sampler,rep,seconds"
    assert len(raw.getvalue().splitlines()) == 4
    assert summ.getvalue().splitlines() == ["n,d,m,median_s,mad_s", "64,4,8,0.2,0.1"]


def _synthetic(c1, c2, ns=(1024, 4096), ms=(8, 32, 128, 512)):
    return [bench.TimingRecord(n, 64, m, 0.9, "x", 3, 0,
                               (c1 * n * m * 64 + c2 * (n / m) ** 2 * 64,) * 3)
            for n in ns for m in ms]


def test_fit_cost_model_exact_and_errors():
    model = bench.fit_cost_model(_synthetic(2e-9, 5e-9))
    assert model.c1 == pytest.approx(2e-9, rel=1e-9) and model.c2 == pytest.approx(5e-9, rel=1e-9)
    with pytest.raises(ValueError, match="distinct"):
        bench.fit_cost_model(_synthetic(2e-9, 5e-9, ns=(512, 1024, 2048, 4096), ms=(8,)))
    with pytest.raises(ValueError, match="at least 4"):
        bench.fit_cost_model(_synthetic(2e-9, 5e-9)[:3])


def test_predict_optimal_block():
    assert bench.predict_optimal_block(bench.CostModel(1.0, 1.0), 1000) == pytest.approx(2000 ** (1 / 3))
    assert bench.predict_optimal_block(bench.CostModel(1.0, 1e-30), 1000) == 1.0
    a = bench.predict_optimal_block(bench.CostModel(3.0, 7.0), 4096)
    b = bench.predict_optimal_block(bench.CostModel(3.0, 7.0), 8192)
    assert b / a == pytest.approx(2 ** (1 / 3))


@pytest.mark.parametrize("c1,c2", [(1.0, 1.0), (2e-9, 5e-9), (1.0, 37.0), (5.0, 0.01)])
def test_optimal_block_size_is_exhaustive_argmin(c1, c2):
    model = bench.CostModel(c1, c2)
    for n in (1, 3, 50, 999, 4096):
        scan = model.predict(n, 1, np.arange(1, n + 1))
        assert bench.optimal_block_size(model, n) == int(np.argmin(scan)) + 1


def test_fit_scaling_exponent():
    ns = [2048, 4096, 8192, 16384, 32768]
    assert bench.fit_scaling_exponent([(n, 3e-7 * n ** (4 / 3)) for n in ns]) == pytest.approx(4 / 3, abs=1e-6)
    assert bench.fit_scaling_exponent([(n, n ** 2.0) for n in ns]) == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(ValueError, match="factor of 8"):
        bench.fit_scaling_exponent([(n, 1.0) for n in (100, 200, 300, 400)])
    with pytest.raises(ValueError, match="at least 4"):
        bench.fit_scaling_exponent([(1, 1.0), (100, 2.0)])
    with pytest.raises(ValueError, match="positive"):
        bench.fit_scaling_exponent([(1, 1.0), (10, 0.0), (100, 2.0), (1000, 3.0)])


def test_real_sweep_fit_has_positive_coefficients():
    recs = bench.sweep_block_sizes(1024, 64, 0.9, bench.calibration_sizes(1024), "strided", reps=3)
    model = bench.fit_cost_model(recs)
    assert model.c1 > 0 and model.c2 >= 0 and math.isfinite(model.residual_norm)
