"""Wall-clock measurement of the blockwise evaluation and its cost model.

Runtime model for block size ``m``::

    T(n, d; m) = c1 * n * m * d + c2 * (n / m)^2 * d

The first term is the local branch and the second the reduced ``k x k``
system. Minimising over ``m`` gives ``m* = (2 c2 n / c1)^(1/3)``. At that
block size both terms scale as ``n^(4/3) d``.
"""

import csv
import math
import mmap
import os
import statistics
import tempfile
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from ._validation import check_gamma, check_positive_int
from .blockwise import SamplerKind, blockwise_apply
from .resolvent import ResolventConfig
from .tensor_core import CausalAttention, MaskMode

__all__ = [
    "BenchmarkError",
    "TimingRecord",
    "CostModel",
    "random_attention",
    "time_blockwise",
    "sweep_block_sizes",
    "fit_cost_model",
    "predict_optimal_block",
    "optimal_block_size",
    "fit_scaling_exponent",
    "scaling_study",
    "write_timings_csv",
    "write_summary_csv",
    "RAW_HEADER",
    "SUMMARY_HEADER",
]

RAW_HEADER = ["n", "d", "m", "gamma", "sampler", "rep", "seconds"]
SUMMARY_HEADER = ["n", "d", "m", "median_s", "mad_s"]

# Dense matrices above this size are generated into a disk-backed memmap.
IN_MEMORY_LIMIT = int(2.5 * 2**30)
_GEN_CHUNK_ROWS = 256


class BenchmarkError(RuntimeError):
    pass


def _fmt(x):
    return f"{x:.9g}"


@dataclass(frozen=True)
class TimingRecord:
    n: int
    d: int
    m: int
    gamma: float
    sampler: str
    reps: int
    warmup: int
    seconds: tuple

    @property
    def median(self):
        return statistics.median(self.seconds)

    @property
    def mad(self):
        med = self.median
        return statistics.median(abs(s - med) for s in self.seconds)


def random_attention(n, seed, mask=MaskMode.INCLUSIVE, scratch_dir=None):
    """Row-stochastic causal attention from uniform random logits.

    Generation is chunked by rows so peak memory stays near the output size.
    Matrices larger than :data:`IN_MEMORY_LIMIT` are written to a memmap in
    ``scratch_dir``; the file is unlinked immediately and lives only as long
    as the mapping.
    """
    mask = MaskMode.parse(mask)
    n = check_positive_int(n, "n")
    rng = np.random.default_rng(seed)
    nbytes = n * n * 8
    try:
        if nbytes > IN_MEMORY_LIMIT:
            fd, path = tempfile.mkstemp(prefix="blockres-attn-", suffix=".f64", dir=scratch_dir)
            os.close(fd)
            try:
                mat = np.memmap(path, dtype=np.float64, mode="w+", shape=(n, n))
            finally:
                os.unlink(path)
        else:
            mat = np.zeros((n, n))
    except (MemoryError, OSError) as exc:
        raise BenchmarkError(f"cannot allocate a {n} x {n} attention matrix: {exc}") from exc
    offset = -1 if mask is MaskMode.STRICT else 0
    for r0 in range(0, n, _GEN_CHUNK_ROWS):
        r1 = min(n, r0 + _GEN_CHUNK_ROWS)
        width = r1 if mask is MaskMode.INCLUSIVE else r1 - 1
        if width <= 0:
            continue
        block = np.exp(rng.random((r1 - r0, width)))
        block *= np.tri(r1 - r0, width, r0 + offset, dtype=bool)
        total = block.sum(axis=1, keepdims=True)
        np.divide(block, total, out=block, where=total > 0)
        mat[r0:r1, :width] = block
    if isinstance(mat, np.memmap):
        # write back now so page-out does not land inside a timed region
        mat.flush()
        # timed reads hit scattered pages; kernel readahead only thrashes the cache
        if hasattr(mmap, "MADV_RANDOM"):
            mat._mmap.madvise(mmap.MADV_RANDOM)
    return CausalAttention(mat, mask, validate=False)


def time_blockwise(n, d, gamma, m, kind=SamplerKind.MEAN, reps=3, warmup=1, seed=0,
                   attention=None, values=None):
    """Time :func:`~blockres.blockwise.blockwise_apply` on random inputs.

    Inputs are generated from ``seed`` (or passed in) outside the timed
    region. Warm-up runs are discarded.
    """
    n = check_positive_int(n, "n")
    d = check_positive_int(d, "d")
    m = check_positive_int(m, "m")
    reps = check_positive_int(reps, "reps", minimum=3)
    warmup = check_positive_int(warmup, "warmup", minimum=0)
    cfg = ResolventConfig(check_gamma(gamma))
    kind = SamplerKind.parse(kind)
    if m > n:
        raise ValueError(f"block size m={m} exceeds n={n}")
    if attention is None:
        attention = random_attention(n, seed)
    if values is None:
        values = np.random.default_rng([seed, 1]).standard_normal((n, d))
    if attention.n != n or values.shape != (n, d):
        raise ValueError("supplied inputs do not match n and d")
    seconds = []
    try:
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            blockwise_apply(attention, values, cfg, m, kind)
            elapsed = time.perf_counter() - t0
            if i >= warmup:
                seconds.append(elapsed)
    except MemoryError as exc:
        raise BenchmarkError(f"out of memory timing n={n}, d={d}, m={m}") from exc
    return TimingRecord(n, d, m, cfg.gamma, kind.value, reps, warmup, tuple(seconds))


def sweep_block_sizes(n, d, gamma, ms, kind=SamplerKind.MEAN, reps=3, warmup=1, seed=0):
    """Time every block size in ``ms`` on one shared random instance."""
    unique = []
    for m in ms:
        if m in unique:
            warnings.warn(f"duplicate block size m={m} dropped from the sweep", stacklevel=2)
            continue
        unique.append(m)
    attention = random_attention(n, seed)
    values = np.random.default_rng([seed, 1]).standard_normal((n, d))
    return [
        time_blockwise(n, d, gamma, m, kind, reps, warmup, seed, attention, values)
        for m in unique
    ]


@dataclass(frozen=True)
class CostModel:
    """Fitted coefficients of ``c1 n m d + c2 (n/m)^2 d``."""

    c1: float
    c2: float
    residual_norm: float = 0.0
    relative_residual: float = 0.0

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 >= 0):
            raise ValueError(f"cost coefficients must satisfy c1 > 0, c2 >= 0; got {self.c1}, {self.c2}")

    def predict(self, n, d, m):
        n, d, m = (np.asarray(x, dtype=np.float64) for x in (n, d, m))
        return self.c1 * n * m * d + self.c2 * (n / m) ** 2 * d


def cost_features(n, d, m):
    n, d, m = (np.asarray(x, dtype=np.float64) for x in (n, d, m))
    return np.column_stack([n * m * d, (n / m) ** 2 * d])


def fit_cost_model(records):
    """Non-negative least squares of median times on the two cost features.

    Needs at least four records covering at least two block sizes.
    """
    records = list(records)
    if len(records) < 4:
        raise ValueError(f"need at least 4 timing records, got {len(records)}")
    if len({r.m for r in records}) < 2:
        raise ValueError("records must span at least two distinct block sizes")
    feats = cost_features([r.n for r in records], [r.d for r in records], [r.m for r in records])
    times = np.array([r.median for r in records])
    scale = np.abs(feats).max(axis=0)
    scaled = feats / scale
    if np.linalg.matrix_rank(scaled) < 2:
        raise ValueError("degenerate design: the two cost features are collinear on these records")
    coef, _ = nnls(scaled, times)
    coef = coef / scale
    resid = float(np.linalg.norm(feats @ coef - times))
    rel = float(np.sqrt(np.mean((feats @ coef - times) ** 2)) / times.mean())
    if coef[0] <= 0:
        raise ValueError("fitted local-branch coefficient is zero; timings do not grow with m")
    return CostModel(float(coef[0]), float(coef[1]), resid, rel)


def predict_optimal_block(model, n):
    """Continuous minimiser ``(2 c2 n / c1)^(1/3)`` clamped to ``[1, n]``."""
    m_star = (2.0 * model.c2 * n / model.c1) ** (1.0 / 3.0)
    return float(min(max(m_star, 1.0), n))


def optimal_block_size(model, n):
    """Integer block size minimising the fitted model.

    The model is convex in ``m``, so the integer minimiser is the floor or
    the ceiling of the continuous one; the cheaper of the two is returned.
    """
    m_star = predict_optimal_block(model, n)
    candidates = sorted({max(1, math.floor(m_star)), min(n, math.ceil(m_star))})
    costs = [float(model.predict(n, 1, m)) for m in candidates]
    return candidates[int(np.argmin(costs))]


def fit_scaling_exponent(pairs):
    """Least-squares slope of ``log(seconds)`` against ``log(n)``."""
    pairs = list(pairs)
    if len(pairs) < 4:
        raise ValueError(f"need at least 4 (n, seconds) points, got {len(pairs)}")
    ns = np.array([p[0] for p in pairs], dtype=np.float64)
    secs = np.array([p[1] for p in pairs], dtype=np.float64)
    if (ns <= 0).any() or (secs <= 0).any():
        raise ValueError("sizes and times must be positive")
    if ns.max() / ns.min() < 8:
        raise ValueError("sizes must span at least a factor of 8")
    slope, _ = np.polyfit(np.log(ns), np.log(secs), 1)
    return float(slope)


def calibration_sizes(n):
    """Block sizes for fitting the cost model at sequence length ``n``."""
    ms = [2**p for p in range(3, 20) if 2**p <= n // 2]
    ms += [n // k for k in range(2, 9)]
    return sorted(set(m for m in ms if m >= 1))


def scaling_study(ns, d=64, gamma=0.9, kind=SamplerKind.STRIDED, reps=3, warmup=1, seed=0,
                  calibration_ns=None, log=None):
    """Fit the cost model, then time every ``n`` at its predicted best block size.

    Returns ``(model, calibration_records, scaling_records, slope)``.
    """
    ns = sorted(ns)
    calibration_ns = calibration_ns or ns[:2]
    calib = []
    for n in calibration_ns:
        calib += sweep_block_sizes(n, d, gamma, calibration_sizes(n), kind, reps, warmup, seed)
        if log:
            log(f"calibrated at n={n}")
    model = fit_cost_model(calib)
    scaling = []
    for n in ns:
        m = optimal_block_size(model, n)
        attention = random_attention(n, seed)
        rec = time_blockwise(n, d, gamma, m, kind, reps, warmup, seed, attention)
        del attention
        scaling.append(rec)
        if log:
            log(f"n={n} m={m} median={rec.median:.6f}s")
    slope = fit_scaling_exponent([(r.n, r.median) for r in scaling])
    return model, calib, scaling, slope


def write_timings_csv(records, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(RAW_HEADER)
    for r in records:
        for i, s in enumerate(r.seconds):
            writer.writerow([r.n, r.d, r.m, _fmt(r.gamma), r.sampler, i, _fmt(s)])


def write_summary_csv(records, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for r in records:
        writer.writerow([r.n, r.d, r.m, _fmt(r.median), _fmt(r.mad)])
