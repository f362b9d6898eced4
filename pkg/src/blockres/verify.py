"""Randomised property suites behind ``blockres verify``.

Every suite takes a seed, runs its checks and returns a :class:`SuiteResult`.
A failing check records a short message and, when there is one, the
offending matrices so they can be written out as BRM1 files.
"""

import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import bench, taskgen
from .blockwise import (
    _PreparedBlockwise,
    SamplerKind,
    block_split,
    blockwise_apply,
    local_branch,
    make_plan,
    make_samplers,
    parse_block_size,
    residual_branch,
)
from .resolvent import (
    ResolventConfig,
    default_t_max,
    neumann_oracle,
    resolvent_apply,
    t_post,
    t_pre,
)
from .sparsify import TopKConfig, mass_coverage, topk_prune
from .tensor_core import (
    CausalAttention,
    MaskMode,
    causal_softmax,
    forward_substitution,
    write_brm,
)

__all__ = ["SuiteResult", "SUITES", "run_suites", "dump_counterexample", "random_attention"]

GAMMAS = (0.0, 0.25, 0.5, 0.9, 0.99)
MASKS = (MaskMode.STRICT, MaskMode.INCLUSIVE)
SAMPLERS = (SamplerKind.MEAN, SamplerKind.STRIDED)


@dataclass
class SuiteResult:
    name: str
    checks: int = 0
    failures: list = field(default_factory=list)
    counterexample: dict = field(default_factory=dict, repr=False)
    metrics: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.failures

    def check(self, ok, message, **matrices):
        self.checks += 1
        if not ok:
            self.failures.append(message)
            if not self.counterexample:
                self.counterexample = {k: np.asarray(v, dtype=np.float64) for k, v in matrices.items()}
        return ok

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        extra = "".join(f" {k}={v}" for k, v in self.metrics.items())
        return f"{status} {self.name}: {self.checks - len(self.failures)}/{self.checks} checks{extra}"


def random_attention(rng, n, mask, scale=2.0):
    return causal_softmax(rng.normal(scale=scale, size=(n, n)), mask)


def _inf_norm(x):
    return float(np.max(np.abs(x))) if x.size else 0.0


def _as_2d(v):
    v = np.asarray(v, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def _case_grid(seed, reps, ns=(4, 16, 64), ds=(1, 8), gammas=GAMMAS):
    rng = np.random.default_rng(seed)
    for rep, n, d, gamma, mask in itertools.product(range(reps), ns, ds, gammas, MASKS):
        a = random_attention(rng, n, mask)
        v = rng.standard_normal((n, d))
        yield a, v, gamma


def suite_softmax(seed=0, reps=10):
    res = SuiteResult("softmax")
    rng = np.random.default_rng(seed)
    for _, n, mask in itertools.product(range(reps), (1, 2, 5, 33, 64), MASKS):
        logits = rng.normal(scale=30.0, size=(n, n))
        a = causal_softmax(logits, mask)
        mat = a.mat
        allowed = mask.permitted(n)
        res.check(np.all(mat[~allowed] == 0.0), f"masked entry nonzero (n={n}, {mask.value})", logits=logits)
        live = allowed.any(axis=1)
        err = np.abs(mat[live].sum(axis=1) - 1.0).max(initial=0.0)
        res.check(err <= 1e-12, f"row sum off by {err:.3g} (n={n}, {mask.value})", logits=logits)
        res.check(np.all(mat[~live] == 0.0), f"row with no permitted entry is nonzero (n={n})", logits=logits)
    return res


def suite_solve(seed=0, reps=10):
    """Triangular solves, the two undamped operators and gamma-continuity."""
    res = SuiteResult("solve")
    rng = np.random.default_rng(seed)
    for _, n, mask, gamma in itertools.product(range(reps), (1, 7, 32, 33, 64), MASKS, GAMMAS):
        a = random_attention(rng, n, mask)
        b = rng.standard_normal((n, 3))
        lower = np.eye(n) - gamma * a.mat
        x = forward_substitution(lower, b)
        rel = _inf_norm(lower @ x - b) / max(_inf_norm(b), 1e-300)
        res.check(rel <= 1e-10, f"forward substitution residual {rel:.3g} (n={n}, gamma={gamma})",
                  l=lower, b=b)
    for _, n in itertools.product(range(reps), (2, 16, 64)):
        a = random_attention(rng, n, MaskMode.STRICT)
        v = rng.standard_normal((n, 4))
        diff = _inf_norm(t_post(a, v) - t_pre(a, v))
        res.check(diff <= 1e-10, f"t_post and t_pre differ by {diff:.3g} (n={n})", a=a.mat, v=v)
    for _, n, mask in itertools.product(range(reps), (4, 16, 64), MASKS):
        a = random_attention(rng, n, mask)
        v = rng.standard_normal((n, 2))
        gamma = float(rng.uniform(0.0, 0.98))
        diff = _inf_norm(resolvent_apply(a, v, gamma) - resolvent_apply(a, v, gamma + 1e-9))
        res.check(diff <= 1e-6, f"gamma-continuity broken by {diff:.3g}", a=a.mat, v=v)
    return res


def suite_oracle(seed=0, reps=4, tol=1e-10):
    """Resolvent against the truncated series on the full case grid."""
    res = SuiteResult("oracle")
    worst = 0.0
    for a, v, gamma in _case_grid(seed, reps):
        t_max = a.n if a.mask is MaskMode.STRICT else default_t_max(gamma)
        diff = _inf_norm(resolvent_apply(a, v, gamma) - neumann_oracle(a, v, gamma, t_max))
        worst = max(worst, diff)
        res.check(diff <= tol, f"oracle mismatch {diff:.3g} (n={a.n}, gamma={gamma}, {a.mask.value})",
                  a=a.mat, v=v)
    res.metrics["max_err"] = f"{worst:.2e}"
    return res


def suite_degeneracy(seed=0, reps=4, tol=1e-12):
    """One tile covering the whole sequence is the dense operator."""
    res = SuiteResult("degeneracy")
    worst = 0.0
    for a, v, gamma in _case_grid(seed, reps):
        dense = resolvent_apply(a, v, gamma)
        for kind in SAMPLERS:
            out = blockwise_apply(a, v, gamma, a.n, kind)
            diff = _inf_norm(out.y - dense)
            worst = max(worst, diff)
            res.check(diff <= tol and not out.y_res.any(),
                      f"m=n differs from dense by {diff:.3g} (n={a.n}, gamma={gamma}, {kind.value})",
                      a=a.mat, v=v)
    res.metrics["max_err"] = f"{worst:.2e}"
    return res


def _block_diagonal(rng, n, m, mask):
    mat = np.zeros((n, n))
    for s in range(0, n, m):
        e = min(n, s + m)
        mat[s:e, s:e] = random_attention(rng, e - s, mask).mat
    return CausalAttention(mat, mask)


def suite_exact_blocks(seed=0, reps=6):
    """Block-diagonal inputs are exact, and the split always reassembles."""
    res = SuiteResult("exact-blocks")
    rng = np.random.default_rng(seed)
    for _, n, mask, kind in itertools.product(range(reps), (5, 16, 37, 64), MASKS, SAMPLERS):
        m = int(rng.integers(1, n + 1))
        gamma = float(rng.choice(GAMMAS))
        v = rng.standard_normal((n, 3))
        plan = make_plan(n, m)

        a = _block_diagonal(rng, n, m, mask)
        out = blockwise_apply(a, v, gamma, m, kind)
        per_tile = np.vstack([resolvent_apply(CausalAttention(a.mat[s:e, s:e], mask), v[s:e], gamma)
                              for s, e in plan.tiles])
        res.check(not out.y_res.any(), f"y_res nonzero on block-diagonal input (n={n}, m={m})",
                  a=a.mat, v=v)
        res.check(np.array_equal(out.y, per_tile),
                  f"block-diagonal output not bit-identical to per-tile resolvents (n={n}, m={m})",
                  a=a.mat, v=v)

        a = random_attention(rng, n, mask)
        out = blockwise_apply(a, v, gamma, m, kind)
        res.check(np.array_equal(out.y, out.y_blk + out.y_res),
                  f"y is not bit-identical to y_blk + y_res (n={n}, m={m})", a=a.mat, v=v)
        tiles, a_res = block_split(a, plan)
        rebuilt = a_res.copy()
        for (s, e), tile in zip(plan.tiles, tiles):
            rebuilt[s:e, s:e] += tile
        res.check(np.array_equal(rebuilt, a.mat), f"BlockDiag(tiles) + A_res != A (n={n}, m={m})",
                  a=a.mat)
        cfg = ResolventConfig(gamma)
        samplers = make_samplers(plan, kind)
        res.check(np.array_equal(local_branch(tiles, v, cfg, plan), out.y_blk)
                  and np.array_equal(residual_branch(a_res, v, cfg, samplers), out.y_res),
                  f"stand-alone branches disagree with blockwise_apply (n={n}, m={m})", a=a.mat, v=v)
    return res


def suite_causality(seed=0, trials=100):
    """Perturbing one value row never reaches earlier rows or earlier tiles."""
    res = SuiteResult("causality")
    rng = np.random.default_rng(seed)
    ragged = 0
    for trial in range(trials):
        n = int(rng.integers(2, 65))
        # every other trial forces a block size that does not divide n
        if trial % 2 == 0:
            choices = [m for m in range(2, n) if n % m]
            m = int(rng.choice(choices)) if choices else int(rng.integers(1, n + 1))
        else:
            m = int(rng.integers(1, n + 1))
        ragged += n % m != 0
        mask = MASKS[(trial // 2) % 2]
        kind = SAMPLERS[(trial // 4) % 2]
        gamma = float(rng.choice(GAMMAS))
        a = random_attention(rng, n, mask)
        v = rng.standard_normal((n, 3))
        j = int(rng.integers(0, n))
        v2 = v.copy()
        v2[j] += rng.standard_normal(3) * 10.0
        plan = make_plan(n, m)

        base, pert = blockwise_apply(a, v, gamma, m, kind), blockwise_apply(a, v2, gamma, m, kind)
        changed = np.flatnonzero(np.any(base.y != pert.y, axis=1))
        first_allowed = j + 1 if mask is MaskMode.STRICT else j
        res.check(changed.size == 0 or changed.min() >= first_allowed,
                  f"row {changed.min() if changed.size else -1} changed after perturbing row {j} "
                  f"(n={n}, m={m}, {mask.value})", a=a.mat, v=v, v_perturbed=v2)
        res_changed = np.flatnonzero(np.any(base.y_res != pert.y_res, axis=1))
        tile_end = plan.tiles[plan.tile_of(j)][1]
        res.check(res_changed.size == 0 or res_changed.min() >= tile_end,
                  f"y_res changed inside or before tile({j}) (n={n}, m={m})",
                  a=a.mat, v=v, v_perturbed=v2)
        dense_changed = np.flatnonzero(np.any(resolvent_apply(a, v, gamma) != resolvent_apply(a, v2, gamma),
                                              axis=1))
        res.check(dense_changed.size == 0 or dense_changed.min() >= first_allowed,
                  f"dense row changed before {j} (n={n}, {mask.value})", a=a.mat, v=v, v_perturbed=v2)
    res.metrics["ragged"] = ragged
    return res


def suite_hop_weights(seed=0, count=50, gammas=(0.25, 0.5, 0.9, 0.99), tol=1e-12):
    """Coefficient on the depth-t ancestor is ``(1-gamma) gamma^(t-1)``."""
    res = SuiteResult("hop-weights")
    max_depth = 0
    for inst in taskgen.generate_tasks("toy", seed, count):
        gold = taskgen.gold_attention(inst)
        n = inst.n
        eye = np.eye(n)
        for gamma in gammas:
            s = resolvent_apply(gold.attention, eye, gamma)
            expected = np.zeros((n, n))
            for i in range(n):
                node, t = inst.pointers[i], 1
                while node >= 0:
                    expected[i, node] = (1 - gamma) * gamma ** (t - 1)
                    max_depth = max(max_depth, t)
                    node, t = inst.pointers[node], t + 1
            err = _inf_norm(s - expected)
            res.check(err <= tol, f"hop weights off by {err:.3g} (seed={inst.seed}, gamma={gamma})",
                      a=gold.attention.mat)
    res.metrics["max_depth"] = max_depth
    return res


def _dense_outputs(instances, gamma):
    outs = []
    for inst in instances:
        gold = taskgen.gold_attention(inst)
        outs.append(resolvent_apply(gold.attention, taskgen.origin_values(inst), gamma))
    return outs


def suite_provenance(seed=0, count=1000, gamma=0.9):
    """Dense resolvent on gold routing reproduces the simulators exactly."""
    res = SuiteResult("provenance")
    families = {
        "toy": taskgen.generate_tasks("toy", seed, count),
        "boxes": taskgen.generate_tasks("boxes", seed, count, num_boxes=7, num_ops=31),
        "boxes-mixed": taskgen.generate_tasks("boxes", seed + 1, count // 4, num_boxes=7, num_ops=31,
                                              put_ratio=0.2, remove_ratio=0.1),
    }
    for name, instances in families.items():
        outs = _dense_outputs(instances, gamma)
        for inst, y in zip(instances, outs):
            acc, em = taskgen.readout_accuracy(y, inst)
            if not res.check(em == 1.0, f"{name} seed={inst.seed}: accuracy {acc:.4f}",
                             a=taskgen.gold_attention(inst).attention.mat,
                             v=taskgen.origin_values(inst)):
                break
        acc, em = taskgen.score_instances(outs, instances)
        res.metrics[name] = f"{100 * acc:.2f}/{100 * em:.2f}"
    return res


def ablation_scores(instances, gamma=0.9, m="n//3", kind=SamplerKind.MEAN):
    """Token accuracy and EM for dense, full blockwise, local-only and residual-only."""
    outs = {"dense": [], "full": [], "local-only": [], "residual-only": [], "m=n": []}
    for inst in instances:
        a = taskgen.gold_attention(inst).attention
        v = taskgen.origin_values(inst)
        outs["dense"].append(resolvent_apply(a, v, gamma))
        parts = _PreparedBlockwise(a, parse_block_size(m, a.n), SamplerKind.parse(kind)).apply(v, gamma)
        outs["full"].append(parts.y)
        outs["local-only"].append(parts.y_blk)
        outs["residual-only"].append(parts.y_res)
        outs["m=n"].append(blockwise_apply(a, v, gamma, a.n, kind).y)
    return {k: taskgen.score_instances(o, instances) for k, o in outs.items()}, outs


def suite_ablation(seed=0, count=200, gamma=0.9, m="n//3", kind=SamplerKind.MEAN):
    """Local-only must lose exact matches that local plus residual recovers."""
    res = SuiteResult("ablation")
    instances = taskgen.generate_tasks("toy", seed, count)
    scores, outs = ablation_scores(instances, gamma, m, kind)
    for key, (acc, em) in scores.items():
        res.metrics[key] = f"{100 * acc:.2f}/{100 * em:.2f}"
    res.check(all(np.array_equal(x, y) for x, y in zip(outs["m=n"], outs["dense"])),
              "blockwise at m=n differs from dense")
    em_local, em_full, em_dense = scores["local-only"][1], scores["full"][1], scores["dense"][1]
    res.check(em_local < em_full, f"EM(local-only)={em_local:.4f} is not below EM(full)={em_full:.4f}")
    bad = next((i for i, inst in enumerate(instances)
                if taskgen.readout_accuracy(outs["full"][i], inst)[1] < 1.0), None)
    res.check(em_full == em_dense, f"EM(full)={em_full:.4f} differs from EM(dense)={em_dense:.4f}",
              **({} if bad is None else {
                  "a": taskgen.gold_attention(instances[bad]).attention.mat,
                  "v": taskgen.origin_values(instances[bad]),
                  "y": outs["full"][bad],
              }))
    return res


def weak_bridge_instance():
    """Strict chain 3 -> 2 -> 1 -> 0 with a low-weight bridge at 2 -> 1.

    Token 2 attends 0.7 to token 0 and 0.3 to token 1, so top-1 pruning keeps
    2 -> 0 and drops the bridge. With the value on token 1 the two-hop path
    3 -> 2 -> 1 carries mass 0.3 before pruning and none after.
    """
    mat = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.7, 0.3, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    return CausalAttention(mat, MaskMode.STRICT)


def suite_topk(seed=0, reps=10):
    res = SuiteResult("topk")
    rng = np.random.default_rng(seed)
    for _, n, mask in itertools.product(range(reps), (3, 16, 64), MASKS):
        a = random_attention(rng, n, mask)
        coverage = [mass_coverage(a, k) for k in range(1, n + 1)]
        res.check(all(np.all(hi >= lo) for lo, hi in zip(coverage, coverage[1:])),
                  "mass_coverage decreases in k", a=a.mat)
        for k in (1, 2, 5):
            pruned = topk_prune(a, TopKConfig(k)).mat
            kept = pruned.any(axis=1)
            err = np.abs(pruned[kept].sum(axis=1) - 1.0).max(initial=0.0)
            res.check(err <= 1e-12, f"pruned row sum off by {err:.3g} (k={k})", a=a.mat)
            res.check(np.count_nonzero(pruned, axis=1).max() <= k, f"support exceeds k={k}", a=a.mat)
        live = a.mat.any(axis=1)
        top1 = topk_prune(a, 1).mat
        res.check(np.array_equal(np.argmax(top1[live], 1), np.argmax(a.mat[live], 1)),
                  "top-1 pruning moved a row argmax", a=a.mat)

    a = weak_bridge_instance()
    v = np.zeros((4, 1))
    v[1] = 1.0
    before = t_post(a, v)[3, 0]
    after = t_post(topk_prune(a, 1), v)[3, 0]
    res.check(before > 0, "weak-bridge path carries no mass before pruning", a=a.mat)
    res.check(after == 0.0, f"weak-bridge path keeps mass {after} after top-1", a=a.mat)
    res.metrics["bridge_mass"] = f"{before:.3g}->{after:.3g}"

    for inst in taskgen.generate_tasks("toy", seed, 20) + taskgen.generate_tasks("boxes", seed, 20):
        gold = taskgen.gold_attention(inst).attention
        res.check(np.array_equal(topk_prune(gold, 1).mat, gold.mat), "top-1 changed gold routing",
                  a=gold.mat)
    return res


def suite_cost_model(seed=0, c1=2e-9, c2=5e-9, noise=1e-3, rel_tol=0.01):
    """Known coefficients are recovered and the integer optimum is exact."""
    res = SuiteResult("cost-model")
    rng = np.random.default_rng(seed)
    records = []
    for n in (1024, 2048, 4096):
        for m in sorted({8, 16, 32, 64, 128, 256, n // 8, n // 3, n // 2, n}):
            t = c1 * n * m * 64 + c2 * (n / m) ** 2 * 64
            times = tuple(t * (1.0 + noise * rng.standard_normal(3)))
            records.append(bench.TimingRecord(n, 64, m, 0.9, "synthetic", 3, 0, times))
    model = bench.fit_cost_model(records)
    e1, e2 = abs(model.c1 / c1 - 1), abs(model.c2 / c2 - 1)
    res.metrics["rel_err"] = f"{e1:.1e}/{e2:.1e}"
    res.check(e1 <= rel_tol and e2 <= rel_tol, f"coefficients off by {e1:.3g}, {e2:.3g}")
    for n in (1, 2, 7, 100, 1000, 4096, 8192, 32768):
        for mdl in (model, bench.CostModel(c1, c2), bench.CostModel(1.0, 1.0), bench.CostModel(1.0, 1e-9)):
            scan = mdl.predict(n, 64, np.arange(1, n + 1))
            best = int(np.argmin(scan)) + 1
            m_real = bench.predict_optimal_block(mdl, n)
            got = bench.optimal_block_size(mdl, n)
            res.check(got == best and best in (math.floor(m_real), math.ceil(m_real)),
                      f"integer optimum {got} != exhaustive argmin {best} (n={n}, m*={m_real:.4f})")
    return res


def suite_samplers(seed=0, reps=5):
    res = SuiteResult("samplers")
    rng = np.random.default_rng(seed)
    for _, n, kind in itertools.product(range(reps), (1, 6, 17, 64), SAMPLERS):
        m = int(rng.integers(1, n + 1))
        plan = make_plan(n, m)
        s = make_samplers(plan, kind)
        x = rng.standard_normal((n, 2))
        p, u = s.p.toarray(), s.u.toarray()
        res.check(np.allclose(p.sum(axis=1), 1.0, atol=1e-15, rtol=0), "P rows do not sum to 1")
        res.check(np.allclose(s.down(x), p @ x, atol=1e-12, rtol=0), "down() disagrees with P")
        res.check(np.array_equal(s.up(x[: plan.k]), u @ x[: plan.k]), "up() disagrees with U")
        a = random_attention(rng, n, MaskMode.INCLUSIVE)
        _, a_res = block_split(a, plan)
        reduced = s.reduce(a.mat)
        res.check(np.allclose(reduced, p @ a_res @ p.T, atol=1e-12, rtol=0),
                  f"reduced matrix differs from P A_res P^T (n={n}, m={m})", a=a.mat)
        res.check(not np.triu(reduced).any(), "reduced matrix not strictly lower", a=a.mat)
        y_res = residual_branch(a_res, x, ResolventConfig(0.9), s)
        s0, e0 = plan.tiles[0]
        res.check(not y_res[s0:e0].any(), "y_res nonzero in tile 0", a=a.mat)
        res.check(all(np.all(y_res[st:en] == y_res[st]) for st, en in plan.tiles),
                  "y_res rows differ inside a tile", a=a.mat)
    return res


SUITES = {
    "softmax": suite_softmax,
    "solve": suite_solve,
    "oracle": suite_oracle,
    "degeneracy": suite_degeneracy,
    "exact-blocks": suite_exact_blocks,
    "causality": suite_causality,
    "hop-weights": suite_hop_weights,
    "provenance": suite_provenance,
    "ablation": suite_ablation,
    "topk": suite_topk,
    "cost-model": suite_cost_model,
    "samplers": suite_samplers,
}


def dump_counterexample(result, directory):
    """Write a failing suite's matrices as ``<suite>-<name>.brm``; return the paths."""
    paths = []
    if not result.counterexample:
        return paths
    os.makedirs(directory, exist_ok=True)
    for key, mat in result.counterexample.items():
        path = os.path.join(directory, f"{result.name}-{key}.brm")
        write_brm(path, _as_2d(mat))
        paths.append(path)
    return paths


def run_suites(names=None, seed=0):
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    for name in names:
        yield SUITES[name](seed=seed)
