"""Command-line interface: ``blockres {verify,bench,taskgen,eval}``.

Every command prints its fully resolved configuration first. Machine
readable results (CSV, JSON lines) written to stdout push that header to
stderr instead so the output stays parseable.

Exit codes: 0 success, 1 verification or benchmark failure, 2 usage error.
"""

import argparse
import contextlib
import os
import sys

from . import bench, taskgen, verify
from .blockwise import SamplerKind, _PreparedBlockwise, parse_block_size
from .resolvent import ResolventConfig, resolvent_apply, t_post, t_pre, t_raw
from .sparsify import topk_prune
from .tensor_core import write_brm

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

OPERATORS = ("dense", "blockwise", "local-only", "residual-only", "raw", "post", "pre")


class UsageError(ValueError):
    pass


def parse_sizes(text):
    """``"4096"``, ``"1024,4096"`` or a range ``"2048:32768:x2"`` / ``"64:256:64"``."""
    sizes = []
    for part in text.split(","):
        part = part.strip()
        if ":" not in part:
            sizes.append(int(part))
            continue
        fields = part.split(":")
        if len(fields) != 3:
            raise UsageError(f"bad size range {part!r}; expected start:stop:step or start:stop:xF")
        start, stop, step = int(fields[0]), int(fields[1]), fields[2]
        if step.startswith("x"):
            factor = int(step[1:])
            if factor < 2:
                raise UsageError(f"range factor must be at least 2, got {factor}")
            n = start
            while n <= stop:
                sizes.append(n)
                n *= factor
        else:
            sizes.extend(range(start, stop + 1, int(step)))
    if not sizes or min(sizes) < 1:
        raise UsageError(f"sizes must be positive integers, got {text!r}")
    return sizes


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def print_config(args, stream, **resolved):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(resolved)
    for key in sorted(cfg):
        print(f"# {key} = {cfg[key]}", file=stream)
    stream.flush()


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def cmd_verify(args):
    names = args.suite or list(verify.SUITES)
    unknown = [n for n in names if n not in verify.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(verify.SUITES)}")
    print_config(args, sys.stdout, suite=",".join(names))
    failed = 0
    for result in verify.run_suites(names, seed=args.seed):
        print(result.summary())
        if not result.passed:
            failed += 1
            for msg in result.failures[:3]:
                print(f"    counterexample: {msg}")
            for path in verify.dump_counterexample(result, args.dump_dir):
                print(f"    dumped {path}")
    print(f"{len(names) - failed}/{len(names)} suites passed")
    return EXIT_FAIL if failed else EXIT_OK


def _block_sizes(args, n):
    if args.m:
        return [parse_block_size(text, n) for text in args.m.split(",")]
    divisors = _int_list(args.divisors) if args.divisors else list(range(1, 9))
    if any(k < 1 for k in divisors):
        raise UsageError("divisors must be positive")
    return [max(1, n // k) for k in divisors]


def cmd_bench(args):
    ns = parse_sizes(args.n)
    sampler = args.sampler or ("strided" if args.scaling else "mean")
    log = lambda msg: print(f"# {msg}", file=sys.stderr)  # noqa: E731
    to_stdout = args.out in (None, "-")
    header = sys.stderr if to_stdout else sys.stdout
    if args.scaling:
        if len(ns) < 4:
            raise UsageError("--scaling needs at least 4 sizes, e.g. --n 2048:32768:x2")
        print_config(args, header, n=ns, sampler=sampler)
        model, calib, records, slope = bench.scaling_study(
            ns, args.d, args.gamma, sampler, args.reps, args.warmup, args.seed, log=log)
        with _output(args.out) as fh:
            bench.write_summary_csv(records, fh)
        if args.raw:
            with open(args.raw, "w", newline="") as fh:
                bench.write_timings_csv(calib + records, fh)
        print(f"# cost model c1={model.c1:.6g} c2={model.c2:.6g} rel_residual={model.relative_residual:.3f}",
              file=header)
        print(f"# scaling exponent {slope:.4f}", file=header)
        return EXIT_OK

    plan = {n: _block_sizes(args, n) for n in ns}
    print_config(args, header, n=ns, sampler=sampler, block_sizes=plan)
    records = []
    for n in ns:
        records += bench.sweep_block_sizes(n, args.d, args.gamma, plan[n], sampler, args.reps,
                                           args.warmup, args.seed)
    with _output(args.out) as fh:
        bench.write_summary_csv(records, fh)
    if args.raw:
        with open(args.raw, "w", newline="") as fh:
            bench.write_timings_csv(records, fh)
    return EXIT_OK


def cmd_taskgen(args):
    if args.kind == "toy":
        params = {"num_blocks": args.blocks, "block_size": args.block_size}
    else:
        params = {"num_boxes": args.boxes, "num_ops": args.ops, "num_items": args.items,
                  "put_ratio": args.put_ratio, "remove_ratio": args.remove_ratio}
    header = sys.stderr if args.out in (None, "-") else sys.stdout
    print_config(args, header)
    instances = taskgen.generate_tasks(args.kind, args.seed, args.count, **params)
    with _output(args.out) as fh:
        taskgen.write_tasks(instances, fh)
    if args.export_gold:
        os.makedirs(args.export_gold, exist_ok=True)
        for i, inst in enumerate(instances):
            gold = taskgen.gold_attention(inst).attention.mat
            write_brm(os.path.join(args.export_gold, f"{args.kind}-{i:05d}.brm"), gold)
    return EXIT_OK


def _apply_operator(op, a, v, gamma, m, sampler):
    if op == "dense":
        return resolvent_apply(a, v, gamma)
    if op == "raw":
        return t_raw(a, v)
    if op == "post":
        return t_post(a, v)
    if op == "pre":
        return t_pre(a, v)
    out = _PreparedBlockwise(a, parse_block_size(m, a.n), SamplerKind.parse(sampler)).apply(v, gamma)
    return {"blockwise": out.y, "local-only": out.y_blk, "residual-only": out.y_res}[op]


def cmd_eval(args):
    with open(args.tasks) as fh:
        instances = taskgen.read_tasks(fh)
    if not instances:
        raise UsageError(f"{args.tasks} holds no instances")
    print_config(args, sys.stdout)
    outputs = []
    for inst in instances:
        a = taskgen.gold_attention(inst).attention
        if args.topk is not None:
            a = topk_prune(a, args.topk)
        outputs.append(_apply_operator(args.op, a, taskgen.origin_values(inst), args.gamma,
                                       args.m, args.sampler))
    acc, em = taskgen.score_instances(outputs, instances)
    print(f"op={args.op} Acc={100 * acc:.2f}% EM={100 * em:.2f}% instances={len(instances)}")
    return EXIT_OK


def _gamma(text):
    try:
        return ResolventConfig(float(text)).gamma
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="blockres", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suite", action="append", help="suite name; repeatable (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-dir", default="counterexamples",
                   help="where failing inputs are written as BRM1")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time the blockwise evaluation")
    p.add_argument("--n", default="4096", help="size, list or range such as 2048:32768:x2")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--gamma", type=_gamma, default=0.9)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--m", help="block sizes, e.g. 64,n//3 (default: divisors 1..8)")
    group.add_argument("--divisors", help="sweep m = n//K for each K, e.g. 1,2,3")
    p.add_argument("--sampler", choices=[k.value for k in SamplerKind],
                   help="default: mean for sweeps, strided for --scaling")
    p.add_argument("--scaling", action="store_true",
                   help="fit the cost model, time each n at its optimal m and fit the exponent")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="summary CSV path (default: stdout)")
    p.add_argument("--raw", help="per-repetition CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("taskgen", help="generate entity-tracking tasks as JSON lines")
    p.add_argument("kind", choices=["toy", "boxes"])
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=16, help="toy: number of blocks")
    p.add_argument("--block-size", type=int, default=8, help="toy: tokens per block")
    p.add_argument("--boxes", type=int, default=7, help="boxes: number of boxes")
    p.add_argument("--ops", type=int, default=31, help="boxes: number of operations")
    p.add_argument("--items", type=int, default=None, help="boxes: number of items (default: boxes)")
    p.add_argument("--put-ratio", type=float, default=0.0)
    p.add_argument("--remove-ratio", type=float, default=0.0)
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--export-gold", metavar="DIR", help="also write gold attention as BRM1 files")
    p.set_defaults(func=cmd_taskgen)

    p = sub.add_parser("eval", help="score an operator on gold routing")
    p.add_argument("--tasks", required=True, help="JSON-lines task file")
    p.add_argument("--op", choices=OPERATORS, default="dense")
    p.add_argument("--gamma", type=_gamma, default=0.9)
    p.add_argument("--m", default="n//3", help="block size for the blockwise operators")
    p.add_argument("--sampler", choices=[k.value for k in SamplerKind], default="mean")
    p.add_argument("--topk", type=int, default=None, help="prune gold attention to k entries per row")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"blockres {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except bench.BenchmarkError as exc:
        print(f"blockres {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
