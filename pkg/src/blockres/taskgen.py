"""Synthetic entity-tracking tasks with exact simulators.

Two task families:

``toy``
    Chained lookups. ``num_blocks`` blocks of ``block_size`` tokens; every
    token after the first block points to one token of the previous block
    and the pointers of a block form a permutation. The answer for a token
    is the first-block position reached by following pointers.

``boxes``
    Boxes holding items, then a sequence of operations. ``move`` transfers
    the entire content of the source box into the destination (leaving the
    source empty); ``put`` adds a fresh item to a box; ``remove`` empties a
    box. The token stream is one token per box for the initial state, then
    one token per operation.

Each instance also yields gold one-hop routing (a strict causal attention
matrix whose state-carrying rows are one-hot) and a canonical value matrix
(one one-hot dimension per chain origin). Running a multi-hop operator on
the two and taking the argmax per row decodes the answer.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int
from .tensor_core import CausalAttention, MaskMode

__all__ = [
    "ToyChainInstance",
    "BoxOp",
    "BoxesInstance",
    "GoldRouting",
    "gen_toy_chain",
    "gen_boxes",
    "replay_boxes",
    "simulate_boxes",
    "gold_attention",
    "origin_values",
    "readout_accuracy",
    "score_instances",
    "instance_seed",
    "generate_tasks",
    "write_tasks",
    "read_tasks",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


def instance_seed(seed, index):
    """Independent 32-bit seed for the ``index``-th instance of a run."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class ToyChainInstance:
    seed: int
    num_blocks: int
    block_size: int
    pointers: np.ndarray  # absolute index of the pointed-to token, -1 in block 0

    @property
    def n(self):
        return self.num_blocks * self.block_size

    def chain_of(self, token):
        """Ancestors of ``token``, nearest first, ending at its origin."""
        chain = []
        cur = int(self.pointers[token])
        while cur >= 0:
            chain.append(cur)
            cur = int(self.pointers[cur])
        return chain

    @property
    def targets(self):
        """First-block position reached from every token (itself in block 0)."""
        out = np.arange(self.n)
        for t in range(self.block_size, self.n):
            out[t] = out[self.pointers[t]]
        return out

    def __eq__(self, other):
        return (
            isinstance(other, ToyChainInstance)
            and (self.seed, self.num_blocks, self.block_size)
            == (other.seed, other.num_blocks, other.block_size)
            and np.array_equal(self.pointers, other.pointers)
        )


def gen_toy_chain(seed, num_blocks=16, block_size=8):
    """Sample a chained-lookup instance.

    The defaults give 128 tokens and chains of up to 15 hops.
    """
    num_blocks = check_positive_int(num_blocks, "num_blocks", minimum=2)
    block_size = check_positive_int(block_size, "block_size")
    rng = np.random.default_rng(seed)
    pointers = np.full(num_blocks * block_size, -1, dtype=np.int64)
    for b in range(1, num_blocks):
        perm = rng.permutation(block_size)
        pointers[b * block_size : (b + 1) * block_size] = (b - 1) * block_size + perm
    return ToyChainInstance(int(seed), num_blocks, block_size, pointers)


@dataclass(frozen=True)
class BoxOp:
    kind: str  # "move" | "put" | "remove"
    src: int = -1
    dst: int = -1

    def to_json(self):
        return [self.kind, self.src, self.dst]

    def describe(self):
        if self.kind == "move":
            return f"move the contents of box {self.src} to box {self.dst}"
        if self.kind == "put":
            return f"put a new item in box {self.dst}"
        return f"empty box {self.src}"


@dataclass(frozen=True, eq=False)
class BoxesInstance:
    seed: int
    num_boxes: int
    items: np.ndarray  # initial box of each item
    ops: tuple
    final_state: dict = field(default_factory=dict)
    provenance: tuple = ()

    @property
    def n(self):
        return self.num_boxes + len(self.ops)

    @property
    def token_stream(self):
        toks = []
        for b in range(self.num_boxes):
            held = sorted(np.flatnonzero(self.items == b).tolist())
            toks.append(f"box {b} holds {held}")
        toks.extend(op.describe() for op in self.ops)
        return toks

    def __eq__(self, other):
        return (
            isinstance(other, BoxesInstance)
            and (self.seed, self.num_boxes, self.ops, self.final_state, self.provenance)
            == (other.seed, other.num_boxes, other.ops, other.final_state, other.provenance)
            and np.array_equal(self.items, other.items)
        )


def replay_boxes(num_boxes, items, ops):
    """Brute-force replay of box contents.

    Returns the final ``{box: sorted items}`` map and, for every operation,
    the set of items it moved (empty for non-moves).
    """
    contents = [set() for _ in range(num_boxes)]
    for item, box in enumerate(items):
        if not 0 <= box < num_boxes:
            raise ValueError(f"item {item} starts in box {box}, outside [0, {num_boxes})")
        contents[box].add(item)
    next_item = len(items)
    moved = []
    for op in ops:
        for box in (op.src, op.dst):
            if box != -1 and not 0 <= box < num_boxes:
                raise ValueError(f"{op} refers to a box outside [0, {num_boxes})")
        if op.kind == "move":
            carried = set(contents[op.src])
            contents[op.dst] |= carried
            contents[op.src] = set()
            moved.append(frozenset(carried))
        elif op.kind == "put":
            contents[op.dst].add(next_item)
            next_item += 1
            moved.append(frozenset())
        elif op.kind == "remove":
            contents[op.src] = set()
            moved.append(frozenset())
        else:
            raise ValueError(f"unknown operation {op.kind!r}")
    final = {b: sorted(c) for b, c in enumerate(contents)}
    return final, moved


def simulate_boxes(instance):
    """Final ``{box: sorted items}`` obtained by replaying the operations."""
    final, _ = replay_boxes(instance.num_boxes, instance.items, instance.ops)
    return final


def _box_routing(num_boxes, items, ops):
    """Per-token provenance pointer, origin flag and lot (items introduced)."""
    n = num_boxes + len(ops)
    pointer = np.full(n, -1, dtype=np.int64)
    is_origin = np.zeros(n, dtype=bool)
    lots = [frozenset()] * n
    defined_by = [None] * num_boxes  # token that last set a nonempty box content
    for b in range(num_boxes):
        held = frozenset(np.flatnonzero(np.asarray(items) == b).tolist())
        if held:
            is_origin[b] = True
            lots[b] = held
            defined_by[b] = b
    next_item = len(items)
    for i, op in enumerate(ops):
        tok = num_boxes + i
        if op.kind == "move":
            src_def = defined_by[op.src]
            if src_def is not None:
                pointer[tok] = src_def
                defined_by[op.dst] = tok
                defined_by[op.src] = None
        elif op.kind == "put":
            is_origin[tok] = True
            lots[tok] = frozenset([next_item])
            next_item += 1
            defined_by[op.dst] = tok
        else:
            defined_by[op.src] = None
    return pointer, is_origin, lots


def gen_boxes(seed, num_boxes=7, num_ops=31, num_items=None, put_ratio=0.0, remove_ratio=0.0):
    """Sample a boxes instance.

    Items are placed in uniformly random boxes. Each operation is a move
    (over ordered pairs of distinct boxes) unless the op-mix ratios ask for
    puts or removes.
    """
    num_boxes = check_positive_int(num_boxes, "num_boxes", minimum=2)
    num_ops = check_positive_int(num_ops, "num_ops", minimum=0)
    num_items = num_boxes if num_items is None else check_positive_int(num_items, "num_items", 0)
    if put_ratio < 0 or remove_ratio < 0 or put_ratio + remove_ratio > 1:
        raise ValueError("op-mix ratios must be non-negative and sum to at most 1")
    rng = np.random.default_rng(seed)
    items = rng.integers(0, num_boxes, size=num_items)
    ops = []
    for _ in range(num_ops):
        u = rng.random()
        if u < put_ratio:
            ops.append(BoxOp("put", dst=int(rng.integers(num_boxes))))
        elif u < put_ratio + remove_ratio:
            ops.append(BoxOp("remove", src=int(rng.integers(num_boxes))))
        else:
            src = int(rng.integers(num_boxes))
            dst = int(rng.integers(num_boxes - 1))
            dst += dst >= src
            ops.append(BoxOp("move", src, dst))
    ops = tuple(ops)
    final, _ = replay_boxes(num_boxes, items, ops)
    pointer, _, _ = _box_routing(num_boxes, items, ops)
    provenance = tuple(int(p) for p in pointer[num_boxes:])
    return BoxesInstance(int(seed), num_boxes, items, ops, final, provenance)


@dataclass(frozen=True, eq=False)
class GoldRouting:
    """One-hop routing graph of an instance.

    ``attention`` is strict-causal; row ``t`` is one-hot on the token ``t``
    takes its state from, or all zero for origins and tokens that carry no
    state. ``depth`` is the hop count to the chain origin (0 for origins,
    -1 for stateless tokens).
    """

    attention: CausalAttention
    depth: np.ndarray


def _routing_arrays(instance):
    if isinstance(instance, ToyChainInstance):
        pointer = instance.pointers
        is_origin = pointer < 0
        return pointer, is_origin
    if isinstance(instance, BoxesInstance):
        pointer, is_origin, _ = _box_routing(instance.num_boxes, instance.items, instance.ops)
        return pointer, is_origin
    raise TypeError(f"unsupported instance type {type(instance).__name__}")


def gold_attention(instance):
    pointer, is_origin = _routing_arrays(instance)
    n = len(pointer)
    mat = np.zeros((n, n))
    rows = np.flatnonzero(pointer >= 0)
    mat[rows, pointer[rows]] = 1.0
    depth = np.full(n, -1, dtype=np.int64)
    for t in range(n):
        if is_origin[t]:
            depth[t] = 0
        elif pointer[t] >= 0:
            depth[t] = depth[pointer[t]] + 1
    return GoldRouting(CausalAttention(mat, MaskMode.STRICT), depth)


def origin_values(instance):
    """Canonical values: a distinct one-hot dimension for every origin token."""
    _, is_origin = _routing_arrays(instance)
    origins = np.flatnonzero(is_origin)
    v = np.zeros((len(is_origin), len(origins)))
    v[origins, np.arange(len(origins))] = 1.0
    return v


def _queries(instance):
    """Query tokens and a predicate telling whether a decoded dimension is right."""
    if isinstance(instance, ToyChainInstance):
        targets = instance.targets
        tokens = np.arange(instance.block_size, instance.n)
        # origin dimension j is first-block token j
        return tokens, lambda tok, dim: dim == targets[tok]
    pointer, is_origin, lots = _box_routing(instance.num_boxes, instance.items, instance.ops)
    _, moved = replay_boxes(instance.num_boxes, instance.items, instance.ops)
    origins = np.flatnonzero(is_origin)
    tokens = np.flatnonzero(pointer >= 0)

    def correct(tok, dim):
        if dim >= len(origins):
            return False
        # the decoded lot must actually be inside what the simulator says moved
        return lots[origins[dim]] <= moved[tok - instance.num_boxes]

    return tokens, correct


def _decode(y, instance):
    if y.shape[0] != instance.n:
        raise ValueError(f"output has {y.shape[0]} rows, instance has {instance.n} tokens")
    d = origin_values(instance).shape[1]
    if y.shape[1] != d:
        raise ValueError(f"output has width {y.shape[1]}, instance encodes {d} origins")
    tokens, correct = _queries(instance)
    if d == 0:
        return tokens, np.zeros(len(tokens), dtype=bool)
    pred = np.argmax(y, axis=1)  # first maximum wins ties
    return tokens, np.array([correct(t, int(pred[t])) for t in tokens], dtype=bool)


def readout_accuracy(y, instance):
    """Decode ``y`` by per-row argmax and compare with the simulator.

    Returns ``(token_accuracy, exact_match)`` for a single instance; an
    instance with no query tokens counts as fully correct.
    """
    _, ok = _decode(np.asarray(y, dtype=np.float64), instance)
    if ok.size == 0:
        return 1.0, 1.0
    return float(ok.mean()), float(ok.all())


def score_instances(outputs, instances):
    """Token accuracy pooled over all queries and exact match over instances."""
    correct = total = exact = 0
    count = 0
    for y, inst in zip(outputs, instances):
        _, ok = _decode(np.asarray(y, dtype=np.float64), inst)
        correct += int(ok.sum())
        total += ok.size
        exact += int(ok.all())
        count += 1
    if count == 0:
        raise ValueError("no instances to score")
    return (correct / total if total else 1.0), exact / count


def generate_tasks(kind, seed, count, **params):
    gen = {"toy": gen_toy_chain, "boxes": gen_boxes}.get(kind)
    if gen is None:
        raise ValueError(f"unknown task kind {kind!r}")
    return [gen(instance_seed(seed, i), **params) for i in range(count)]


def _to_record(inst):
    if isinstance(inst, ToyChainInstance):
        return {
            "schema": SCHEMA_VERSION,
            "kind": "toy",
            "seed": inst.seed,
            "params": {"num_blocks": inst.num_blocks, "block_size": inst.block_size},
            "pointers": inst.pointers.tolist(),
            "targets": inst.targets.tolist(),
        }
    return {
        "schema": SCHEMA_VERSION,
        "kind": "boxes",
        "seed": inst.seed,
        "params": {"num_boxes": inst.num_boxes, "num_items": len(inst.items)},
        "items": inst.items.tolist(),
        "ops": [op.to_json() for op in inst.ops],
        "provenance": list(inst.provenance),
        "final_state": {str(b): c for b, c in inst.final_state.items()},
    }


def _from_record(rec):
    if rec.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported task schema {rec.get('schema')!r}")
    if rec["kind"] == "toy":
        p = rec["params"]
        return ToyChainInstance(
            rec["seed"], p["num_blocks"], p["block_size"], np.asarray(rec["pointers"], dtype=np.int64)
        )
    if rec["kind"] == "boxes":
        ops = tuple(BoxOp(*op) for op in rec["ops"])
        items = np.asarray(rec["items"], dtype=np.int64)
        final = {int(b): c for b, c in rec["final_state"].items()}
        inst = BoxesInstance(
            rec["seed"], rec["params"]["num_boxes"], items, ops, final, tuple(rec["provenance"])
        )
        if simulate_boxes(inst) != final:
            raise ValueError(f"task seed {rec['seed']}: stored final_state disagrees with replay")
        return inst
    raise ValueError(f"unknown task kind {rec['kind']!r}")


def write_tasks(instances, fh):
    for inst in instances:
        fh.write(json.dumps(_to_record(inst), sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def read_tasks(fh):
    return [_from_record(json.loads(line)) for line in fh if line.strip()]
