import io
import json

import numpy as np
import pytest

from blockres import taskgen
from blockres.blockwise import blockwise_apply
from blockres.resolvent import resolvent_apply
from blockres.sparsify import topk_prune
from blockres.taskgen import BoxOp


def test_toy_defaults():
    inst = taskgen.gen_toy_chain(3)
    assert inst.n == 128
    depth = taskgen.gold_attention(inst).depth
    assert depth.max() == 15 and depth.min() == 0
    assert max(len(inst.chain_of(t)) for t in range(inst.n)) == 15


def test_toy_minimal_and_determinism():
    inst = taskgen.gen_toy_chain(0, num_blocks=2, block_size=1)
    assert inst.pointers.tolist() == [-1, 0]
    assert taskgen.gold_attention(inst).depth.tolist() == [0, 1]
    assert taskgen.gen_toy_chain(11) == taskgen.gen_toy_chain(11)
    assert taskgen.gen_toy_chain(11) != taskgen.gen_toy_chain(12)


def test_toy_block_pointers_are_permutations():
    inst = taskgen.gen_toy_chain(5, num_blocks=4, block_size=6)
    for b in range(1, 4):
        block = inst.pointers[b * 6:(b + 1) * 6]
        assert sorted(block.tolist()) == list(range((b - 1) * 6, b * 6))


def test_gold_two_blocks():
    inst = taskgen.gen_toy_chain(2, num_blocks=2, block_size=4)
    gold = taskgen.gold_attention(inst)
    assert gold.attention.mask.value == "strict"
    assert np.all(gold.attention.mat[4:, :4].sum(1) == 1.0)
    assert gold.depth[4:].tolist() == [1] * 4


def test_boxes_simulation():
    final, moved = taskgen.replay_boxes(2, np.array([0]), (BoxOp("move", 0, 1),))
    assert final == {0: [], 1: [0]} and moved == [frozenset({0})]
    inst = taskgen.gen_boxes(4, num_boxes=5, num_ops=0)
    assert inst.final_state == {b: sorted(np.flatnonzero(inst.items == b).tolist()) for b in range(5)}
    big = taskgen.gen_boxes(9, num_boxes=7, num_ops=31)
    assert big.n == 38 and taskgen.simulate_boxes(big) == big.final_state


def test_boxes_single_move_points_to_source_box():
    inst = taskgen.BoxesInstance(0, 3, np.array([0, 2]), (BoxOp("move", 0, 1),))
    gold = taskgen.gold_attention(inst)
    assert gold.attention.mat[3].tolist() == [1.0, 0.0, 0.0, 0.0]
    empty = taskgen.BoxesInstance(0, 3, np.array([2]), (BoxOp("move", 0, 1),))
    assert not taskgen.gold_attention(empty).attention.mat[3].any()


def test_boxes_errors():
    with pytest.raises(ValueError):
        taskgen.replay_boxes(2, np.array([3]), ())
    with pytest.raises(ValueError):
        taskgen.gen_boxes(0, put_ratio=0.7, remove_ratio=0.7)


def test_hop_weight_on_origin():
    inst = taskgen.gen_toy_chain(1)
    gold = taskgen.gold_attention(inst)
    y = resolvent_apply(gold.attention, taskgen.origin_values(inst), 0.8)
    for t in (8, 60, 127):
        d = gold.depth[t]
        assert y[t, inst.targets[t]] == pytest.approx(0.2 * 0.8 ** (d - 1), abs=1e-15)


@pytest.mark.parametrize("kind,params", [("toy", {}), ("boxes", {"num_ops": 31}),
                                         ("boxes", {"put_ratio": 0.3, "remove_ratio": 0.1})])
def test_readout_on_gold(kind, params):
    for inst in taskgen.generate_tasks(kind, 4, 20, **params):
        a = taskgen.gold_attention(inst).attention
        v = taskgen.origin_values(inst)
        for gamma in (0.1, 0.5, 0.9):
            assert taskgen.readout_accuracy(resolvent_apply(a, v, gamma), inst) == (1.0, 1.0)
        assert taskgen.readout_accuracy(blockwise_apply(a, v, 0.9).y, inst) == (1.0, 1.0)


def test_readout_zero_output_is_base_rate():
    inst = taskgen.gen_toy_chain(0)
    acc, em = taskgen.readout_accuracy(np.zeros((inst.n, 8)), inst)
    assert acc == np.mean(inst.targets[8:] == 0) and em == 0.0
    with pytest.raises(ValueError):
        taskgen.readout_accuracy(np.zeros((3, 8)), inst)


def test_top1_leaves_gold_unchanged():
    for inst in taskgen.generate_tasks("toy", 0, 5) + taskgen.generate_tasks("boxes", 0, 5):
        a = taskgen.gold_attention(inst).attention
        np.testing.assert_array_equal(topk_prune(a, 1).mat, a.mat)


def test_jsonl_round_trip_and_determinism():
    insts = taskgen.generate_tasks("boxes", 7, 10, put_ratio=0.2)
    insts += taskgen.generate_tasks("toy", 7, 10)
    buf1, buf2 = io.StringIO(), io.StringIO()
    taskgen.write_tasks(insts, buf1)
    taskgen.write_tasks(taskgen.generate_tasks("boxes", 7, 10, put_ratio=0.2)
                        + taskgen.generate_tasks("toy", 7, 10), buf2)
    assert buf1.getvalue() == buf2.getvalue()
    back = taskgen.read_tasks(io.StringIO(buf1.getvalue()))
    assert back == insts


def test_jsonl_rejects_tampered_state():
    buf = io.StringIO()
    taskgen.write_tasks(taskgen.generate_tasks("boxes", 1, 1), buf)
    rec = json.loads(buf.getvalue())
    rec["final_state"]["0"] = [99]
    with pytest.raises(ValueError, match="disagrees"):
        taskgen.read_tasks(io.StringIO(json.dumps(rec)))
    rec["schema"] = 2
    with pytest.raises(ValueError, match="schema"):
        taskgen.read_tasks(io.StringIO(json.dumps(rec)))
