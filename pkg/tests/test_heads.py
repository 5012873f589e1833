import math

import numpy as np
import pytest

from dtrn import tensor as tn
from dtrn.heads import (HEAD_KINDS, HeadConfig, build_head, forward_head, parse_chains, restrict_chains,
                        total_loss)
from dtrn.tensor import Parameter, Tensor


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def reps(n_tasks, width=6, batch=5, seed=0):
    rng = np.random.default_rng(seed)
    return [f64(rng.normal(size=(batch, width))) for _ in range(n_tasks)]


def head64(kind, n_tasks=3, width=6, seed=0, **kw):
    return build_head(HeadConfig(kind, n_tasks, **kw), width, np.random.default_rng(seed)).astype(np.float64)


@pytest.mark.parametrize("kind", HEAD_KINDS)
def test_shapes_and_sigmoid(kind):
    out = forward_head(head64(kind), reps(3))
    assert out.o.shape == (5, 3)
    np.testing.assert_allclose(out.y_hat.data, 1 / (1 + np.exp(-out.o.data)), atol=1e-12)


@pytest.mark.parametrize("kind", HEAD_KINDS)
def test_each_task_reaches_its_representation(kind):
    head = head64(kind)
    for t in range(3):
        rs = [Parameter(r.data, dtype=np.float64) for r in reps(3, seed=t)]
        with tn.Tape() as tape:
            o = head(rs).o
            loss = tn.sum(tn.transpose(o, (1, 0))[t])
        tape.backward(loss)
        assert np.abs(rs[t].grad).sum() > 0


@pytest.mark.parametrize("kind", HEAD_KINDS)
def test_width_mismatch_and_count(kind):
    head = head64(kind)
    with pytest.raises(tn.ShapeError):
        head(reps(3, width=7))
    with pytest.raises(ValueError):
        head(reps(2))


def test_unknown_kind():
    with pytest.raises(ValueError):
        HeadConfig("cgc", 2)


def test_share_bottom_matches_loop():
    head = build_head(HeadConfig("share_bottom", 1, expert_hidden=2, tower_hidden=3), 4,
                      np.random.default_rng(0)).astype(np.float64)
    x = np.random.default_rng(1).normal(size=(3, 4))
    got = head([f64(x)]).o.data

    def dense(row, layer, relu):
        out = [sum(row[i] * layer.weight.data[i, j] for i in range(len(row))) + layer.bias.data[j]
               for j in range(layer.weight.shape[1])]
        return [max(0.0, v) for v in out] if relu else out

    for r in range(3):
        h = dense(dense(x[r].tolist(), head.trunk.layers[0], True), head.trunk.layers[1], True)
        o = dense(dense(h, head.towers[0].layers[0], True), head.towers[0].layers[1], False)
        assert abs(got[r, 0] - o[0]) <= 1e-6


def test_single_expert_mmoe_is_share_bottom():
    mmoe = head64("mmoe", n_experts=1)
    sb = head64("share_bottom")
    sb.trunk = mmoe.experts[0]
    sb.towers = mmoe.towers
    rs = reps(3)
    np.testing.assert_array_equal(mmoe(rs).o.data, sb(rs).o.data)
    assert all((g.data == 1.0).all() for g in mmoe.last_gates)


@pytest.mark.parametrize("kind", ["mmoe", "ple"])
def test_gates_are_distributions(kind):
    head = head64(kind, n_experts=4)
    head(reps(3, seed=4))
    for g in head.last_gates:
        assert (g.data >= 0).all()
        np.testing.assert_allclose(g.data.sum(axis=1), 1.0, atol=1e-6)


class TestTotalLoss:
    def test_ln2(self):
        assert total_loss(f64([[0.0]]), [[1]]).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_duplicate_task_doubles(self):
        o = np.random.default_rng(0).normal(size=(6, 1))
        y = np.random.default_rng(1).integers(0, 2, size=(6, 1))
        single = total_loss(f64(o), y).item()
        double = total_loss(f64(np.hstack([o, o])), np.hstack([y, y])).item()
        assert double == pytest.approx(2 * single, rel=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        o = rng.normal(scale=3, size=(7, 3))
        y = rng.integers(0, 2, size=(7, 3))
        want = 0.0
        for t in range(3):
            want += sum(-(y[r, t] * math.log(1 / (1 + math.exp(-o[r, t])))
                          + (1 - y[r, t]) * math.log(1 - 1 / (1 + math.exp(-o[r, t])))) for r in range(7)) / 7
        assert abs(total_loss(f64(o), y).item() - want) <= 1e-6

    def test_non_binary_labels(self):
        with pytest.raises(ValueError):
            total_loss(f64([[0.0]]), [[0.5]])

    # the aitm chain fixes an order among tasks, so it is not permutation covariant
    @pytest.mark.parametrize("kind", ["share_bottom", "mmoe", "ple"])
    def test_permutation_covariance(self, kind):
        head = head64(kind, n_tasks=3)
        rs = reps(3, seed=7)
        y = np.random.default_rng(8).integers(0, 2, size=(5, 3))
        base = total_loss(head(rs).o, y).item()
        perm = [2, 0, 1]
        head.towers = [head.towers[p] for p in perm]
        if hasattr(head, "gates"):
            head.gates = [head.gates[p] for p in perm]
        if hasattr(head, "specific"):
            head.specific = [head.specific[p] for p in perm]
        permuted = total_loss(head([rs[p] for p in perm]).o, y[:, perm]).item()
        assert permuted == pytest.approx(base, rel=1e-12)


class TestAitm:
    def test_default_chain(self):
        assert parse_chains("", 4) == {1: 0, 2: 1, 3: 2}

    def test_paper_style_chains(self):
        assert parse_chains("0>1;0>2>3", 4) == {1: 0, 2: 0, 3: 2}

    @pytest.mark.parametrize("text", ["0>5", "0>1;2>1", "0>1>0"])
    def test_invalid_chains(self, text):
        with pytest.raises(ValueError):
            parse_chains(text, 4)

    def test_restrict_skips_removed_tasks(self):
        pred = parse_chains("0>1;0>2>3", 4)
        assert restrict_chains(pred, [0, 1, 3]) == {1: 0, 2: 0}
        assert restrict_chains(pred, [1, 2, 3]) == {2: 1}

    def test_causal_order(self):
        head = head64("aitm", n_tasks=4, aitm_chains="0>1;0>2>3")
        rs = reps(4, seed=1)
        base = head(rs).o.data
        # perturb task 2's tower (its own projection) and compare logits
        head.own[2].layers[0].weight.data += 0.5
        moved = head(rs).o.data
        changed = np.any(moved != base, axis=0).tolist()
        assert changed == [False, False, True, True]

    def test_root_ignores_others(self):
        head = head64("aitm", n_tasks=3)
        rs = reps(3, seed=2)
        base = head(rs).o.data[:, 0]
        rs[1] = f64(rs[1].data + 1.0)
        np.testing.assert_array_equal(head(rs).o.data[:, 0], base)
