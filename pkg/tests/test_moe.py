import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conceptmoe import numerics as nx
from conceptmoe.errors import DomainError, LabelError, ShapeError
from conceptmoe.moe import (
    Expert,
    GateNetwork,
    MoEModel,
    aggregate,
    expert_forward,
    expert_loss,
    gate_forward,
    gate_loss,
    moe_total_loss,
    uniformity_penalty,
)
from conceptmoe.numerics import OptimizerConfig, Tensor, sgd_step


def test_expert_zero_final_layer_is_uniform():
    e = Expert(0, 4, 5, np.random.default_rng(0))
    e.mlp.fc2.weight.data[...] = 0.0
    p = expert_forward(Tensor(np.random.default_rng(1).normal(size=(3, 4))), e).data
    assert np.allclose(p, 0.2)


def test_expert_outputs_sum_to_one_and_handle_zero_input():
    rng = np.random.default_rng(0)
    e = Expert(0, 6, 4, rng)
    p = e(Tensor(rng.normal(size=(100, 6)))).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    z0 = e(Tensor(np.zeros((1, 6)))).data
    assert np.all(np.isfinite(z0)) and z0.sum() == pytest.approx(1.0)


def test_expert_dimension_mismatch():
    with pytest.raises(ShapeError):
        Expert(0, 4, 3, np.random.default_rng(0))(Tensor(np.zeros((2, 5))))


def test_gate_zero_final_layer_is_uniform():
    g = GateNetwork(4, 3, np.random.default_rng(0))
    g.mlp.fc2.weight.data[...] = 0.0
    w = gate_forward(Tensor(np.random.default_rng(1).normal(size=(2, 4, 3))), g).data
    assert np.allclose(w, 0.25)


def test_gate_random_sums_to_one():
    rng = np.random.default_rng(3)
    g = GateNetwork(5, 3, rng)
    g.mlp.fc2.weight.data[...] = rng.normal(size=g.mlp.fc2.weight.shape)
    w = g(Tensor(rng.normal(size=(50, 5, 3)))).data
    assert np.all(w > 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_gate_shape_check():
    with pytest.raises(ShapeError):
        GateNetwork(3, 2, np.random.default_rng(0))(Tensor(np.zeros((1, 2, 2))))


def test_gate_weights_invariant_to_logit_shift():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3))
    w1 = nx.softmax(Tensor(logits)).data
    w2 = nx.softmax(Tensor(logits + 17.5)).data
    assert np.allclose(w1, w2, atol=1e-15)


def test_aggregate_degenerate_weight():
    pa, pb = [0.2, 0.8], [0.6, 0.4]
    out = aggregate(Tensor([[1.0, 0.0]]), Tensor([[pa, pb]]))
    assert np.allclose(out.aggregate.data[0], pa)


def test_aggregate_symmetric():
    out = aggregate(Tensor([[0.5, 0.5]]), Tensor([[[1.0, 0.0], [0.0, 1.0]]]))
    assert out.aggregate.data[0].tolist() == [0.5, 0.5]
    assert out.predicted_class[0] == 0  # tie goes to the lowest class


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(4)
    w = nx.softmax(Tensor(rng.normal(size=(6, 3)))).data
    p = nx.softmax(Tensor(rng.normal(size=(6, 3, 4)))).data
    got = aggregate(Tensor(w), Tensor(p)).aggregate.data
    for i in range(6):
        for c in range(4):
            acc = 0.0
            for j in range(3):
                acc += w[i, j] * p[i, j, c]
            assert abs(got[i, c] - acc) < 1e-12


def test_aggregate_shape_mismatch():
    with pytest.raises(ShapeError):
        aggregate(Tensor(np.ones((2, 3)) / 3), Tensor(np.ones((2, 2, 4)) / 4))


def test_expert_loss_uniform():
    k, c = 3, 5
    probs = Tensor(np.full((4, k, c), 1 / c))
    assert expert_loss(probs, [0, 1, 2, 3]).item() == pytest.approx(k * math.log(c), abs=1e-12)


def test_expert_loss_saturated_and_single_expert():
    probs = np.zeros((2, 2, 3))
    probs[0, :, 1] = 1.0
    probs[1, :, 2] = 1.0
    assert expert_loss(Tensor(probs), [1, 2]).item() == 0.0
    single = nx.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 3))))
    labels = [0, 2, 1, 1]
    assert expert_loss(nx.reshape(single, (4, 1, 3)), labels).item() == pytest.approx(
        nx.nll(single, labels).item(), abs=1e-15
    )
    with pytest.raises(LabelError):
        expert_loss(Tensor(probs), [1, 3])


def test_expert_loss_is_per_expert_sum():
    rng = np.random.default_rng(2)
    p = nx.softmax(Tensor(rng.normal(size=(5, 3, 4)))).data
    labels = rng.integers(0, 4, size=5)
    oracle = -sum(np.log(p[i, j, labels[i]]) for i in range(5) for j in range(3)) / 5
    assert expert_loss(Tensor(p), labels).item() == pytest.approx(oracle, abs=1e-12)


def test_gate_loss_uniform_weights_no_penalty():
    agg = Tensor([[0.25, 0.75]])
    w = Tensor([[0.5, 0.5]])
    assert gate_loss(agg, [1], w, 1e6).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_gate_loss_penalty_hand_example():
    agg = Tensor([[0.5, 0.5]])
    w = Tensor([[1.0, 0.0]])
    assert gate_loss(agg, [0], w, 1.0).item() - math.log(2) == pytest.approx(0.25, abs=1e-12)
    assert uniformity_penalty(w) == 0.25


def test_gate_loss_gamma_zero_and_negative():
    agg = Tensor([[0.1, 0.9]])
    w = Tensor([[0.9, 0.1]])
    assert gate_loss(agg, [1], w, 0.0).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    with pytest.raises(DomainError):
        gate_loss(agg, [1], w, -1.0)


def test_total_loss_sum():
    assert moe_total_loss(Tensor(1.0), Tensor(2.0)).item() == 3.0
    assert moe_total_loss(Tensor(0.0), Tensor(0.0)).item() == 0.0


@pytest.mark.parametrize("case", ["_l_ept", "_l_g", "_moe_total"])
def test_moe_losses_gradcheck(case):
    import conceptmoe.gradcheck as gc

    assert max(gc.run_case(getattr(gc, case), s) for s in range(3)) < 1e-4


def test_model_starts_uniform_and_names_unique():
    m = MoEModel(4, 3, 5, np.random.default_rng(0))
    out = m(Tensor(np.random.default_rng(1).normal(size=(2, 4, 3))))
    assert np.allclose(out.weights.data, 0.25)
    names = [p.name for p in m.parameters()]
    assert len(names) == len(set(names))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((2, 3, 3))))


@settings(max_examples=100)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(0.0, 1.0)))
def test_penalty_zero_iff_uniform(raw):
    w = raw + 1e-3
    w = w / w.sum(axis=1, keepdims=True)
    k = w.shape[1]
    pen = uniformity_penalty(w)
    if np.allclose(w, 1.0 / k, atol=0, rtol=0):
        assert pen == 0.0
    else:
        assert pen > 0.0
    assert uniformity_penalty(np.full_like(w, 1.0 / k)) == 0.0


def test_large_gamma_drives_gate_to_uniform():
    """Toy instance: a gate that starts far from uniform is pulled back by a heavy penalty."""
    rng = np.random.default_rng(0)
    m = MoEModel(3, 4, 2, rng)
    m.gate.mlp.fc2.bias.data[...] = [3.0, 0.0, -3.0]
    z = Tensor(rng.normal(size=(16, 3, 4)))
    labels = rng.integers(0, 2, size=16)
    cfg = OptimizerConfig(1e-4, momentum=0.9, weight_decay=0.0)
    for _ in range(300):
        out = m(z)
        m.losses(out, labels, 1e4)[2].backward()
        sgd_step(m.parameters(), cfg)
    w = m(z).weights.data.mean(axis=0)
    assert np.max(np.abs(w - 1 / 3)) < 0.05
