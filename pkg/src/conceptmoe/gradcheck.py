"""Finite-difference gradient suite over the differentiable ops and every training loss.

Each case builds a small random instance from a seeded generator and returns
a closure producing a scalar, plus the tensors to differentiate against.
Non-scalar ops are reduced to a scalar by a fixed random projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from conceptmoe import numerics as nx
from conceptmoe.moe import MoEModel, expert_loss, gate_loss
from conceptmoe.numerics import Tensor, check_gradients
from conceptmoe.partition import (
    ConceptBank,
    PartitionHead,
    concept_presence_loss,
    occurrence_probs,
    partition_cls_loss,
    partition_total_loss,
    pool_concept_features,
    presence_prob,
)

TOLERANCE = 1e-4
STEP = 1e-5

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)


def _projected(op, *shape):
    """Case for a unary op: scalar = sum(op(x) * r)."""

    def build(rng):
        x = _leaf(rng, *shape)
        r = rng.normal(size=np.shape(op(Tensor(x.data)).data))
        return (lambda: nx.sum_(op(x) * r)), [x]

    return build


def _binary(op, shape_a, shape_b, positive_b=False):
    def build(rng):
        a = _leaf(rng, *shape_a)
        b = _positive(rng, *shape_b) if positive_b else _leaf(rng, *shape_b)
        r = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
        return (lambda: nx.sum_(op(a, b) * r)), [a, b]

    return build


def _conv(rng):
    x = _leaf(rng, 2, 2, 5, 5)
    w = _leaf(rng, 3, 2, 3, 3)
    b = _leaf(rng, 3)
    r = rng.normal(size=(2, 3, 5, 5))
    return (lambda: nx.sum_(nx.conv2d(x, w, b) * r)), [x, w, b]


def _conv_strided(rng):
    x = _leaf(rng, 1, 2, 6, 6)
    w = _leaf(rng, 2, 2, 3, 3)
    r = rng.normal(size=(1, 2, 3, 3))
    return (lambda: nx.sum_(nx.conv2d(x, w, stride=2) * r)), [x, w]


def _matmul(rng):
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 4, 2)
    r = rng.normal(size=(2, 3, 2))
    return (lambda: nx.sum_(nx.matmul(a, b) * r)), [a, b]


def _linear(rng):
    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    r = rng.normal(size=(3, 2))
    return (lambda: nx.sum_(nx.linear(x, w, b) * r)), [x, w, b]


def _cross_entropy(rng):
    logits = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    return (lambda: nx.cross_entropy(logits, labels)), [logits]


def _nll(rng):
    raw = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    return (lambda: nx.nll(nx.softmax(raw, axis=-1), labels)), [raw]


# ---- partition pieces ----------------------------------------------------


def _toy_partition(rng, k=3, d=4, h=4, w=4, b=2):
    feats = _leaf(rng, b, d, h, w)
    bank = ConceptBank(k, d, rng, std=0.5)
    bank.raw_smoothing.data[...] = rng.normal(0.0, 0.5, size=k)
    return feats, bank


def _occurrence(rng):
    feats, bank = _toy_partition(rng)
    r = rng.normal(size=(2, 3, 4, 4))
    return (lambda: nx.sum_(occurrence_probs(feats, bank) * r)), [feats, bank.concepts, bank.raw_smoothing]


def _presence(rng):
    occ = Tensor(rng.uniform(size=(2, 3, 4, 4)), requires_grad=True)
    kernel = nx.gaussian_kernel2d(3, 1.0)
    r = rng.normal(size=(2, 3))
    return (lambda: nx.sum_(presence_prob(occ, kernel) * r)), [occ]


def _pooling(rng):
    feats, bank = _toy_partition(rng)
    r = rng.normal(size=(2, 3, 4))

    def fn():
        occ = occurrence_probs(feats, bank)
        return nx.sum_(pool_concept_features(feats, occ, bank) * r)

    return fn, [feats, bank.concepts, bank.raw_smoothing]


def _partition_losses(rng):
    feats, bank = _toy_partition(rng)
    head = PartitionHead(3, 4, 5, rng, hidden=6)
    labels = rng.integers(0, 5, size=2)
    kernel = nx.gaussian_kernel2d(3, 1.0)
    params = [feats, bank.concepts, bank.raw_smoothing, *head.parameters()]

    def parts():
        occ = occurrence_probs(feats, bank)
        z = pool_concept_features(feats, occ, bank)
        return partition_cls_loss(z, head, labels), concept_presence_loss(presence_prob(occ, kernel))

    return parts, params


def _l_cls(rng):
    parts, params = _partition_losses(rng)
    return (lambda: parts()[0]), params


def _l_r(rng):
    parts, params = _partition_losses(rng)
    return (lambda: parts()[1]), params


def _partition_total(rng):
    parts, params = _partition_losses(rng)

    def fn():
        cls, reg = parts()
        return partition_total_loss(cls, reg, 0.7)

    return fn, params


# ---- moe pieces ------------------------------------------------------------


def _moe_losses(rng, gamma=0.8):
    k, d, c, b = 3, 4, 5, 4
    z = _leaf(rng, b, k, d)
    model = MoEModel(k, d, c, rng, hidden=8)
    # a non-uniform gate so the penalty term carries gradient
    model.gate.mlp.fc2.weight.data[...] = rng.normal(0.0, 0.5, size=model.gate.mlp.fc2.weight.shape)
    labels = rng.integers(0, c, size=b)
    return z, model, labels, gamma


def _l_ept(rng):
    z, model, labels, _ = _moe_losses(rng)
    return (lambda: expert_loss(model(z).expert_probs, labels)), [z, *model.parameters()]


def _l_g(rng):
    z, model, labels, gamma = _moe_losses(rng)

    def fn():
        out = model(z)
        return gate_loss(out.aggregate, labels, out.weights, gamma)

    return fn, [z, *model.parameters()]


def _moe_total(rng):
    z, model, labels, gamma = _moe_losses(rng)
    return (lambda: model.losses(model(z), labels, gamma)[2]), [z, *model.parameters()]


OPS: dict[str, Case] = {
    "add": _binary(nx.add, (3, 4), (4,)),
    "sub": _binary(nx.sub, (3, 1), (3, 4)),
    "mul": _binary(nx.mul, (2, 3), (2, 3)),
    "div": _binary(nx.div, (2, 3), (2, 3), positive_b=True),
    "square": _projected(nx.square, 3, 4),
    "abs": _projected(nx.abs_, 3, 4),
    "exp": _projected(nx.exp, 3, 4),
    "log": _projected(lambda x: nx.log(nx.exp(x)), 3, 4),
    "sigmoid": _projected(nx.sigmoid, 3, 4),
    "relu": _projected(nx.relu, 3, 4),
    "transpose": _projected(lambda x: nx.transpose(x, (1, 0, 2)), 2, 3, 4),
    "sum": _projected(lambda x: nx.sum_(x, axis=1), 3, 4),
    "mean": _projected(lambda x: nx.mean(x, axis=0), 3, 4),
    "l2_norm": _projected(nx.l2_norm, 3, 4),
    "normalize": _projected(nx.normalize, 3, 4),
    "softmax": _projected(nx.softmax, 3, 5),
    "log_softmax": _projected(nx.log_softmax, 3, 5),
    "global_max": _projected(nx.global_max, 2, 3, 4, 4),
    "max_pool2d": _projected(nx.max_pool2d, 1, 2, 4, 4),
    "take": _projected(lambda x: nx.take(x, 1, axis=1), 2, 3, 4),
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv,
    "conv2d_strided": _conv_strided,
    "cross_entropy": _cross_entropy,
    "nll": _nll,
    "occurrence_probs": _occurrence,
    "presence_prob": _presence,
    "pool_concept_features": _pooling,
}

LOSSES: dict[str, Case] = {
    "l_cls": _l_cls,
    "l_r": _l_r,
    "partition_total": _partition_total,
    "l_ept": _l_ept,
    "l_g": _l_g,
    "moe_total": _moe_total,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_case(case: Case, seed: int, h: float = STEP) -> float:
    fn, inputs = case(np.random.default_rng(seed))
    return check_gradients(fn, inputs, h)


def run_suite(seed: int = 0, instances: int = 20, names=None) -> list[CheckResult]:
    """Worst relative error per registered case over ``instances`` seeded draws."""
    registry = {**OPS, **LOSSES}
    results = []
    for idx, name in enumerate(names or registry):
        worst = max(run_case(registry[name], seed * 100_003 + idx * 1_009 + i) for i in range(instances))
        results.append(CheckResult(name, worst, instances))
    return results
