"""Concept-based recognition: one expert per concept plus a softmax gate.

Expert j reads only row j of the concept features and outputs a class
distribution. The gate reads all rows and outputs simplex weights, which
mix the expert distributions into the final prediction and double as
per-concept importance scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conceptmoe.errors import DomainError, ShapeError
from conceptmoe.numerics import Tensor, matmul, mean, nll, reshape, softmax, square, stack, take
from conceptmoe.numerics.layers import MLP, Module

PROB_FLOOR = 1e-12


class Expert(Module):
    """D -> hidden -> C MLP with a softmax output."""

    def __init__(self, index: int, dim: int, num_classes: int, rng: np.random.Generator, hidden: int = 32):
        self.index = index
        self.dim = dim
        self.mlp = MLP(dim, hidden, num_classes, rng)

    def __call__(self, z_j: Tensor) -> Tensor:
        return expert_forward(z_j, self)


class GateNetwork(Module):
    """K*D -> hidden -> K MLP with a softmax output."""

    def __init__(self, num_concepts: int, dim: int, rng: np.random.Generator, hidden: int = 32):
        self.num_concepts = num_concepts
        self.dim = dim
        self.mlp = MLP(num_concepts * dim, hidden, num_concepts, rng)

    def logits(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[1:] != (self.num_concepts, self.dim):
            raise ShapeError(f"gate expects (B, {self.num_concepts}, {self.dim}) features, got {z.shape}")
        return self.mlp(reshape(z, (z.shape[0], -1)))

    def __call__(self, z: Tensor) -> Tensor:
        return gate_forward(z, self)


@dataclass
class GateOutput:
    weights: Tensor  # B x K
    expert_probs: Tensor  # B x K x C
    aggregate: Tensor  # B x C
    predicted_class: np.ndarray  # B


def expert_forward(z_j: Tensor, expert: Expert) -> Tensor:
    """(B, D) concept feature rows -> (B, C) class probabilities."""
    if z_j.ndim != 2 or z_j.shape[1] != expert.dim:
        raise ShapeError(f"expert {expert.index} expects (B, {expert.dim}) input, got {z_j.shape}")
    return softmax(expert.mlp(z_j), axis=-1)


def gate_forward(z: Tensor, gate: GateNetwork) -> Tensor:
    """(B, K, D) concept features -> (B, K) importance weights on the simplex."""
    return softmax(gate.logits(z), axis=-1)


def aggregate(weights: Tensor, expert_probs: Tensor) -> GateOutput:
    """Weighted sum of expert distributions; argmax ties go to the lowest class id."""
    if weights.ndim != 2 or expert_probs.ndim != 3 or expert_probs.shape[:2] != weights.shape:
        raise ShapeError(f"weights {weights.shape} do not match expert outputs {expert_probs.shape}")
    b, k = weights.shape
    agg = reshape(matmul(reshape(weights, (b, 1, k)), expert_probs), (b, -1))
    return GateOutput(weights, expert_probs, agg, agg.data.argmax(axis=-1))


def expert_loss(expert_probs: Tensor, labels) -> Tensor:
    """Sum over experts of each expert's mean cross-entropy against the image label."""
    b, k, c = expert_probs.shape
    # Row-major flatten keeps sample i's experts contiguous; labels repeat per expert.
    flat = reshape(expert_probs, (b * k, c))
    return nll(flat, np.repeat(np.asarray(labels), k), floor=PROB_FLOOR) * float(k)


def gate_loss(agg: Tensor, labels, weights: Tensor, gamma: float) -> Tensor:
    """Cross-entropy of the mixture plus gamma * mean squared deviation of weights from 1/K."""
    if gamma < 0:
        raise DomainError(f"gamma must be non-negative, got {gamma}")
    if agg.shape[0] != weights.shape[0]:
        raise ShapeError(f"batch mismatch: aggregate {agg.shape} vs weights {weights.shape}")
    ce = nll(agg, labels, floor=PROB_FLOOR)
    if gamma == 0:
        return ce
    k = weights.shape[1]
    return ce + mean(square(weights - 1.0 / k)) * gamma


def uniformity_penalty(weights) -> float:
    """Mean over samples and concepts of (w - 1/K)^2, as a plain float."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return float(np.mean((w - 1.0 / w.shape[-1]) ** 2))


def moe_total_loss(l_ept: Tensor, l_g: Tensor) -> Tensor:
    return l_ept + l_g


class MoEModel(Module):
    def __init__(self, num_concepts: int, dim: int, num_classes: int, rng: np.random.Generator, hidden: int = 32):
        self.num_concepts = num_concepts
        self.dim = dim
        self.num_classes = num_classes
        self.experts = [Expert(j, dim, num_classes, rng, hidden) for j in range(num_concepts)]
        self.gate = GateNetwork(num_concepts, dim, rng, hidden)
        # Gate starts exactly uniform.
        self.gate.mlp.fc2.weight.data[...] = 0.0
        self.assign_names("moe.")

    def __call__(self, z: Tensor) -> GateOutput:
        if z.ndim != 3 or z.shape[1:] != (self.num_concepts, self.dim):
            raise ShapeError(f"expected (B, {self.num_concepts}, {self.dim}) features, got {z.shape}")
        probs = stack([e(take(z, j, axis=1)) for j, e in enumerate(self.experts)], axis=1)
        return aggregate(gate_forward(z, self.gate), probs)

    def losses(self, out: GateOutput, labels, gamma: float) -> tuple[Tensor, Tensor, Tensor]:
        l_ept = expert_loss(out.expert_probs, labels)
        l_g = gate_loss(out.aggregate, labels, out.weights, gamma)
        return l_ept, l_g, moe_total_loss(l_ept, l_g)

