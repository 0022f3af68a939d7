"""Vectorised model equations against the naive oracles in ``oracles.py`` on
100 random small instances each."""

import numpy as np
import pytest

import oracles
from conceptmoe import numerics as nx
from conceptmoe.moe import aggregate, gate_loss
from conceptmoe.numerics import Tensor
from conceptmoe.partition import (
    ConceptBank,
    concept_presence_loss,
    occurrence_probs,
    pool_concept_features,
    presence_prob,
)

TRIALS = 100
ATOL = 1e-10


def instance(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    d = int(rng.integers(1, 9))
    h = int(rng.integers(1, 7))
    w = int(rng.integers(1, 7))
    feats = rng.normal(size=(d, h, w))
    concepts = rng.normal(size=(k, d))
    alpha = rng.uniform(0.3, 0.95, size=k)
    return rng, feats, concepts, alpha


def test_occurrence_matches_oracle():
    for seed in range(TRIALS):
        _, feats, concepts, alpha = instance(seed)
        got = occurrence_probs(Tensor(feats[None]), ConceptBank.from_arrays(concepts, alpha)).data[0]
        want = np.array(oracles.occurrence(feats.tolist(), concepts.tolist(), alpha.tolist()))
        assert np.max(np.abs(got - want)) < ATOL, seed


def test_presence_matches_oracle():
    for seed in range(TRIALS):
        rng, feats, concepts, alpha = instance(seed)
        k, (_, h, w) = len(concepts), feats.shape
        occ = rng.uniform(size=(k, h, w))
        size = int(rng.choice([s for s in (1, 3, 5) if s <= 2 * min(h, w) + 1]))
        kernel = nx.gaussian_kernel2d(size, float(rng.uniform(0.5, 2.0)))
        got = presence_prob(Tensor(occ[None]), kernel).data[0]
        want = np.array(oracles.presence(occ.tolist(), kernel.data.tolist()))
        assert np.max(np.abs(got - want)) < ATOL, seed


def test_pooling_matches_oracle():
    for seed in range(TRIALS):
        _, feats, concepts, alpha = instance(seed)
        bank = ConceptBank.from_arrays(concepts, alpha)
        occ = occurrence_probs(Tensor(feats[None]), bank)
        got = pool_concept_features(Tensor(feats[None]), occ, bank).data[0]
        want = np.array(oracles.pooled_features(feats.tolist(), occ.data[0].tolist(), concepts.tolist(), alpha.tolist()))
        assert np.max(np.abs(got - want)) < ATOL, seed


def test_presence_loss_matches_oracle():
    for seed in range(TRIALS):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=(int(rng.integers(1, 6)), int(rng.integers(1, 5))))
        p[rng.uniform(size=p.shape) < 0.1] = 0.0
        got = concept_presence_loss(Tensor(p)).item()
        assert abs(got - oracles.presence_loss(p.tolist())) < ATOL, seed


def test_mixture_matches_oracle():
    for seed in range(TRIALS):
        rng = np.random.default_rng(seed)
        n, k, c = (int(v) for v in rng.integers(1, 6, size=3))
        w = np.array(oracles.softmax_rows(rng.normal(size=(n, k)).tolist()))
        p = np.array([oracles.softmax_rows(rng.normal(size=(k, c)).tolist()) for _ in range(n)])
        got = aggregate(Tensor(w), Tensor(p)).aggregate.data
        assert np.max(np.abs(got - np.array(oracles.mixture(w.tolist(), p.tolist())))) < ATOL, seed


@pytest.mark.parametrize("gamma", [0.0, 1.0, 37.5])
def test_gate_objective_matches_oracle(gamma):
    for seed in range(TRIALS):
        rng = np.random.default_rng(seed)
        n, k, c = (int(v) for v in rng.integers(1, 6, size=3))
        w = np.array(oracles.softmax_rows((rng.normal(size=(n, k)) * 2).tolist()))
        agg = np.array(oracles.softmax_rows(rng.normal(size=(n, c)).tolist()))
        labels = rng.integers(0, c, size=n)
        got = gate_loss(Tensor(agg), labels, Tensor(w), gamma).item()
        want = oracles.gate_objective(agg.tolist(), labels.tolist(), w.tolist(), gamma)
        assert abs(got - want) < ATOL, seed
