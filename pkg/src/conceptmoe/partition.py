"""Concept partition model.

A convolutional backbone produces a D x H x W feature map. Each spatial
feature is softly assigned to K learnable concept vectors by a softmax over
scaled negative squared distances, giving the occurrence map O (K x H x W).
From O we derive a hard partition, per-concept presence probabilities and
unit-norm pooled concept features Z (K x D), which feed the image classifier.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from conceptmoe.errors import DomainError, KernelSizeError, ShapeError
from conceptmoe.numerics import (
    Parameter,
    Tensor,
    abs_,
    clamp_min,
    conv2d,
    cross_entropy,
    gaussian_kernel2d,
    global_max,
    log,
    matmul,
    max_pool2d,
    mean,
    no_grad,
    normalize,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    sum_,
    transpose,
)
from conceptmoe.numerics.layers import MLP, Conv2d, Module

PRESENCE_DELTA = 1e-5
ZERO_FEATURE_EPS = 1e-8
MASS_FLOOR = 1e-12


class ConceptBank(Module):
    """K concept vectors and their per-concept smoothing factors.

    Smoothing is stored unconstrained; ``smoothing()`` maps it through a
    sigmoid so the effective factor always lies in (0, 1).
    """

    def __init__(self, num_concepts: int, dim: int, rng: np.random.Generator, std: float = 0.1):
        if num_concepts < 1 or dim < 1:
            raise ShapeError(f"need K >= 1 and D >= 1, got K={num_concepts}, D={dim}")
        self.concepts = Parameter(rng.normal(0.0, std, size=(num_concepts, dim)), "concepts")
        # sigmoid(0) = 0.5
        self.raw_smoothing = Parameter(np.zeros(num_concepts), "raw_smoothing")

    @property
    def num_concepts(self) -> int:
        return self.concepts.shape[0]

    @property
    def dim(self) -> int:
        return self.concepts.shape[1]

    def smoothing(self) -> Tensor:
        return sigmoid(self.raw_smoothing)

    @classmethod
    def from_arrays(cls, concepts, smoothing) -> ConceptBank:
        """Build a bank with given concept vectors and effective smoothing in (0, 1)."""
        concepts = np.asarray(concepts, dtype=np.float64)
        smoothing = np.asarray(smoothing, dtype=np.float64)
        if np.any(smoothing <= 0) or np.any(smoothing >= 1):
            raise DomainError("smoothing factors must lie strictly inside (0, 1)")
        bank = cls(concepts.shape[0], concepts.shape[1], np.random.default_rng(0))
        bank.concepts.data[...] = concepts
        bank.raw_smoothing.data[...] = np.log(smoothing) - np.log1p(-smoothing)
        return bank

    def init_from_features(self, features: np.ndarray, rng: np.random.Generator, iterations: int = 10) -> None:
        """Place the concepts at k-means centroids of sample feature vectors (N, D).

        Randomly drawn concepts sit far from the relu feature cloud, so every
        residual is dominated by the same offset and the pooled features barely
        vary between images. Starting inside the cloud avoids that plateau.
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected (N, {self.dim}) feature vectors, got {x.shape}")
        if len(x) < self.num_concepts:
            raise ShapeError(f"need at least {self.num_concepts} feature vectors, got {len(x)}")
        with warnings.catch_warnings():
            # an emptied cluster keeps its previous centroid, which is fine here
            warnings.simplefilter("ignore", UserWarning)
            centroids, _ = kmeans2(x, self.num_concepts, iter=iterations, minit="++", rng=rng)
        self.concepts.data[...] = centroids


class Backbone(Module):
    """Three 3x3 conv + relu blocks; the last two end in 2x2 max pooling.

    A 3 x 32 x 32 image becomes a ``dim`` x 8 x 8 feature map. Each output
    position sees a 12 x 12 pixel window.
    """

    def __init__(self, rng: np.random.Generator, dim: int = 32, channels: tuple[int, int] = (8, 16)):
        self.conv1 = Conv2d(3, channels[0], 3, rng)
        self.conv2 = Conv2d(channels[0], channels[1], 3, rng)
        self.conv3 = Conv2d(channels[1], dim, 3, rng)

    def __call__(self, images: Tensor) -> Tensor:
        x = relu(self.conv1(images))
        x = max_pool2d(relu(self.conv2(x)))
        return max_pool2d(relu(self.conv3(x)))


class PartitionHead(Module):
    """Classifier over the flattened K x D concept features."""

    def __init__(self, num_concepts: int, dim: int, num_classes: int, rng: np.random.Generator, hidden: int = 64):
        self.num_classes = num_classes
        self.mlp = MLP(num_concepts * dim, hidden, num_classes, rng)

    def __call__(self, z: Tensor) -> Tensor:
        b = z.shape[0]
        return self.mlp(reshape(z, (b, -1)))


def occurrence_probs(features: Tensor, bank: ConceptBank) -> Tensor:
    """(B, D, H, W) features -> (B, K, H, W) concept probabilities per position.

    p[j] = softmax_j( -||(s - c_j) / alpha_j||^2 / 2 )
    """
    if features.ndim != 4:
        raise ShapeError(f"features must be (B, D, H, W), got {features.shape}")
    b, d, h, w = features.shape
    if d != bank.dim:
        raise ShapeError(f"feature channels {d} != concept dim {bank.dim}")
    k = bank.num_concepts
    s = transpose(reshape(features, (b, d, h * w)), (0, 2, 1))  # b, hw, d
    diff = reshape(s, (b, h * w, 1, d)) - reshape(bank.concepts, (1, 1, k, d))
    dist2 = sum_(square(diff), axis=-1)  # b, hw, k
    alpha = bank.smoothing()
    logits = dist2 * (-0.5) / square(alpha)
    probs = softmax(logits, axis=-1)
    return reshape(transpose(probs, (0, 2, 1)), (b, k, h, w))


def hard_partition(occurrence) -> np.ndarray:
    """Per-position argmax concept id, ties to the lowest index. (B, K, H, W) -> (B, H, W)."""
    o = occurrence.data if isinstance(occurrence, Tensor) else np.asarray(occurrence)
    return o.argmax(axis=-3)


def _check_kernel(kernel: Tensor, h: int, w: int) -> None:
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise KernelSizeError(f"smoothing kernel must be square with odd size, got {kernel.shape}")
    if kernel.shape[0] > 2 * min(h, w) + 1:
        raise KernelSizeError(f"kernel of size {kernel.shape[0]} too large for a {h}x{w} map")


def presence_prob(occurrence: Tensor, kernel: Tensor) -> Tensor:
    """Gaussian-smoothed spatial max of each occurrence channel. (B, K, H, W) -> (B, K)."""
    b, k, h, w = occurrence.shape
    _check_kernel(kernel, h, w)
    size = kernel.shape[0]
    smoothed = conv2d(reshape(occurrence, (b * k, 1, h, w)), reshape(kernel, (1, 1, size, size)))
    return global_max(reshape(smoothed, (b, k, h, w)))


def pool_concept_features(features: Tensor, occurrence: Tensor, bank: ConceptBank) -> Tensor:
    """Probability-weighted mean residual per concept, scaled by 1/alpha and unit-normalised.

    Returns (B, K, D). A row whose residual norm falls below 1e-8 is the zero vector.
    """
    b, d, h, w = features.shape
    k = bank.num_concepts
    if occurrence.shape != (b, k, h, w):
        raise ShapeError(f"occurrence shape {occurrence.shape} != {(b, k, h, w)}")
    if d != bank.dim:
        raise ShapeError(f"feature channels {d} != concept dim {bank.dim}")
    s = transpose(reshape(features, (b, d, h * w)), (0, 2, 1))
    o = reshape(occurrence, (b, k, h * w))
    # The weighted mean is invariant to scaling a concept's weights, so divide
    # by each concept's peak (held constant) to keep tiny masses representable.
    peak = o.data.max(axis=-1, keepdims=True)
    o = o / np.where(peak > 0, peak, 1.0)
    weighted = matmul(o, s)  # b, k, d
    # Only a concept whose weights all underflow to exactly 0 needs the floor.
    mass = clamp_min(reshape(sum_(o, axis=-1), (b, k, 1)), MASS_FLOOR)
    resid = weighted / mass - reshape(bank.concepts, (1, k, d))
    t = resid / reshape(bank.smoothing(), (1, k, 1))
    return normalize(t, axis=-1, eps=ZERO_FEATURE_EPS)


def partition_cls_loss(z: Tensor, head: PartitionHead, labels) -> Tensor:
    return cross_entropy(head(z), labels)


def concept_presence_loss(presence: Tensor, delta: float = PRESENCE_DELTA) -> Tensor:
    """mean over images and concepts of |log(p + delta)|."""
    p = presence.data
    if p.size and (p.min() < -1e-6 or p.max() > 1 + 1e-6):
        raise DomainError(f"presence probabilities outside [0, 1]: [{p.min()}, {p.max()}]")
    return mean(abs_(log(presence + delta)))


def partition_total_loss(cls: Tensor, reg: Tensor, lambda_r: float = 1.0) -> Tensor:
    if lambda_r < 0:
        raise DomainError(f"lambda_r must be non-negative, got {lambda_r}")
    return cls + reg * lambda_r


@dataclass
class PartitionOutput:
    features: Tensor
    occurrence: Tensor
    presence: Tensor
    z: Tensor
    logits: Tensor


class PartitionModel(Module):
    def __init__(
        self,
        num_concepts: int,
        num_classes: int,
        rng: np.random.Generator,
        dim: int = 32,
        kernel_size: int = 3,
        kernel_sigma: float = 1.0,
    ):
        self.backbone = Backbone(rng, dim=dim)
        self.bank = ConceptBank(num_concepts, dim, rng)
        self.head = PartitionHead(num_concepts, dim, num_classes, rng)
        self.kernel = gaussian_kernel2d(kernel_size, kernel_sigma)
        self.assign_names("partition.")

    @property
    def num_concepts(self) -> int:
        return self.bank.num_concepts

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def init_concepts(self, images: np.ndarray, rng: np.random.Generator) -> None:
        with no_grad():
            feats = self.backbone(Tensor(images)).data
        self.bank.init_from_features(feats.transpose(0, 2, 3, 1).reshape(-1, self.bank.dim), rng)

    def concept_features(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """features, occurrence map and pooled concept features, skipping the head."""
        feats = self.backbone(images)
        occ = occurrence_probs(feats, self.bank)
        return feats, occ, pool_concept_features(feats, occ, self.bank)

    def __call__(self, images: Tensor) -> PartitionOutput:
        feats, occ, z = self.concept_features(images)
        return PartitionOutput(feats, occ, presence_prob(occ, self.kernel), z, self.head(z))

    def losses(self, out: PartitionOutput, labels, lambda_r: float) -> tuple[Tensor, Tensor, Tensor]:
        cls = cross_entropy(out.logits, labels)
        reg = concept_presence_loss(out.presence)
        return cls, reg, partition_total_loss(cls, reg, lambda_r)
