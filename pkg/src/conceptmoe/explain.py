"""Explanation artifacts: importance tables, ablation curves, partition overlays
and ground-truth partition purity for the synthetic data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from conceptmoe.errors import DomainError, ShapeError
from conceptmoe.moe import MoEModel
from conceptmoe.numerics import Tensor, no_grad
from conceptmoe.partition import PartitionModel, hard_partition
from conceptmoe.pipeline import concept_features, predict_features
from conceptmoe.synthdata import Dataset, SynthSample, mean_color, occlude_parts

ZERO_FEATURES = "zero-concept-features"
OCCLUDE_INPUT = "occlude-input"
MECHANISMS = (ZERO_FEATURES, OCCLUDE_INPUT)
MODES = ("add", "remove")

# Eight well-separated colours, one per concept id (cycled when K > 8).
PALETTE = np.array(
    [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [245, 130, 48],
        [70, 240, 240],
        [128, 128, 128],
    ],
    dtype=np.uint8,
)


class MissingMasksError(DomainError):
    """Ground-truth part masks are needed but the data carries none."""


@dataclass
class ImportanceReport:
    mean_weights: np.ndarray  # K
    ranking: np.ndarray  # concept ids, most important first
    gamma: float | None = None

    @property
    def num_concepts(self) -> int:
        return len(self.mean_weights)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "concept", "mean_weight"])
        for r, j in enumerate(self.ranking):
            w.writerow([r, int(j), format(float(self.mean_weights[j]), ".17g")])
        return buf.getvalue()


@dataclass
class AblationCurve:
    mode: str
    mechanism: str
    points: list[tuple[int, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parts", "accuracy"])
        for n, acc in self.points:
            w.writerow([n, format(acc, ".17g")])
        return buf.getvalue()


def _images_labels(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.images(), data.labels()
    images, labels = data
    return np.asarray(images, dtype=np.float64), np.asarray(labels)


def report_from_weights(weights: np.ndarray, gamma: float | None = None) -> ImportanceReport:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"weights must be (N, K), got {weights.shape}")
    if weights.shape[0] == 0:
        raise DomainError("cannot average importance weights over an empty split")
    avg = weights.mean(axis=0)
    # stable sort so equal weights keep concept order
    ranking = np.argsort(-avg, kind="stable")
    return ImportanceReport(avg, ranking, gamma)


def importance_table(
    partition: PartitionModel, moe: MoEModel, data, gamma: float | None = None, features: np.ndarray | None = None
) -> ImportanceReport:
    """Mean gate weight per concept over a split, ranked in descending order."""
    images, _ = _images_labels(data)
    if len(images) == 0:
        raise DomainError("cannot average importance weights over an empty split")
    z = concept_features(partition, images) if features is None else features
    return report_from_weights(predict_features(moe, z).weights, gamma)


def concept_slot_map(partition: PartitionModel, data: Dataset) -> np.ndarray:
    """Majority ground-truth slot for every concept (see ``partition_purity``)."""
    return partition_purity(partition, data)[1]


def slot_ranking(report: ImportanceReport, slot_of_concept: np.ndarray, num_slots: int) -> np.ndarray:
    """Slots ordered by importance, most important first.

    A slot scores the largest mean weight among the concepts mapped to it; a
    slot no concept maps to scores -1 and sorts last.
    """
    score = np.full(num_slots, -1.0)
    for j, s in enumerate(slot_of_concept):
        score[s] = max(score[s], report.mean_weights[j])
    return np.argsort(-score, kind="stable")


def _accuracy_with_disabled(
    moe: MoEModel, z: np.ndarray, labels: np.ndarray, disabled: Sequence[int]
) -> float:
    z = z.copy()
    z[:, list(disabled), :] = 0.0
    return float(np.mean(predict_features(moe, z).predicted == labels))


def _accuracy_occluded(
    partition: PartitionModel,
    moe: MoEModel,
    data: Dataset,
    disabled: Sequence[int],
    slot_of_concept: np.ndarray,
    fill: np.ndarray,
) -> float:
    slots = sorted({int(slot_of_concept[j]) for j in disabled})
    if slots:
        samples = [occlude_parts(s, slots, fill) for s in data]
        images = np.stack([s.image for s in samples]).astype(np.float64)
    else:
        images = data.images()
    z = concept_features(partition, images)
    return float(np.mean(predict_features(moe, z).predicted == data.labels()))


def ablation_curve(
    partition: PartitionModel,
    moe: MoEModel,
    data,
    report: ImportanceReport,
    mode: str = "remove",
    mechanism: str = ZERO_FEATURES,
    features: np.ndarray | None = None,
) -> AblationCurve:
    """Accuracy after adding or removing the n most important concepts, n = 0..K."""
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}, got {mode!r}")
    if mechanism not in MECHANISMS:
        raise DomainError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    k = report.num_concepts
    order = [int(j) for j in report.ranking]

    if mechanism == OCCLUDE_INPUT:
        if not isinstance(data, Dataset):
            raise MissingMasksError("occlude-input ablation needs data with ground-truth part masks")
        slot_of_concept = concept_slot_map(partition, data)
        fill = mean_color(data)

        def acc(disabled):
            return _accuracy_occluded(partition, moe, data, disabled, slot_of_concept, fill)

    else:
        images, labels = _images_labels(data)
        z = concept_features(partition, images) if features is None else features

        def acc(disabled):
            return _accuracy_with_disabled(moe, z, labels, disabled)

    points = []
    for n in range(k + 1):
        disabled = order[:n] if mode == "remove" else order[n:]
        points.append((n, acc(disabled)))
    return AblationCurve(mode, mechanism, points)


# ---------------------------------------------------------------------------
# overlays


@dataclass
class Overlay:
    pixels: np.ndarray  # H x W x 3 uint8
    concept_grid: np.ndarray  # image-resolution concept ids
    presence: np.ndarray  # K

    def to_ppm(self) -> bytes:
        h, w, _ = self.pixels.shape
        return f"P6\n{w} {h}\n255\n".encode() + self.pixels.tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_ppm())


def upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upsample: output pixel (y, x) takes grid cell (y*h//H, x*w//W)."""
    h, w = grid.shape
    rows = np.arange(height) * h // height
    cols = np.arange(width) * w // width
    return grid[rows[:, None], cols[None, :]]


def partition_overlay(partition: PartitionModel, sample) -> Overlay:
    image = sample.image if isinstance(sample, SynthSample) else np.asarray(sample)
    image = np.asarray(image, dtype=np.float64)
    with no_grad():
        out = partition(Tensor(image[None]))
    grid = hard_partition(out.occurrence)[0]
    full = upsample_nearest(grid, image.shape[1], image.shape[2])
    return Overlay(PALETTE[full % len(PALETTE)], full, out.presence.data[0].copy())


def read_ppm(raw: bytes) -> np.ndarray:
    """Parse the P6 files written by ``Overlay.to_ppm``."""
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6":
        raise ValueError("not a binary P6 pixmap")
    w, h = map(int, parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only 8-bit pixmaps are supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# purity


def downsample_majority(masks: np.ndarray, height: int, width: int, num_slots: int) -> np.ndarray:
    """(N, H, W) slot masks -> (N, height, width) by majority vote per block; ties to lowest slot."""
    n, big_h, big_w = masks.shape
    if big_h % height or big_w % width:
        raise ShapeError(f"mask size {big_h}x{big_w} not divisible into {height}x{width}")
    bh, bw = big_h // height, big_w // width
    blocks = masks.reshape(n, height, bh, width, bw).transpose(0, 1, 3, 2, 4).reshape(n, height, width, bh * bw)
    counts = (blocks[..., None] == np.arange(num_slots)).sum(axis=-2)
    return counts.argmax(axis=-1)


def purity_from_assignments(
    concepts: np.ndarray, slots: np.ndarray, num_concepts: int, num_slots: int, soft: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Purity of a hard concept assignment against true slots at the same positions.

    ``concepts`` and ``slots`` are integer arrays of equal shape. A concept that
    is never the argmax gets its majority slot from ``soft`` (K x positions
    probabilities aligned with ``slots``) if given, else slot 0; it covers no
    position, so the choice cannot change the purity.
    """
    concepts = np.asarray(concepts).ravel()
    slots = np.asarray(slots).ravel()
    table = np.zeros((num_concepts, num_slots))
    np.add.at(table, (concepts, slots), 1)
    majority = table.argmax(axis=1)
    unused = table.sum(axis=1) == 0
    if soft is not None and unused.any():
        soft = np.asarray(soft).reshape(num_concepts, -1)
        mass = np.zeros((num_concepts, num_slots))
        for s in range(num_slots):
            mass[:, s] = soft[:, slots == s].sum(axis=1)
        majority[unused] = mass[unused].argmax(axis=1)
    purity = float(np.mean(majority[concepts] == slots)) if concepts.size else 0.0
    return purity, majority


def partition_purity(partition: PartitionModel, data: Dataset, chunk: int = 256) -> tuple[float, np.ndarray]:
    """Fraction of feature-map positions whose concept's majority slot is the true slot."""
    if not isinstance(data, Dataset):
        raise MissingMasksError("partition purity needs ground-truth part masks")
    if len(data) == 0:
        raise DomainError("cannot compute purity over an empty split")
    masks = data.masks()
    num_slots = data.spec.num_parts if data.spec is not None else int(masks.max()) + 1
    images = data.images()
    grids, occs = [], []
    with no_grad():
        for i in range(0, len(images), chunk):
            _, occ, _ = partition.concept_features(Tensor(images[i : i + chunk]))
            grids.append(hard_partition(occ))
            occs.append(occ.data)
    grid = np.concatenate(grids)
    occ = np.concatenate(occs)
    _, h, w = grid.shape
    true = downsample_majority(masks, h, w, num_slots)
    k = partition.num_concepts
    soft = occ.transpose(1, 0, 2, 3).reshape(k, -1)
    return purity_from_assignments(grid, true, k, num_slots, soft)


def write_report(path, text: str) -> None:
    Path(path).write_text(text)
