"""Two-stage training.

Stage 1 fits backbone, concept bank and partition head on classification
loss plus the concept-presence regulariser. Stage 2 freezes all of that,
caches the concept features once, and fits the experts and the gate.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from conceptmoe.checkpoint import MOMENTUM_SUFFIX, Checkpoint, load_checkpoint, save_checkpoint
from conceptmoe.errors import ConfigError, DivergenceError, FormatError
from conceptmoe.moe import MoEModel, uniformity_penalty
from conceptmoe.numerics import OptimizerConfig, Tensor, no_grad, sgd_step
from conceptmoe.numerics.layers import Module
from conceptmoe.partition import PartitionModel
from conceptmoe.synthdata import Dataset

MASK64 = (1 << 64) - 1

# Sub-seed streams derived from the single run seed.
STREAM_PARTITION_INIT = 0
STREAM_PARTITION_SHUFFLE = 1
STREAM_MOE_INIT = 2
STREAM_MOE_SHUFFLE = 3
STREAM_CONCEPT_INIT = 4

# Images whose backbone features seed the concept vectors.
CONCEPT_INIT_IMAGES = 64


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Sub-seed number ``stream`` of ``seed``: splitmix64 applied to seed + stream * golden gamma."""
    return splitmix64((seed + stream * 0x9E3779B97F4A7C15) & MASK64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    gamma: float = 1.0
    num_concepts: int = 6
    epochs: int = 200
    batch_size: int = 32
    lambda_r: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.optimizer()  # validates lr / momentum / weight decay
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.lambda_r < 0:
            raise ConfigError(f"lambda_r must be non-negative, got {self.lambda_r}")
        if self.num_concepts < 2:
            raise ConfigError(f"num_concepts must be at least 2, got {self.num_concepts}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay)

    def to_dict(self) -> dict[str, str]:
        return {k: repr(v) for k, v in asdict(self).items()}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_dict(cls, values: dict[str, object], base: TrainConfig | None = None) -> TrainConfig:
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            conv = int if types[key] in ("int", int) else float
            try:
                if conv is int and isinstance(raw, str):
                    parsed[key] = int(raw, 0)
                else:
                    parsed[key] = conv(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot parse {raw!r} as {conv.__name__}") from None
            if conv is float and not math.isfinite(parsed[key]):
                raise ConfigError(f"{key}: must be finite")
        return replace(base or cls(), **parsed)


def parse_config(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_config(path, overrides: dict[str, object] | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: not UTF-8 text") from None
    cfg = TrainConfig.from_dict(parse_config(text))
    return TrainConfig.from_dict(overrides, cfg) if overrides else cfg


@dataclass
class TrainResult:
    model: Module
    metrics: list[dict[str, float]]
    epoch: int
    rng: np.random.Generator
    config: TrainConfig


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.images(), data.labels()
    images, labels = data
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def _rng_from_state(text: str) -> np.random.Generator:
    state = json.loads(text)
    if state.get("bit_generator") != "PCG64":
        raise FormatError(f"unsupported RNG {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def _param_state(model: Module) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        out[p.name] = p.data.copy()
        out[p.name + MOMENTUM_SUFFIX] = p.momentum_buffer.copy()
    return out


def _load_param_state(model: Module, state: dict[str, np.ndarray], with_momentum: bool = True) -> None:
    for p in model.parameters():
        if p.name not in state:
            raise FormatError(f"checkpoint lacks parameter {p.name!r}")
        if state[p.name].shape != p.shape:
            raise FormatError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
        p.data[...] = state[p.name]
        mom = state.get(p.name + MOMENTUM_SUFFIX)
        if with_momentum and mom is not None:
            p.momentum_buffer[...] = mom


def param_digest(model: Module) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def build_partition(cfg: TrainConfig, num_classes: int) -> PartitionModel:
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_PARTITION_INIT))
    return PartitionModel(cfg.num_concepts, num_classes, rng)


def build_moe(cfg: TrainConfig, num_concepts: int, dim: int, num_classes: int) -> MoEModel:
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_MOE_INIT))
    return MoEModel(num_concepts, dim, num_classes, rng)


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


# ---------------------------------------------------------------------------
# stage 1


def train_partition(
    data,
    cfg: TrainConfig,
    num_classes: int | None = None,
    resume: Checkpoint | None = None,
    stop_at_epoch: int | None = None,
) -> TrainResult:
    """Minibatch SGD on l_cls + lambda_r * l_r. Metrics: one row per epoch."""
    images, labels = _arrays(data)
    if len(labels) == 0:
        raise ValueError("training set is empty")
    if resume is not None:
        model, metrics, start, rng = _resume_partition(resume, cfg)
    else:
        num_classes = num_classes or int(labels.max()) + 1
        model = build_partition(cfg, num_classes)
        init_rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_CONCEPT_INIT))
        pick = init_rng.permutation(len(labels))[:CONCEPT_INIT_IMAGES]
        model.init_concepts(images[np.sort(pick)], init_rng)
        metrics, start = [], 0
        rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_PARTITION_SHUFFLE))
    params = model.parameters()
    opt = cfg.optimizer()
    end = cfg.epochs if stop_at_epoch is None else min(stop_at_epoch, cfg.epochs)

    for epoch in range(start + 1, end + 1):
        sums = np.zeros(3)
        correct = 0
        for idx in _batches(rng, len(labels), cfg.batch_size):
            out = model(Tensor(images[idx]))
            l_cls, l_r, total = model.losses(out, labels[idx], cfg.lambda_r)
            if not _finite(total.item()):
                raise DivergenceError("partition", epoch)
            total.backward()
            sgd_step(params, opt)
            sums += np.array([l_cls.item(), l_r.item(), total.item()]) * len(idx)
            correct += int((out.logits.data.argmax(axis=1) == labels[idx]).sum())
        n = len(labels)
        metrics.append(
            {"epoch": epoch, "l_cls": sums[0] / n, "l_r": sums[1] / n, "total": sums[2] / n, "accuracy": correct / n}
        )
    return TrainResult(model, metrics, end if end > start else start, rng, cfg)


def _resume_partition(ckpt: Checkpoint, cfg: TrainConfig):
    if ckpt.partition is None or ckpt.meta.get("stage") != "partition":
        raise FormatError("checkpoint does not hold an in-progress partition stage")
    model = build_partition(cfg, int(ckpt.meta["num_classes"]))
    _load_param_state(model, ckpt.partition)
    return model, _metrics_from_meta(ckpt.meta), int(ckpt.meta["epoch"]), _rng_from_state(ckpt.meta["rng_state"])


# ---------------------------------------------------------------------------
# stage 2


def concept_features(partition: PartitionModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Frozen-model concept features (N, K, D), computed without a graph."""
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            _, _, z = partition.concept_features(Tensor(images[i : i + chunk]))
            out.append(z.data)
    return np.concatenate(out) if out else np.zeros((0, partition.num_concepts, partition.bank.dim))


def train_moe(
    data,
    partition: PartitionModel,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    stop_at_epoch: int | None = None,
    features: np.ndarray | None = None,
) -> TrainResult:
    """Minibatch SGD on l_ept + l_g over experts and gate; ``partition`` is read-only.

    ``features`` may carry precomputed concept features for ``data``.
    """
    images, labels = _arrays(data)
    if len(labels) == 0:
        raise ValueError("training set is empty")
    z_all = concept_features(partition, images) if features is None else features
    k, d = partition.num_concepts, partition.bank.dim
    if resume is not None:
        if resume.moe is None or resume.meta.get("stage") != "moe":
            raise FormatError("checkpoint does not hold an in-progress moe stage")
        model = build_moe(cfg, k, d, partition.num_classes)
        _load_param_state(model, resume.moe)
        metrics, start = _metrics_from_meta(resume.meta), int(resume.meta["epoch"])
        rng = _rng_from_state(resume.meta["rng_state"])
    else:
        model = build_moe(cfg, k, d, partition.num_classes)
        metrics, start = [], 0
        rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_MOE_SHUFFLE))
    params = model.parameters()
    opt = cfg.optimizer()
    end = cfg.epochs if stop_at_epoch is None else min(stop_at_epoch, cfg.epochs)

    for epoch in range(start + 1, end + 1):
        sums = np.zeros(4)
        correct = 0
        for idx in _batches(rng, len(labels), cfg.batch_size):
            out = model(Tensor(z_all[idx]))
            l_ept, l_g, total = model.losses(out, labels[idx], cfg.gamma)
            if not _finite(total.item()):
                raise DivergenceError("moe", epoch)
            total.backward()
            sgd_step(params, opt)
            pen = uniformity_penalty(out.weights)
            sums += np.array([l_ept.item(), l_g.item(), total.item(), pen]) * len(idx)
            correct += int((out.predicted_class == labels[idx]).sum())
        n = len(labels)
        metrics.append(
            {
                "epoch": epoch,
                "l_ept": sums[0] / n,
                "l_g": sums[1] / n,
                "total": sums[2] / n,
                "penalty": sums[3] / n,
                "accuracy": correct / n,
            }
        )
    return TrainResult(model, metrics, end if end > start else start, rng, cfg)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    weights: np.ndarray  # N x K
    expert_probs: np.ndarray  # N x K x C
    aggregate: np.ndarray  # N x C
    predicted: np.ndarray  # N


def predict_features(moe: MoEModel, z: np.ndarray, chunk: int = 512) -> Prediction:
    ws, ps, aggs = [], [], []
    with no_grad():
        for i in range(0, len(z), chunk):
            out = moe(Tensor(z[i : i + chunk]))
            ws.append(out.weights.data)
            ps.append(out.expert_probs.data)
            aggs.append(out.aggregate.data)
    agg = np.concatenate(aggs)
    return Prediction(np.concatenate(ws), np.concatenate(ps), agg, agg.argmax(axis=1))


def predict(partition: PartitionModel, moe: MoEModel, images: np.ndarray) -> Prediction:
    return predict_features(moe, concept_features(partition, images))


def accuracy(partition: PartitionModel, moe: MoEModel, data) -> float:
    images, labels = _arrays(data)
    return float(np.mean(predict(partition, moe, images).predicted == labels))


# ---------------------------------------------------------------------------
# persistence


def _metrics_to_meta(metrics: list[dict[str, float]]) -> str:
    return json.dumps(metrics)


def _metrics_from_meta(meta: dict[str, str]) -> list[dict[str, float]]:
    return json.loads(meta.get("metrics", "[]"))


def make_checkpoint(
    cfg: TrainConfig,
    partition: PartitionModel,
    moe: MoEModel | None = None,
    stage: str = "partition",
    epoch: int = 0,
    rng: np.random.Generator | None = None,
    metrics: list[dict[str, float]] | None = None,
) -> Checkpoint:
    meta = {
        "stage": stage,
        "epoch": str(epoch),
        "num_classes": str(partition.num_classes),
        "num_concepts": str(partition.num_concepts),
        "dim": str(partition.bank.dim),
        "rng_state": _rng_state(rng) if rng is not None else "",
        "metrics": _metrics_to_meta(metrics or []),
    }
    return Checkpoint(
        cfg.to_dict(),
        meta,
        _param_state(partition),
        _param_state(moe) if moe is not None else None,
    )


def checkpoint_from_result(result: TrainResult, partition: PartitionModel | None = None) -> Checkpoint:
    """Checkpoint for the end state of a stage-1 or stage-2 result."""
    if isinstance(result.model, PartitionModel):
        return make_checkpoint(result.config, result.model, None, "partition", result.epoch, result.rng, result.metrics)
    if partition is None:
        raise ValueError("a moe checkpoint needs the frozen partition model")
    return make_checkpoint(result.config, partition, result.model, "moe", result.epoch, result.rng, result.metrics)


def config_from_checkpoint(ckpt: Checkpoint) -> TrainConfig:
    try:
        return TrainConfig.from_dict(dict(ckpt.config))
    except ConfigError as exc:
        raise FormatError(f"checkpoint config: {exc}") from None


def partition_from_checkpoint(ckpt: Checkpoint) -> PartitionModel:
    if ckpt.partition is None:
        raise FormatError("checkpoint has no partition section")
    cfg = config_from_checkpoint(ckpt)
    model = build_partition(cfg, int(ckpt.meta["num_classes"]))
    _load_param_state(model, ckpt.partition)
    return model


def moe_from_checkpoint(ckpt: Checkpoint) -> MoEModel:
    if ckpt.moe is None:
        raise FormatError("checkpoint has no moe section")
    cfg = config_from_checkpoint(ckpt)
    model = build_moe(cfg, int(ckpt.meta["num_concepts"]), int(ckpt.meta["dim"]), int(ckpt.meta["num_classes"]))
    _load_param_state(model, ckpt.moe)
    return model


__all__ = [
    "Checkpoint",
    "Prediction",
    "TrainConfig",
    "TrainResult",
    "accuracy",
    "checkpoint_from_result",
    "concept_features",
    "derive_seed",
    "load_checkpoint",
    "load_config",
    "make_checkpoint",
    "moe_from_checkpoint",
    "param_digest",
    "parse_config",
    "partition_from_checkpoint",
    "predict",
    "predict_features",
    "save_checkpoint",
    "splitmix64",
    "train_moe",
    "train_partition",
    "write_metrics_csv",
]


def write_metrics_csv(metrics: Sequence[dict[str, float]], path) -> None:
    """CSV with a header row; floats written with 17 significant digits."""
    if not metrics:
        Path(path).write_text("")
        return
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    keys = list(metrics[0])
    writer.writerow(keys)
    for row in metrics:
        writer.writerow([_fmt(row[k]) for k in keys])
    Path(path).write_text(buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")
