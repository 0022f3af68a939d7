"""Procedural part-structured images with ground-truth part masks.

Each image is tiled into part slots (the four quadrants, optionally a centre
patch on top). Every slot has its own background tint and shows one of
``attributes_per_part`` patterns. The label is a deterministic function of the
attributes in ``relevant_parts``; the remaining slots are drawn independently
of the label, so a faithful explanation should ignore them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from conceptmoe.errors import DomainError, FormatError, SpecError

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1
NOISE_STD = 0.05
# Patterns keep this many pixels away from every other slot, so features whose
# receptive field straddles a slot boundary see neighbouring tints but never
# neighbouring attributes.
PATTERN_MARGIN = 5
# Pattern pixels are a darker shade of the slot tint: hue identifies the slot,
# texture identifies the attribute.
PATTERN_SHADE = 0.4

# Slot background tints; distinct enough that slots are separable by colour alone.
_SLOT_BG = np.array(
    [
        [0.70, 0.20, 0.20],
        [0.20, 0.65, 0.25],
        [0.20, 0.30, 0.75],
        [0.70, 0.65, 0.15],
        [0.60, 0.25, 0.65],
    ],
    dtype=np.float32,
)
NUM_PATTERNS = 4
# Attribute a uses pattern a % 4 drawn at shade _SHADES[a // 4].
_SHADES = (PATTERN_SHADE, 0.15, 0.7)


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    num_parts: int = 4
    attributes_per_part: int = 4
    num_classes: int = 8
    relevant_parts: tuple[int, ...] = (0, 3)
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "relevant_parts", tuple(int(p) for p in self.relevant_parts))
        if self.num_parts not in (4, 5):
            raise SpecError(f"num_parts must be 4 or 5, got {self.num_parts}")
        if self.image_size < 8 or self.image_size % 4:
            raise SpecError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if not 1 <= self.attributes_per_part <= NUM_PATTERNS * len(_SHADES):
            raise SpecError(f"attributes_per_part must be in [1, {NUM_PATTERNS * len(_SHADES)}]")
        rel = self.relevant_parts
        if not rel or len(set(rel)) != len(rel) or any(not 0 <= p < self.num_parts for p in rel):
            raise SpecError(f"relevant_parts {rel} must be a non-empty subset of 0..{self.num_parts - 1}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if self.num_classes > self.attributes_per_part ** len(rel):
            raise SpecError(
                f"{self.num_classes} classes cannot be encoded by {len(rel)} relevant parts "
                f"with {self.attributes_per_part} variants each"
            )

    @property
    def irrelevant_parts(self) -> tuple[int, ...]:
        return tuple(p for p in range(self.num_parts) if p not in self.relevant_parts)

    def label_of(self, attributes: Sequence[int]) -> int:
        idx = 0
        for p in self.relevant_parts:
            idx = idx * self.attributes_per_part + int(attributes[p])
        return idx % self.num_classes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SynthSpec:
        return cls(**json.loads(text))


PRESETS = {
    "default": SynthSpec(),
    "center": SynthSpec(num_parts=5, relevant_parts=(0, 4)),
}


@dataclass
class SynthSample:
    image: np.ndarray  # 3 x S x S float32 in [0, 1]
    label: int
    part_mask: np.ndarray  # S x S uint8
    attributes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SynthSample):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.part_mask, other.part_mask)
            and np.array_equal(self.attributes, other.attributes)
        )


def part_mask(spec: SynthSpec) -> np.ndarray:
    s = spec.image_size
    half = s // 2
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[:half, half:] = 1
    mask[half:, :half] = 2
    mask[half:, half:] = 3
    if spec.num_parts == 5:
        q = s // 4
        mask[q : s - q, q : s - q] = 4
    return mask


def _pattern(kind: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # horizontal bars
        m = (yy // 2) % 2 == 0
    elif kind == 1:  # vertical bars
        m = (xx // 2) % 2 == 0
    elif kind == 2:  # checkerboard
        m = ((yy // 2) + (xx // 2)) % 2 == 0
    else:  # centred square
        m = (np.abs(yy - (h - 1) / 2) < h / 4) & (np.abs(xx - (w - 1) / 2) < w / 4)
    return m.astype(np.float32)


def render(spec: SynthSpec, attributes: Sequence[int]) -> np.ndarray:
    """Noise-free 3 x S x S image for the given per-slot attribute codes."""
    mask = part_mask(spec)
    s = spec.image_size
    img = np.zeros((3, s, s), dtype=np.float32)
    for slot in range(spec.num_parts):
        region = mask == slot
        core = binary_erosion(region, iterations=PATTERN_MARGIN, border_value=1)
        rows, cols = np.nonzero(region)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        a = int(attributes[slot])
        pat = np.zeros((s, s), dtype=np.float32)
        pat[r0:r1, c0:c1] = _pattern(a % NUM_PATTERNS, r1 - r0, c1 - c0)
        pat *= core
        bg = _SLOT_BG[slot]
        fg = bg * _SHADES[a // NUM_PATTERNS]
        img[:, region] = (bg[:, None] * (1 - pat[region]) + fg[:, None] * pat[region]).astype(np.float32)
    return img


def _class_sequence(spec: SynthSpec, n: int) -> np.ndarray:
    labels = np.arange(n) % spec.num_classes
    return np.random.default_rng([spec.seed, 0]).permutation(labels)


def _combos_by_class(spec: SynthSpec) -> list[np.ndarray]:
    a, r = spec.attributes_per_part, len(spec.relevant_parts)
    combos = np.array(np.unravel_index(np.arange(a**r), (a,) * r)).T  # mixed radix, first part most significant
    by_class = [[] for _ in range(spec.num_classes)]
    for combo in combos:
        idx = 0
        for v in combo:
            idx = idx * a + int(v)
        by_class[idx % spec.num_classes].append(combo)
    return [np.array(c) for c in by_class]


def generate_one(spec: SynthSpec, index: int, label: int, combos: list[np.ndarray] | None = None) -> SynthSample:
    """Sample ``index`` with class ``label``; pure in (spec, index, label)."""
    combos = _combos_by_class(spec) if combos is None else combos
    rng = np.random.default_rng([spec.seed, 1, index])
    attrs = rng.integers(0, spec.attributes_per_part, size=spec.num_parts)
    choice = combos[label][rng.integers(len(combos[label]))]
    attrs[list(spec.relevant_parts)] = choice
    img = render(spec, attrs)
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    assert spec.label_of(attrs) == label
    return SynthSample(img, int(label), part_mask(spec), attrs.astype(np.uint8))


def generate(spec: SynthSpec, n: int) -> list[SynthSample]:
    if n < 1:
        raise SpecError(f"need n >= 1, got {n}")
    labels = _class_sequence(spec, n)
    combos = _combos_by_class(spec)
    return [generate_one(spec, i, int(labels[i]), combos) for i in range(n)]


def mean_color(samples: Iterable[SynthSample]) -> np.ndarray:
    """Per-channel mean pixel value over a collection, float32."""
    total = np.zeros(3)
    count = 0
    for s in samples:
        total += s.image.reshape(3, -1).sum(axis=1, dtype=np.float64)
        count += s.image[0].size
    if count == 0:
        raise DomainError("mean colour of an empty collection")
    return (total / count).astype(np.float32)


def occlude_parts(sample: SynthSample, slots: Iterable[int], fill: Sequence[float]) -> SynthSample:
    """Copy of ``sample`` with every pixel in ``slots`` set to the ``fill`` colour."""
    slots = sorted(set(int(s) for s in slots))
    present = int(sample.part_mask.max()) + 1 if sample.part_mask.size else 0
    num_parts = max(present, len(sample.attributes))
    bad = [s for s in slots if not 0 <= s < num_parts]
    if bad:
        raise DomainError(f"unknown slot ids {bad}; valid ids are 0..{num_parts - 1}")
    img = sample.image.copy()
    if slots:
        where = np.isin(sample.part_mask, slots)
        fill = np.asarray(fill, dtype=img.dtype).reshape(3)
        for ch in range(3):
            img[ch][where] = fill[ch]
    return replace(sample, image=img)


@dataclass
class Dataset:
    samples: list[SynthSample]
    spec: SynthSpec | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float64)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def masks(self) -> np.ndarray:
        return np.stack([s.part_mask for s in self.samples])

    def subset(self, idx) -> Dataset:
        return Dataset([self.samples[i] for i in idx], self.spec)


def make_dataset(spec: SynthSpec, n: int) -> Dataset:
    return Dataset(generate(spec, n), spec)


# ---------------------------------------------------------------------------
# binary file format
#
#   "CMDS" | u32 version | u64 count | u32 channels | u32 height | u32 width
#   | u32 num_parts | u32 spec_len | spec json (utf-8, may be empty)
#   then per sample: f32 pixels (C*H*W) | u16 label | u8 mask (H*W) | u8 attributes (num_parts)
# All integers little-endian.

_HEADER = struct.Struct("<4sIQIIIII")


def write_dataset(samples, path, spec: SynthSpec | None = None) -> None:
    if isinstance(samples, Dataset):
        spec = spec or samples.spec
        samples = samples.samples
    samples = list(samples)
    spec_bytes = spec.to_json().encode() if spec is not None else b""
    if samples:
        c, h, w = samples[0].image.shape
        num_parts = len(samples[0].attributes)
    elif spec is not None:
        c, h, w, num_parts = 3, spec.image_size, spec.image_size, spec.num_parts
    else:
        c, h, w, num_parts = 3, 0, 0, 0
    buf = io.BytesIO()
    buf.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), c, h, w, num_parts, len(spec_bytes)))
    buf.write(spec_bytes)
    for s in samples:
        if s.image.shape != (c, h, w) or s.part_mask.shape != (h, w) or len(s.attributes) != num_parts:
            raise FormatError("samples in one file must share image, mask and attribute shapes")
        buf.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        buf.write(struct.pack("<H", s.label))
        buf.write(np.ascontiguousarray(s.part_mask, dtype=np.uint8).tobytes())
        buf.write(np.ascontiguousarray(s.attributes, dtype=np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, num_parts, spec_len = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    if len(raw) < off + spec_len:
        raise FormatError(f"{path}: truncated spec block")
    spec = None
    if spec_len:
        try:
            spec = SynthSpec.from_json(raw[off : off + spec_len].decode())
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}: corrupt spec block ({exc})") from None
    off += spec_len
    npix = c * h * w
    rec = 4 * npix + 2 + h * w + num_parts
    if len(raw) != off + n * rec:
        raise FormatError(f"{path}: expected {off + n * rec} bytes for {n} samples, found {len(raw)}")
    samples = []
    for _ in range(n):
        img = np.frombuffer(raw, dtype="<f4", count=npix, offset=off).reshape(c, h, w).astype(np.float32)
        off += 4 * npix
        (label,) = struct.unpack_from("<H", raw, off)
        off += 2
        mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
        off += h * w
        attrs = np.frombuffer(raw, dtype=np.uint8, count=num_parts, offset=off).copy()
        off += num_parts
        samples.append(SynthSample(img, int(label), mask, attrs))
    return Dataset(samples, spec)
