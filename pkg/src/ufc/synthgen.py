"""Synthetic pseudo-medical images with hidden classes and exact masks.

Each image holds one structure drawn from a class family (blob, ring, bar,
textured patch) on a smooth background. ``contrast`` interpolates the
class-specific intensity profile and geometry towards a shared appearance,
so low contrast means the classes look alike.

Samples are grouped into synthetic "volumes" whose slices run through the
classes in order with some local shuffling, which lets positional pair
selection be simulated without 3-D data.

Latent classes are held back from training code: ``Dataset.training_view``
exposes ids, images and masks only; ``Dataset.evaluation_view`` is the one
place the latent classes are readable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng

MAGIC = b"UFCD"
VERSION = 1
STRATEGIES = ("instance_discrimination", "positional", "cluster_guided")


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 400
    n_classes: int = 4
    size: int = 32
    contrast: float = 0.3
    intra_variation: float = 0.35
    noise: float = 0.05
    imbalance: float = 2.0
    slices_per_volume: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.size < 16:
            raise ValueError(f"image size {self.size} < 16: the UNet needs two 2x poolings")
        if self.size % 4:
            raise ValueError(f"image size {self.size} must be divisible by 4")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_samples < self.n_classes:
            raise ValueError("n_samples must be >= n_classes")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.imbalance < 1.0:
            raise ValueError("imbalance ratio must be >= 1")
        if self.noise < 0 or self.intra_variation < 0:
            raise ValueError("noise and intra_variation must be nonnegative")
        if self.slices_per_volume < 1:
            raise ValueError("slices_per_volume must be >= 1")


@dataclass
class Sample:
    id: int
    image: np.ndarray
    mask: np.ndarray
    latent_class: int
    volume_id: int | None = None
    slice_index: int | None = None


@dataclass(frozen=True)
class TrainingView:
    """What training code may see. Masks are only read by fine-tuning."""

    ids: np.ndarray
    images: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids) -> "TrainingView":
        pos = _positions(self.ids, ids)
        return TrainingView(self.ids[pos], self.images[pos], self.masks[pos])


@dataclass(frozen=True)
class EvaluationView:
    ids: np.ndarray
    latent_classes: np.ndarray
    volume_ids: np.ndarray
    slice_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _positions(all_ids: np.ndarray, ids) -> np.ndarray:
    lookup = {int(i): k for k, i in enumerate(all_ids)}
    try:
        return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"unknown sample id {exc.args[0]}") from None


class Dataset:
    def __init__(self, spec: DatasetSpec, ids, images, masks, latent_classes, volume_ids, slice_indices):
        self.spec = spec
        self._ids = np.asarray(ids, dtype=np.int64)
        self._images = np.asarray(images, dtype=np.float32)
        self._masks = np.asarray(masks, dtype=np.uint8)
        self._latent = np.asarray(latent_classes, dtype=np.int64)
        self._volume = np.asarray(volume_ids, dtype=np.int64)
        self._slice = np.asarray(slice_indices, dtype=np.int64)
        if len(set(self._ids.tolist())) != len(self._ids):
            raise ValueError("duplicate sample ids")

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    def training_view(self) -> TrainingView:
        return TrainingView(self._ids, self._images, self._masks)

    def evaluation_view(self) -> EvaluationView:
        return EvaluationView(self._ids, self._latent, self._volume, self._slice)

    def samples(self) -> list[Sample]:
        return [
            Sample(int(i), self._images[k], self._masks[k], int(self._latent[k]),
                   int(self._volume[k]), int(self._slice[k]))
            for k, i in enumerate(self._ids)
        ]


# ---------------------------------------------------------------------------
# rendering


def class_counts(n: int, n_classes: int, imbalance: float) -> np.ndarray:
    """Per-class sizes with weights falling linearly from ``imbalance`` to 1."""
    w = np.linspace(imbalance, 1.0, n_classes)
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    counts[counts == 0] = 1
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    return counts


def _layout(spec: DatasetSpec, rng: np.random.Generator):
    """Latent class, volume id and slice index per sample."""
    counts = class_counts(spec.n_samples, spec.n_classes, spec.imbalance)
    pool = np.repeat(np.arange(1, spec.n_classes + 1), counts)
    pool = rng.permutation(pool)
    classes, volumes, slices = [], [], []
    L = spec.slices_per_volume
    for v, start in enumerate(range(0, spec.n_samples, L)):
        chunk = np.sort(pool[start : start + L])
        # drift: a few adjacent swaps blur class boundaries along the axis
        for _ in range(len(chunk) // 4):
            j = int(rng.integers(0, max(1, len(chunk) - 1)))
            if j + 1 < len(chunk):
                chunk[j], chunk[j + 1] = chunk[j + 1], chunk[j]
        classes.extend(chunk.tolist())
        volumes.extend([v] * len(chunk))
        slices.extend(range(len(chunk)))
    return np.array(classes), np.array(volumes), np.array(slices)


# per-family foreground level offsets, scaled by contrast
_LEVEL_OFFSETS = (-0.25, 0.25, -0.08, 0.08)


def _structure(family: int, c: int, spec: DatasetSpec, rng, yy, xx):
    """Boolean support and foreground intensity field for one structure."""
    s = spec.size
    k = spec.contrast
    iv = spec.intra_variation
    scale = s / 32.0
    cy, cx = (0.5 + 0.12 * iv * rng.uniform(-1, 1, size=2)) * s
    r = scale * (6.5 + iv * rng.uniform(-1.5, 1.5)) * (1.0 + 0.1 * ((c - 1) // 4))
    theta = np.pi / 4 + iv * rng.uniform(-np.pi / 2, np.pi / 2)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rad = np.sqrt(dy**2 + dx**2)

    if family == 0:  # blob: ellipse, bright centre
        aspect = 1.0 + iv * rng.uniform(0.0, 0.3)
        support = (u / (r * aspect)) ** 2 + (v / r) ** 2 <= 1.0
        pattern = 1.0 - rad / (r * aspect)
    elif family == 1:  # ring: hole grows with contrast
        inner = r * (0.15 + 0.45 * k)
        support = (rad <= r) & (rad >= inner)
        pattern = np.zeros_like(rad)
    elif family == 2:  # bar: elongation grows with contrast
        half_len = r * (1.0 + 0.6 * k)
        half_wid = r * (1.0 - 0.55 * k)
        support = (np.abs(u) <= half_len) & (np.abs(v) <= half_wid)
        pattern = u / half_len
    else:  # textured patch: square with stripes
        half = r * 0.9
        support = (np.abs(u) <= half) & (np.abs(v) <= half)
        pattern = np.sign(np.sin(u * np.pi / (2.0 * scale)))
    level = 0.62 + k * _LEVEL_OFFSETS[family] + 0.04 * iv * rng.uniform(-1, 1)
    field = level + 0.12 * k * pattern
    return support, field


def render_sample(spec: DatasetSpec, sample_id: int, latent_class: int):
    rng = make_rng(spec.seed, "synthgen", sample_id)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    iv = spec.intra_variation
    bg_level = 0.23 + 0.05 * iv * rng.uniform(-1, 1)
    phase, freq = rng.uniform(0, 2 * np.pi, size=2)
    angle = rng.uniform(0, np.pi)
    wave = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * (0.1 + 0.1 * freq / np.pi) + phase)
    image = bg_level + 0.04 * iv * wave
    family = (latent_class - 1) % 4
    support, field = _structure(family, latent_class, spec, rng, yy, xx)
    if not support.any():
        support[s // 2, s // 2] = True
    image = np.where(support, field, image)
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = np.where(support, latent_class, 0).astype(np.uint8)
    return image, mask


def generate_dataset(spec: DatasetSpec, id_offset: int = 0) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed, "synthgen", "layout")
    classes, volumes, slices = _layout(spec, rng)
    ids = np.arange(spec.n_samples) + id_offset
    images = np.empty((spec.n_samples, spec.size, spec.size), dtype=np.float32)
    masks = np.empty((spec.n_samples, spec.size, spec.size), dtype=np.uint8)
    for k, (i, c) in enumerate(zip(ids, classes)):
        images[k], masks[k] = render_sample(spec, int(i), int(c))
    return Dataset(spec, ids, images, masks, classes, volumes, slices)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ev = dataset.evaluation_view()
    tv = dataset.training_view()
    manifest = {
        "spec": asdict(dataset.spec),
        "samples": [
            {
                "id": int(i),
                "latent_class": int(c),
                "volume_id": int(v),
                "slice_index": int(sl),
                "file": f"sample_{int(i):06d}.bin",
            }
            for i, c, v, sl in zip(ev.ids, ev.latent_classes, ev.volume_ids, ev.slice_indices)
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for i, image, mask in zip(tv.ids, tv.images, tv.masks):
        h, w = image.shape
        blob = (
            MAGIC
            + struct.pack("<III", VERSION, h, w)
            + np.ascontiguousarray(image, dtype="<f4").tobytes()
            + np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
        )
        (directory / f"sample_{int(i):06d}.bin").write_bytes(blob)


def read_sample_file(path):
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    n = h * w
    if len(blob) != 16 + 4 * n + n:
        raise ValueError(f"{path}: truncated sample file")
    image = np.frombuffer(blob, dtype="<f4", count=n, offset=16).reshape(h, w).astype(np.float32)
    mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=16 + 4 * n).reshape(h, w).copy()
    return image, mask


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    rows = manifest["samples"]
    images, masks = [], []
    for row in rows:
        image, mask = read_sample_file(directory / row["file"])
        images.append(image)
        masks.append(mask)
    return Dataset(
        spec,
        [r["id"] for r in rows],
        np.stack(images),
        np.stack(masks),
        [r["latent_class"] for r in rows],
        [r["volume_id"] for r in rows],
        [r["slice_index"] for r in rows],
    )


# ---------------------------------------------------------------------------
# harmful pair analysis


@dataclass(frozen=True)
class PairRates:
    harmful_negative_rate: float
    harmful_positive_rate: float


def _designated_groups(view: EvaluationView, strategy: str, assignments, partitions: int):
    """Group index per sample; samples sharing a group are designated positives."""
    n = len(view)
    if strategy == "instance_discrimination":
        return np.arange(n)
    if strategy == "positional":
        if partitions < 1:
            raise ValueError("positional strategy needs partitions >= 1")
        lengths = {v: int((view.volume_ids == v).sum()) for v in np.unique(view.volume_ids)}
        vol_len = np.array([lengths[int(v)] for v in view.volume_ids])
        return np.minimum(view.slice_indices * partitions // vol_len, partitions - 1)
    if strategy == "cluster_guided":
        if assignments is None:
            raise ValueError("cluster_guided strategy requires pseudo-label assignments")
        amap = assignments if isinstance(assignments, dict) else dict(assignments)
        try:
            return np.array([amap[int(i)] for i in view.ids])
        except KeyError as exc:
            raise ValueError(f"assignments missing sample id {exc.args[0]}") from None
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def pair_rates(view: EvaluationView, strategy: str, assignments=None, partitions: int = 4) -> PairRates:
    """Harmful pair fractions over all ordered pairs (i, j), i != j.

    A pair is a designated positive when the strategy groups i and j
    together, otherwise a negative. Pairs of an image with its own second
    view are excluded; they are never harmful. A strategy that designates
    no pairs of one kind gets rate 0 for it.
    """
    groups = _designated_groups(view, strategy, assignments, partitions)
    cls = view.latent_classes
    same_group = groups[:, None] == groups[None, :]
    same_class = cls[:, None] == cls[None, :]
    off = ~np.eye(len(cls), dtype=bool)
    pos = same_group & off
    neg = ~same_group
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    hn = float((neg & same_class).sum() / n_neg) if n_neg else 0.0
    hp = float((pos & ~same_class).sum() / n_pos) if n_pos else 0.0
    return PairRates(hn, hp)


def positional_curve(view: EvaluationView, partitions=(1, 2, 4, 8, 16)) -> list[tuple[int, PairRates]]:
    """rate(p) for inspection; no monotonicity is implied."""
    return [(p, pair_rates(view, "positional", partitions=p)) for p in partitions]
