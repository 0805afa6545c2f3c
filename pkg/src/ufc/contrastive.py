"""Cluster-guided contrastive pretraining of the UNet encoder.

For a batch of b images with pseudo-labels, two augmented views each give
2b projected, L2-normalised features. Feature i is pulled towards every
feature sharing its pseudo-label and pushed from the rest::

    term_i = log( sum_{j in P(i)} exp(f_i.f_j / tau) / sum_{k in N(i)} exp(f_i.f_k / tau) ) / |P(i)|
    loss   = -(1 / 2b) * sum_i term_i

P(i) excludes i unless ``include_self``; N(i) is the complement of P(i)
without i (``denominator="negatives_only"``) or every feature but i
(``denominator="all"``). Instance discrimination is the special case where
each image is its own pseudo-class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from . import tensor as T
from .clustering import PseudoLabels, canonical_labels
from .nn import Adam, Linear, Module, cosine_lr
from .rng import make_rng
from .segmentation import UNetEncoder
from .tensor import Tensor

logger = logging.getLogger(__name__)

DENOMINATORS = ("negatives_only", "all")


class DegenerateBatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    crop_scale: float = 1.0
    crop_ratio: float = 1.0
    crop_top: float = 0.0  # fraction of the free vertical room
    crop_left: float = 0.0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0


def sample_augment(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        crop_scale=rng.uniform(0.6, 1.0),
        crop_ratio=math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3))),
        crop_top=rng.uniform(),
        crop_left=rng.uniform(),
        hflip=bool(rng.uniform() < 0.5),
        vflip=bool(rng.uniform() < 0.5),
        brightness=rng.uniform(-0.2, 0.2),
        contrast=rng.uniform(0.8, 1.2),
        noise_sigma=0.02,
    )


def apply_augment(image: np.ndarray, p: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    ch = min(h, math.sqrt(p.crop_scale * h * w / p.crop_ratio))
    cw = min(w, math.sqrt(p.crop_scale * h * w * p.crop_ratio))
    top = p.crop_top * (h - ch)
    left = p.crop_left * (w - cw)
    # bilinear resample of the crop back onto an h x w grid (pixel centres)
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = map_coordinates(image.astype(np.float64), [yy, xx], order=1, mode="nearest")
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    out = (out - out.mean()) * p.contrast + out.mean() + p.brightness
    if p.noise_sigma > 0:
        out = out + rng.normal(0.0, p.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_pair(image: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    v1 = apply_augment(image, sample_augment(rng), rng)
    v2 = apply_augment(image, sample_augment(rng), rng)
    return v1, v2


# ---------------------------------------------------------------------------
# losses


def positive_mask(labels, include_self: bool = False) -> np.ndarray:
    labels = np.asarray(labels)
    mask = labels[:, None] == labels[None, :]
    if not include_self:
        np.fill_diagonal(mask, False)
    return mask


def cluster_contrastive_loss(features: Tensor, labels, tau: float = 0.1, include_self: bool = False,
                             denominator: str = "negatives_only", check_norm: bool = True) -> Tensor:
    """Cluster-guided contrastive loss over a (2b, o) batch of unit features."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if denominator not in DENOMINATORS:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    labels = np.asarray(labels)
    n = features.shape[0]
    if features.ndim != 2 or len(labels) != n:
        raise T.ShapeError(f"features {features.shape} vs {len(labels)} labels")
    if check_norm:
        norms = np.sqrt((features.data.astype(np.float64) ** 2).sum(axis=1))
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("features must be L2-normalised")
    eye = np.eye(n, dtype=bool)
    pos = positive_mask(labels, include_self)
    if denominator == "negatives_only":
        neg = ~(pos | eye)
    else:
        neg = ~eye
    if not pos.any(axis=1).all():
        raise DegenerateBatchError("degenerate batch: no positives")
    if not neg.any(axis=1).all():
        raise DegenerateBatchError("degenerate batch: no negatives")
    sim = (features @ features.T) * (1.0 / tau)
    term = (T.logsumexp(sim, pos) - T.logsumexp(sim, neg)) * Tensor(1.0 / pos.sum(axis=1))
    return term.sum() * (-1.0 / n)


def view_labels(batch_labels) -> np.ndarray:
    """Pseudo-labels for the stacked [views1; views2] feature batch."""
    batch_labels = np.asarray(batch_labels)
    return np.concatenate([batch_labels, batch_labels])


def instance_discrimination_loss(features: Tensor, tau: float = 0.1, **kwargs) -> Tensor:
    """Each image is its own class; rows i and i + b are the two views of image i."""
    b = features.shape[0] // 2
    if features.shape[0] != 2 * b:
        raise T.ShapeError(f"instance loss needs an even batch, got {features.shape[0]}")
    return cluster_contrastive_loss(features, view_labels(np.arange(b)), tau, **kwargs)


# ---------------------------------------------------------------------------
# model and training


class EncoderModel(Module):
    """UNet down-sampling path plus a two-layer projection head."""

    def __init__(self, seed: int, widths=(16, 32), bottleneck: int = 64, hidden: int = 256,
                 out_dim: int = 32, in_channels: int = 1):
        super().__init__()
        self.widths, self.bottleneck_width = tuple(widths), bottleneck
        # same stream the UNet uses, so transfer is the only difference
        self.encoder = self.add_module(
            "encoder", UNetEncoder(make_rng(seed, "unet", "encoder"), in_channels, widths, bottleneck)
        )
        rng = make_rng(seed, "contrastive", "head")
        self.fc1 = self.add_module("head.fc1", Linear(bottleneck, hidden, rng))
        self.fc2 = self.add_module("head.fc2", Linear(hidden, out_dim, rng))

    def embed(self, x: Tensor) -> Tensor:
        feats, _ = self.encoder(x)
        return feats.mean(axis=(1, 2))

    def __call__(self, x: Tensor) -> Tensor:
        return T.l2_normalize(self.fc2(T.relu(self.fc1(self.embed(x)))))


def stratified_batches(labels: np.ndarray, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches, interleaving pseudo-label groups round-robin."""
    labels = canonical_labels(labels)
    k = int(labels.max()) + 1
    groups = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(k)]
    seq = []
    order = rng.permutation(k)
    while any(groups[c] for c in order):
        for c in order:
            if groups[c]:
                seq.append(groups[c].pop())
    seq = np.array(seq)
    out = [seq[i : i + batch] for i in range(0, len(seq), batch)]
    return [b for b in out if len(b) >= 2]


def stratified_redraw(labels: np.ndarray, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Replacement for a degenerate batch: each slot picks a cluster uniformly
    among those with unused members, then an unused member of it."""
    pools = {int(c): list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)}
    out = []
    for _ in range(min(batch, len(labels))):
        live = sorted(c for c, p in pools.items() if p)
        out.append(pools[live[int(rng.integers(len(live)))]].pop())
    return np.array(out)


@dataclass
class PretrainResult:
    model: EncoderModel
    history: list = field(default_factory=list)  # (epoch, mean_loss)
    steps: list = field(default_factory=list)  # per-step loss
    resampled: int = 0


def pretrain(model: EncoderModel, images: np.ndarray, ids, pseudo_labels: PseudoLabels | None,
             epochs: int, lr: float, batch: int, tau: float = 0.1, seed: int = 0, mode: str = "ufc",
             include_self: bool = False, denominator: str = "negatives_only",
             max_resample: int = 10) -> PretrainResult:
    """Contrastive pretraining with cosine learning-rate decay.

    Batches with a single pseudo-label are redrawn cluster-stratified up to
    ``max_resample`` times, then the run aborts.
    """
    ids = np.asarray(ids)
    if mode == "instance":
        labels = np.arange(len(ids))
    elif mode == "ufc":
        if pseudo_labels is None:
            raise ValueError("ufc mode needs pseudo-labels")
        amap = pseudo_labels.as_dict()
        missing = [int(i) for i in ids if int(i) not in amap]
        if missing:
            raise ValueError(f"pseudo-labels do not cover sample ids {missing[:5]}")
        labels = np.array([amap[int(i)] for i in ids])
    else:
        raise ValueError(f"unknown pretraining mode {mode!r}")
    labels = canonical_labels(labels)

    result = PretrainResult(model)
    if epochs == 0:
        return result
    opt = Adam(model.parameters(), lr=lr)
    batch_rng = make_rng(seed, "pretrain", "batches")
    step = 0
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        losses = []
        for idx in stratified_batches(labels, batch, batch_rng):
            attempts = 0
            while len(np.unique(labels[idx])) < 2:
                if attempts == max_resample:
                    raise DegenerateBatchError(
                        f"{max_resample} consecutive single-cluster batches; k is too small for batch {batch}"
                    )
                idx = stratified_redraw(labels, batch, batch_rng)
                attempts += 1
                result.resampled += 1
            v1, v2 = [], []
            for i in idx:
                a, b = augment_pair(images[i], make_rng(seed, "augment", f"{step}:{int(ids[i])}"))
                v1.append(a)
                v2.append(b)
            x = Tensor(np.stack(v1 + v2)[..., None])
            opt.zero_grad()
            loss = cluster_contrastive_loss(model(x), view_labels(labels[idx]), tau,
                                            include_self=include_self, denominator=denominator)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.steps.append(loss.item())
            step += 1
        result.history.append((epoch, float(np.mean(losses))))
        logger.debug("pretrain epoch %d loss %.4f", epoch, np.mean(losses))
    return result
