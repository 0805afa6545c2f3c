"""UNet construction, encoder transfer, fine-tuning and Dice evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .nn import Adam, Conv2d, ConvTranspose2d, Module, cosine_lr
from .rng import make_rng
from .tensor import Tensor

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."


class ConvBlock(Module):
    """conv3x3 -> relu -> conv3x3 -> relu."""

    def __init__(self, c_in: int, c_out: int, rng):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(c_in, c_out, 3, rng, padding=1))
        self.conv2 = self.add_module("conv2", Conv2d(c_out, c_out, 3, rng, padding=1))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class UNetEncoder(Module):
    """Down-sampling path: two pooled conv blocks and a bottleneck block.

    Shared verbatim by the contrastive encoder so its parameters can be
    copied into a UNet by name.
    """

    def __init__(self, rng, in_channels: int = 1, widths=(16, 32), bottleneck: int = 64):
        super().__init__()
        self.widths = tuple(widths)
        self.bottleneck_width = bottleneck
        self.blocks = []
        c = in_channels
        for i, w in enumerate(self.widths):
            self.blocks.append(self.add_module(f"down{i + 1}", ConvBlock(c, w, rng)))
            c = w
        self.bottleneck = self.add_module("bottleneck", ConvBlock(c, bottleneck, rng))

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = T.max_pool2d(x)
        return self.bottleneck(x), skips


class UNetDecoder(Module):
    def __init__(self, rng, n_out: int, widths=(16, 32), bottleneck: int = 64):
        super().__init__()
        self.ups, self.blocks = [], []
        c = bottleneck
        for i, w in reversed(list(enumerate(widths))):
            self.ups.append(self.add_module(f"up{i + 1}", ConvTranspose2d(c, w, 2, rng, stride=2)))
            self.blocks.append(self.add_module(f"block{i + 1}", ConvBlock(2 * w, w, rng)))
            c = w
        self.head = self.add_module("head", Conv2d(c, n_out, 1, rng))

    def __call__(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(T.concat([up(x), skip], axis=-1))
        return self.head(x)


class UNet(Module):
    def __init__(self, n_classes: int, seed: int, widths=(16, 32), bottleneck: int = 64,
                 in_channels: int = 1):
        super().__init__()
        self.n_classes = n_classes
        self.widths = tuple(widths)
        self.bottleneck_width = bottleneck
        # separate streams so the decoder init does not depend on the encoder's
        self.encoder = self.add_module(
            "encoder", UNetEncoder(make_rng(seed, "unet", "encoder"), in_channels, widths, bottleneck)
        )
        self.decoder = self.add_module(
            "decoder", UNetDecoder(make_rng(seed, "unet", "decoder"), n_classes + 1, widths, bottleneck)
        )

    def __call__(self, x: Tensor) -> Tensor:
        """(N, H, W, 1) images -> (N, H, W, C+1) logits."""
        feats, skips = self.encoder(x)
        return self.decoder(feats, skips)

    def predict_logits(self, images: np.ndarray, batch: int = 50) -> np.ndarray:
        outs = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                x = Tensor(images[i : i + batch][..., None])
                outs.append(self(x).data)
        return np.concatenate(outs, axis=0)

    def encoder_state(self) -> dict:
        return {
            k: v for k, v in self.state_dict().items() if k.startswith(ENCODER_PREFIX)
        }


def build_unet(n_classes: int, seed: int, transfer=None, widths=(16, 32), bottleneck: int = 64) -> UNet:
    """Fresh UNet; the encoder is copied from ``transfer`` when given.

    ``transfer`` is a checkpoint path or a name -> array mapping. Only
    ``encoder.*`` entries are used, which lets a pretraining checkpoint that
    also carries the projection head be passed unchanged.
    """
    model = UNet(n_classes, seed, widths, bottleneck)
    if transfer is None:
        return model
    state = load_checkpoint(transfer) if not isinstance(transfer, dict) else transfer
    enc = {k: v for k, v in state.items() if k.startswith(ENCODER_PREFIX)}
    own = model.named_parameters()
    mismatched = []
    for name, p in own.items():
        if not name.startswith(ENCODER_PREFIX):
            continue
        if name not in enc:
            mismatched.append(f"{name} (missing)")
        elif tuple(enc[name].shape) != p.shape:
            mismatched.append(f"{name} (expected {p.shape}, got {tuple(enc[name].shape)})")
    mismatched += [f"{k} (unexpected)" for k in enc if k not in own]
    if mismatched:
        raise ValueError("encoder transfer mismatch: " + ", ".join(mismatched))
    for name, arr in enc.items():
        own[name].data = np.array(arr, dtype=own[name].data.dtype)
    return model


# ---------------------------------------------------------------------------
# losses and metrics


def one_hot(masks: np.ndarray, n_channels: int) -> np.ndarray:
    """(N, H, W) integer masks -> (N, H, W, K) float one-hot."""
    return np.eye(n_channels, dtype=T.get_default_dtype())[masks]


def soft_dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - mean over channels of batch-pooled soft Dice."""
    y = Tensor(target)
    axes = (0, 1, 2)
    inter = (probs * y).sum(axes)
    denom = probs.sum(axes) + Tensor(target.sum(axis=axes))
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def segmentation_loss(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Pixelwise cross-entropy plus soft-Dice loss, equally weighted."""
    k = logits.shape[-1]
    target = one_hot(masks, k)
    logp = T.log_softmax(logits, axis=-1)
    n_pix = logits.shape[0] * logits.shape[1] * logits.shape[2]
    ce = -(logp * Tensor(target)).sum() * (1.0 / n_pix)
    return ce + soft_dice_loss(T.exp(logp), target)


def dice_score(pred: np.ndarray, true: np.ndarray, c: int) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"dice_score: shape mismatch {pred.shape} vs {true.shape}")
    p, t = pred == c, true == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass
class DiceReport:
    per_class: dict
    mean: float
    fraction: float | None = None
    seed: int | None = None

    def to_json(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "mean": self.mean,
            "fraction": self.fraction,
            "seed": self.seed,
        }


def evaluate(model, images: np.ndarray, masks: np.ndarray, n_classes: int) -> DiceReport:
    """Micro-averaged Dice per foreground class over the whole test set.

    ``model`` only needs ``predict_logits(images) -> (N, H, W, C+1)``.
    """
    if len(images) == 0:
        raise ValueError("evaluate: empty test set")
    pred = model.predict_logits(images).argmax(axis=-1)
    per_class = {c: dice_score(pred, masks, c) for c in range(1, n_classes + 1)}
    return DiceReport(per_class, float(np.mean(list(per_class.values()))))


# ---------------------------------------------------------------------------
# fine-tuning


def select_labeled_subset(ids, latent_classes, fraction: float, seed: int) -> list[int]:
    """Class-stratified subset of ``ids`` of size round(fraction * n).

    Latent classes are used only to balance the draw, never as training
    targets. The returned order interleaves classes so that any prefix is
    itself roughly stratified.
    """
    ids = np.asarray(ids)
    latent_classes = np.asarray(latent_classes)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    total = int(round(fraction * len(ids)))
    if total == 0:
        raise ValueError(f"fraction {fraction} selects no samples out of {len(ids)}")
    rng = make_rng(seed, "finetune", "subset")
    classes = np.unique(latent_classes)
    counts = np.array([(latent_classes == c).sum() for c in classes])
    # largest-remainder allocation
    quota = counts * total / len(ids)
    take = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - take), kind="stable")[: total - take.sum()]:
        take[i] += 1
    pools = []
    for c, n in zip(classes, take):
        members = ids[latent_classes == c]
        pools.append(list(rng.permutation(members)[:n]))
    order = []
    while any(pools):
        for pool in pools:
            if pool:
                order.append(int(pool.pop(0)))
    return order


@dataclass
class FinetuneResult:
    model: UNet
    history: list = field(default_factory=list)
    best_epoch: int = -1


def finetune(model: UNet, images: np.ndarray, masks: np.ndarray, epochs: int, lr: float,
             batch: int, seed: int, val_fraction: float = 0.2) -> FinetuneResult:
    """Train all UNet weights on a labelled subset.

    The last ``val_fraction`` of the given samples is held out and the
    parameters with the best validation mean Dice are restored at the end.
    History rows: (epoch, train_loss, val_dice).
    """
    if len(images) == 0:
        raise ValueError("finetune: empty labelled subset")
    result = FinetuneResult(model)
    if epochs == 0:
        return result
    n_val = int(round(val_fraction * len(images))) if len(images) > 1 else 0
    n_train = len(images) - n_val
    tr_x, tr_y = images[:n_train], masks[:n_train]
    va_x, va_y = images[n_train:], masks[n_train:]

    rng = make_rng(seed, "finetune", "batches")
    opt = Adam(model.parameters(), lr=lr)
    best, best_state = -1.0, None
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n_train)
        losses = []
        for i in range(0, n_train, batch):
            idx = order[i : i + batch]
            opt.zero_grad()
            loss = segmentation_loss(model(Tensor(tr_x[idx][..., None])), tr_y[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if n_val:
            val = evaluate(model, va_x, va_y, model.n_classes).mean
            if val > best:
                best, best_state, result.best_epoch = val, model.state_dict(), epoch
        else:
            val = float("nan")
        result.history.append((epoch, float(np.mean(losses)), val))
        logger.debug("finetune epoch %d loss %.4f val %.4f", epoch, np.mean(losses), val)
    if best_state is not None:
        model.load_state_dict(best_state)
    return result
