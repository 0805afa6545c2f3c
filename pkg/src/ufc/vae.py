"""beta-VAE used to embed images before clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .clustering import FeatureSet
from .nn import Adam, Conv2d, ConvTranspose2d, Linear, Module
from .rng import make_rng
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class VaeModel(Module):
    """Conv encoder with mean and log-variance heads; transposed-conv decoder.

    Encoder: two stride-2 3x3 convs, flatten, two linear heads.
    Decoder: linear, reshape, two stride-2 4x4 transposed convs, sigmoid.
    """

    def __init__(self, size: int = 32, latent_dim: int = 16, channels=(16, 32),
                 beta: float = 5e-4, seed: int = 0):
        super().__init__()
        if beta < 0:
            raise ValueError(f"beta must be >= 0, got {beta}")
        if size % 4:
            raise ValueError(f"image size {size} must be divisible by 4")
        self.size, self.latent_dim, self.beta = size, latent_dim, beta
        c1, c2 = channels
        self.c2 = c2
        flat = c2 * (size // 4) ** 2
        rng = make_rng(seed, "vae", "init")
        self.enc1 = self.add_module("enc1", Conv2d(1, c1, 3, rng, stride=2, padding=1))
        self.enc2 = self.add_module("enc2", Conv2d(c1, c2, 3, rng, stride=2, padding=1))
        self.mu_head = self.add_module("mu", Linear(flat, latent_dim, rng))
        self.logvar_head = self.add_module("logvar", Linear(flat, latent_dim, rng))
        # start with small posterior variance so early samples stay near the mean
        self.logvar_head.weight.data *= 0.1
        self.dec_fc = self.add_module("dec_fc", Linear(latent_dim, flat, rng))
        self.dec1 = self.add_module("dec1", ConvTranspose2d(c2, c1, 4, rng, stride=2, padding=1))
        self.dec2 = self.add_module("dec2", ConvTranspose2d(c1, 1, 4, rng, stride=2, padding=1))

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = T.relu(self.enc2(T.relu(self.enc1(x))))
        h = h.reshape(x.shape[0], -1)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: Tensor) -> Tensor:
        q = self.size // 4
        h = T.relu(self.dec_fc(z)).reshape(z.shape[0], q, q, self.c2)
        return T.sigmoid(self.dec2(T.relu(self.dec1(h))))


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.ndim == 4 else images.reshape(images.shape + (1,))
    arr = np.asarray(images)
    return Tensor(arr[..., None] if arr.ndim == 3 else arr)


def vae_forward(model: VaeModel, image, rng: np.random.Generator):
    """Reparameterised pass: z = mu + exp(logvar / 2) * eps, eps ~ N(0, I).

    ``image`` is (N, H, W) or (N, H, W, 1). Returns (recon, mu, logvar) with
    recon shaped like the NHWC input.
    """
    x = _as_batch(image)
    if x.shape[1:] != (model.size, model.size, 1):
        raise T.ShapeError(f"vae_forward: expected (N, {model.size}, {model.size}, 1), got {x.shape}")
    mu, logvar = model.encode(x)
    eps = Tensor(rng.standard_normal(mu.shape))
    z = mu + T.exp(logvar * 0.5) * eps
    return model.decode(z), mu, logvar


@dataclass
class VaeLossReport:
    total: float
    rec: float
    kl: float
    beta_kl: float
    loss: Tensor | None = field(default=None, repr=False, compare=False)


def vae_loss(recon: Tensor, target, mu: Tensor, logvar: Tensor, beta: float) -> VaeLossReport:
    """Minimised objective rec + beta * kl.

    rec is the per-pixel mean squared error; kl is the closed-form
    KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    target = _as_batch(target)
    if recon.shape != target.shape:
        raise T.ShapeError(f"vae_loss: recon {recon.shape} vs target {target.shape}")
    if mu.shape != logvar.shape:
        raise T.ShapeError(f"vae_loss: mu {mu.shape} vs logvar {logvar.shape}")
    diff = recon - target
    rec = (diff * diff).mean()
    kl = (mu * mu + T.exp(logvar) - logvar - 1.0).sum() * (0.5 / mu.shape[0])
    beta_kl = kl * float(beta)
    total = rec + beta_kl
    return VaeLossReport(total.item(), rec.item(), kl.item(), beta_kl.item(), loss=total)


@dataclass
class VaeTrainResult:
    model: VaeModel
    history: list = field(default_factory=list)  # per epoch: dict(epoch, rec, kl, total)
    steps: list = field(default_factory=list)  # per step: VaeLossReport without tensors


def train_vae(model: VaeModel, images: np.ndarray, epochs: int, lr: float, batch: int,
              beta: float | None = None, seed: int = 0) -> VaeTrainResult:
    if len(images) == 0:
        raise ValueError("train_vae: empty dataset")
    beta = model.beta if beta is None else beta
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    result = VaeTrainResult(model)
    if epochs == 0:
        return result
    opt = Adam(model.parameters(), lr=lr)
    order_rng = make_rng(seed, "vae", "batches")
    noise_rng = make_rng(seed, "vae", "noise")
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(images))
        rows = []
        for i in range(0, len(images), batch):
            xb = images[order[i : i + batch]]
            opt.zero_grad()
            try:
                recon, mu, logvar = vae_forward(model, xb, noise_rng)
                rep = vae_loss(recon, xb, mu, logvar, beta)
                rep.loss.backward()
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
            opt.step()
            rep.loss = None
            result.steps.append(rep)
            rows.append((rep.rec, rep.kl, rep.total))
            step += 1
        rec, kl, total = np.mean(rows, axis=0)
        result.history.append({"epoch": epoch, "rec": float(rec), "kl": float(kl), "total": float(total)})
        logger.debug("vae epoch %d rec %.5f kl %.3f", epoch, rec, kl)
    return result


def extract_features(model: VaeModel, images: np.ndarray, ids, batch: int = 100) -> FeatureSet:
    """Posterior means as features; no sampling."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            mu, _ = model.encode(_as_batch(images[i : i + batch]))
            out.append(mu.data)
    return FeatureSet(np.asarray(ids), np.concatenate(out, axis=0).astype(np.float64))
