"""Joint training under the four-term weighted loss."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .imageio import load_image, stored_alpha_logit, stored_rgb
from .latent_codec import ConfigError
from .metrics import bicubic_resize
from .model import RescaleModel, Variant
from .tensor import InvalidArgument, Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
TRACE_FIELDS = ("iteration", "l_r", "l_g", "l_d", "l_mse", "total")


class DataError(RuntimeError):
    """Training or evaluation data is missing or unusable."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # HR reconstruction, L1
    lambda2: float = 4.0   # LR guidance, L2
    lambda3: float = 1.0   # latent pull towards zero
    lambda4: float = 1.0   # autoencoder reconstruction

    def __post_init__(self):
        ws = (self.lambda1, self.lambda2, self.lambda3, self.lambda4)
        if any(w < 0 for w in ws):
            raise ConfigError(f"loss weights must be non-negative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ConfigError("at least one loss weight must be positive")

    @classmethod
    def default(cls, scale: int, variant: Variant | str = Variant.BASELINE) -> "LossWeights":
        meta = Variant(variant) is Variant.META
        return cls(1.0, float(scale * scale), 1.0, 1.0 if meta else 0.0)

    def check_variant(self, variant: Variant | str) -> None:
        if self.lambda4 > 0 and Variant(variant) is not Variant.META:
            raise ConfigError("lambda4 applies to the meta variant only")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    patch_size: int = 64
    lr: float = 2e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    freeze_ae: bool = False
    quantize: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch < 1 or self.patch_size < 1:
            raise ConfigError("batch and patch_size must be positive")

    def lr_at(self, it: int) -> float:
        passed = sum(it >= m * self.iterations for m in self.lr_milestones)
        return self.lr * self.lr_gamma ** passed


@dataclass
class LossTerms:
    total: Tensor
    l_r: float
    l_g: float
    l_d: float
    l_mse: float

    def row(self, iteration: int) -> dict:
        return {"iteration": iteration, "l_r": self.l_r, "l_g": self.l_g, "l_d": self.l_d,
                "l_mse": self.l_mse, "total": self.total.item()}


def loss_total(hr, lr_rgb: Tensor, z: Tensor, recon: Tensor, guidance_lr,
               ae_pair: tuple[Tensor, Tensor] | None, w: LossWeights) -> LossTerms:
    """Weighted sum of the four loss terms; zero-weight terms stay out of the graph."""
    hr = hr if isinstance(hr, Tensor) else Tensor(hr)
    guidance_lr = guidance_lr if isinstance(guidance_lr, Tensor) else Tensor(guidance_lr)
    if recon.shape != hr.shape:
        raise InvalidArgument(f"reconstruction {recon.shape} does not match HR {hr.shape}")
    if lr_rgb.shape != guidance_lr.shape:
        raise InvalidArgument(f"LR {lr_rgb.shape} does not match guidance {guidance_lr.shape}")
    terms = [
        (w.lambda1, T.mean(T.absolute(recon - hr))),
        (w.lambda2, T.mean(T.square(lr_rgb - guidance_lr))),
        (w.lambda3, T.mean(T.square(z))),
    ]
    if ae_pair is not None:
        z_in, z_out = ae_pair
        if z_in.shape != z_out.shape:
            raise InvalidArgument(f"autoencoder output {z_out.shape} does not match input {z_in.shape}")
        terms.append((w.lambda4, T.mean(T.square(z_out - z_in))))
    total = None
    for weight, term in terms:
        if weight > 0:
            part = T.scale(term, weight)
            total = part if total is None else total + part
    values = [t.item() for _, t in terms] + [0.0] * (4 - len(terms))
    return LossTerms(total, *values)


def guidance_target(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic reference LR image that the network's LR output is pulled towards."""
    h, w = np.asarray(hr).shape[-2:]
    if h % scale or w % scale:
        raise InvalidArgument(f"{h}x{w} not divisible by {scale}")
    return bicubic_resize(hr, size=(h // scale, w // scale))


def list_images(data_dir) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(data_dir) -> list[np.ndarray]:
    paths = list_images(data_dir)
    if not paths:
        raise DataError(f"no images in {data_dir}")
    return [load_image(p) for p in paths]


class PatchSampler:
    """Seeded random crops with random horizontal/vertical flips."""

    def __init__(self, images: Sequence[np.ndarray], patch: int, rng: np.random.Generator):
        if not images:
            raise DataError("empty dataset")
        for img in images:
            if min(img.shape[-2:]) < patch:
                raise DataError(f"image of size {img.shape[-2:]} smaller than patch {patch}")
        self.images = images
        self.patch = patch
        self.rng = rng

    def sample(self, batch: int) -> np.ndarray:
        out = np.empty((batch, 3, self.patch, self.patch), np.float32)
        p = self.patch
        for b in range(batch):
            img = self.images[self.rng.integers(len(self.images))]
            h, w = img.shape[-2:]
            top = self.rng.integers(h - p + 1)
            left = self.rng.integers(w - p + 1)
            crop = img[:, top:top + p, left:left + p]
            if self.rng.random() < 0.5:
                crop = crop[:, :, ::-1]
            if self.rng.random() < 0.5:
                crop = crop[:, ::-1, :]
            out[b] = crop
        return out


def step_losses(model: RescaleModel, hr: np.ndarray, w: LossWeights,
                guidance: np.ndarray | None = None, quantize: bool = True) -> LossTerms:
    """Forward, latent policy, inverse and loss for one batch (no update).

    With ``quantize`` the LR planes and alpha go through their 8-bit storage
    form before the inverse pass, with straight-through gradients.
    """
    scale = model.cfg.scale
    if guidance is None:
        guidance = guidance_target(hr, scale).astype(np.float32)
    hr_t = Tensor(hr)
    fwd = model.forward(hr_t)
    ae_pair = None
    z_hat = None
    if model.ae is not None:
        z_hat = model.ae.decode(fwd.code)
        ae_pair = (fwd.z, z_hat)
    lr_rgb, alpha_logit = fwd.lr_rgb, fwd.alpha_logit
    if quantize:
        lr_rgb = T.straight_through(lr_rgb, stored_rgb)
        if alpha_logit is not None:
            alpha_logit = T.straight_through(alpha_logit, stored_alpha_logit)
    recon = model.inverse(lr_rgb, alpha_logit, z_hat)
    return loss_total(hr_t, fwd.lr_rgb, fwd.z, recon, guidance, ae_pair, w)


@dataclass
class TrainResult:
    model: RescaleModel
    trace: list[dict] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.trace])


def train(model: RescaleModel, data, tc: TrainConfig, w: LossWeights) -> TrainResult:
    """Run ``tc.iterations`` Adam steps on random patches from ``data``.

    ``data`` is a directory or an already-loaded list of (3,H,W) images.
    """
    cfg = model.cfg
    w.check_variant(cfg.variant)
    if tc.patch_size % (2 * cfg.scale):
        raise ConfigError(f"patch_size {tc.patch_size} must be divisible by {2 * cfg.scale}")
    images = load_dataset(data) if isinstance(data, (str, Path)) else list(data)
    rng = np.random.default_rng(tc.seed)
    sampler = PatchSampler(images, tc.patch_size, rng)
    frozen_ae = tc.freeze_ae or (cfg.ae is not None and cfg.ae.frozen_during_joint_training)
    if frozen_ae or model.ae is None:
        trainable = model.net_parameters()
    else:
        trainable = model.parameters()
    frozen = [p for p in model.parameters() if not any(p is q for q in trainable)]
    result = TrainResult(model)
    for it in range(tc.iterations):
        hr = sampler.sample(tc.batch)
        terms = step_losses(model, hr, w, quantize=tc.quantize)
        T.backward(terms.total)
        T.adam_step(trainable, lr=tc.lr_at(it), betas=tc.betas, eps=tc.eps)
        for p in frozen:
            p.zero_grad()
        result.trace.append(terms.row(it))
        if tc.log_every and (it + 1) % tc.log_every == 0:
            log.info("iter %d loss %.5f", it + 1, terms.total.item())
    return result


def write_trace(trace: Sequence[dict], path, every: int = 1) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=TRACE_FIELDS, lineterminator="\n")
        wr.writeheader()
        for row in trace:
            if row["iteration"] % every == 0 or row is trace[-1]:
                wr.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
