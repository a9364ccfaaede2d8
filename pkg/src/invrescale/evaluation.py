"""Scoring helpers shared by the CLI and the acceptance checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .imageio import artifact_to_png, png_to_artifact, quantize_plane
from .metrics import bicubic_resize, crop_border, psnr, ssim, to_luma
from .model import RescaleModel

REPORT_FIELDS = ("dataset", "image", "method", "scale", "psnr_db", "ssim")


@dataclass
class Score:
    dataset: str
    image: str
    method: str
    scale: int
    psnr_db: float
    ssim: float

    def row(self) -> dict:
        return {"dataset": self.dataset, "image": self.image, "method": self.method,
                "scale": self.scale, "psnr_db": f"{self.psnr_db:.6f}", "ssim": f"{self.ssim:.6f}"}


def to_8bit(img: np.ndarray) -> np.ndarray:
    return (quantize_plane(img).astype(np.float64) / 255.0).astype(np.float32)


def model_roundtrip(model: RescaleModel, hr: np.ndarray, quantize: bool = True) -> np.ndarray:
    """HR -> artifact -> (8-bit container form) -> HR estimate, quantized like a saved PNG."""
    artifact, _ = model.downscale(hr)
    if quantize:
        artifact = png_to_artifact(artifact_to_png(artifact))
    out = model.upscale(artifact).data
    return to_8bit(out) if quantize else out


def bicubic_roundtrip(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[-2:]
    lr = to_8bit(bicubic_resize(hr, size=(h // scale, w // scale)))
    return to_8bit(bicubic_resize(lr, size=(h, w)))


def score_pair(hr: np.ndarray, est: np.ndarray, border: int = 0) -> tuple[float, float]:
    ya = crop_border(to_luma(hr), border)
    yb = crop_border(to_luma(est), border)
    return psnr(ya, yb), ssim(ya, yb)


def evaluate_images(images: Iterable[tuple[str, np.ndarray]], scale: int,
                    model: RescaleModel | None = None, method: str = "model",
                    dataset: str = "data", border: int = 0) -> list[Score]:
    scores = []
    for name, hr in images:
        if method == "bicubic":
            est = bicubic_roundtrip(hr, scale)
        else:
            est = model_roundtrip(model, hr)
        p, s = score_pair(hr, est, border)
        scores.append(Score(dataset, name, method, scale, p, s))
    return scores


def mean_psnr(model: RescaleModel, images: Iterable[np.ndarray], quantize: bool = True) -> float:
    vals = [score_pair(hr, model_roundtrip(model, hr, quantize))[0] for hr in images]
    return float(np.mean(vals))


def write_report(scores: Iterable[Score], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        wr.writeheader()
        for s in scores:
            wr.writerow(s.row())


def synthetic_images(count: int, size: int = 96, seed: int = 0) -> list[np.ndarray]:
    """Deterministic toy images: gradients, flat shapes, gratings and light noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = []
    for _ in range(count):
        img = np.empty((3, size, size))
        for c in range(3):
            a, b, d = rng.uniform(-0.4, 0.4, 3)
            img[c] = 0.5 + a * xx + b * yy + d * xx * yy
        for _ in range(rng.integers(3, 7)):
            color = rng.uniform(0, 1, 3)[:, None, None]
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
            img = np.where(mask[None], color, img)
        freq = rng.uniform(4, 14)
        theta = rng.uniform(0, np.pi)
        grating = 0.15 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        img = img + grating[None] * rng.uniform(0.3, 1.0, 3)[:, None, None]
        img = img + rng.normal(0, 0.02, img.shape)
        out.append(np.clip(img, 0, 1).astype(np.float32))
    return out


def save_dataset(images: Iterable[np.ndarray], directory, prefix: str = "img") -> list[Path]:
    from .imageio import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = d / f"{prefix}{i:03d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
