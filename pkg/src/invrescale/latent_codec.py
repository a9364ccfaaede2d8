"""Autoencoder that squeezes the latent z into a 4-channel code, plus its byte form."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .invnet import _he_normal
from .tensor import InvalidArgument, Parameter, Tensor

CODE_CHANNELS = 4
CODE_VERSION = 1
_HEADER = struct.Struct(">BBIIff")


class ConfigError(ValueError):
    """Invalid configuration value."""


class FormatError(ValueError):
    """Malformed serialized data; the message names the offending field."""


@dataclass(frozen=True)
class AeConfig:
    conv_layers: int = 4
    pretrained: bool = True
    frozen_during_joint_training: bool = False
    hidden_width: int = 64

    def __post_init__(self):
        if self.conv_layers not in (2, 4):
            raise ConfigError(f"conv_layers must be 2 or 4, got {self.conv_layers}")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be positive")


@dataclass
class LatentCode:
    s: Tensor
    n: int

    def __post_init__(self):
        if self.s.shape[-3] != CODE_CHANNELS:
            raise InvalidArgument(f"latent code must have {CODE_CHANNELS} channels, got {self.s.shape}")


@dataclass
class QuantizedCode:
    payload: bytes
    lo: float
    hi: float
    shape: tuple[int, int, int]
    n: int = 1
    version: int = CODE_VERSION

    @property
    def degenerate(self) -> bool:
        return self.lo == self.hi

    def to_bytes(self) -> bytes:
        _, h, w = self.shape
        return _HEADER.pack(self.version, self.n, h, w, self.lo, self.hi) + bytes(self.payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedCode":
        if len(raw) < _HEADER.size:
            raise FormatError(f"header: need {_HEADER.size} bytes, got {len(raw)}")
        version, n, h, w, lo, hi = _HEADER.unpack_from(raw)
        if version != CODE_VERSION:
            raise FormatError(f"version: unsupported value {version}")
        if n not in (1, 2):
            raise FormatError(f"n: expected 1 or 2, got {n}")
        if h == 0 or w == 0:
            raise FormatError(f"h/w: extents must be positive, got {h}x{w}")
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise FormatError(f"min/max: invalid range [{lo}, {hi}]")
        payload = raw[_HEADER.size:]
        if len(payload) != CODE_CHANNELS * h * w:
            raise FormatError(f"payload: expected {CODE_CHANNELS * h * w} bytes, got {len(payload)}")
        return cls(payload, lo, hi, (CODE_CHANNELS, h, w), n, version)


def quantize_code(code: LatentCode) -> QuantizedCode:
    """Uniform 8-bit quantization over the code's own [min, max] range."""
    s = code.s.data
    if s.ndim != 3:
        raise InvalidArgument(f"quantize_code expects a single (4,h,w) code, got {s.shape}")
    lo = float(np.float32(s.min()))
    hi = float(np.float32(s.max()))
    if lo == hi:
        levels = np.zeros(s.shape, np.uint8)
    else:
        t = (s.astype(np.float64) - lo) / (hi - lo) * 256.0
        levels = np.clip(np.floor(t), 0, 255).astype(np.uint8)
    return QuantizedCode(levels.tobytes(), lo, hi, tuple(s.shape), code.n)


def dequantize_code(q: QuantizedCode) -> LatentCode:
    levels = np.frombuffer(q.payload, np.uint8).reshape(q.shape).astype(np.float64)
    if q.degenerate:
        s = np.full(q.shape, q.lo)
    else:
        s = q.lo + (levels + 0.5) * (q.hi - q.lo) / 256.0
    return LatentCode(Tensor(s.astype(np.float32)), q.n)


def gather_z(stage_latents: Sequence[Tensor]) -> Tensor:
    """Stack per-stage latents at the final-stage resolution.

    Earlier stages are brought down by space-to-depth, so nothing is lost.
    """
    if not stage_latents:
        raise InvalidArgument("gather_z needs at least one stage latent")
    n = len(stage_latents)
    if n == 1:
        return stage_latents[0]
    parts = [T.pixel_unshuffle(z, 2 ** (n - 1 - i)) if i < n - 1 else z
             for i, z in enumerate(stage_latents)]
    return T.concat_channels(parts)


def scatter_z(z: Tensor, stage_channels: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`gather_z` given each stage's latent channel count."""
    n = len(stage_channels)
    if n == 1:
        return [z]
    out, start = [], 0
    for i, c in enumerate(stage_channels):
        r = 2 ** (n - 1 - i)
        width = c * r * r
        part = T.channels(z, start, start + width)
        out.append(T.pixel_shuffle(part, r) if r > 1 else part)
        start += width
    if start != z.shape[-3]:
        raise InvalidArgument(f"latent has {z.shape[-3]} channels, stages account for {start}")
    return out


def _layer_plan(conv_layers: int) -> tuple[list[str], list[str]]:
    if conv_layers == 2:
        return ["conv", "pool", "conv", "pool"], ["up", "conv", "up", "conv"]
    return (["conv", "conv", "pool", "conv", "conv", "pool"],
            ["up", "conv", "conv", "up", "conv", "conv"])


class _Path:
    def __init__(self, plan: list[str], widths: list[int], rng: np.random.Generator, slope: float):
        self.plan = plan
        self.slope = slope
        self.convs: list[tuple[Parameter, Parameter]] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.convs.append((Parameter(_he_normal(rng, (cout, cin, 3, 3))),
                               Parameter(np.zeros(cout, np.float32))))

    def __call__(self, x: Tensor) -> Tensor:
        k = 0
        for step in self.plan:
            if step == "pool":
                x = T.maxpool2(x)
            elif step == "up":
                x = T.upsample_nearest2(x)
            else:
                w, b = self.convs[k]
                x = T.conv2d(x, w, b)
                k += 1
                if k < len(self.convs):
                    x = T.leaky_relu(x, self.slope)
        return x


class AutoEncoder:
    """Convolutional encoder/decoder with two 2x max-pool / nearest-upsample stages."""

    def __init__(self, z_channels: int, cfg: AeConfig, rng: np.random.Generator, slope: float = 0.2):
        self.z_channels = z_channels
        self.cfg = cfg
        enc_plan, dec_plan = _layer_plan(cfg.conv_layers)
        hw = cfg.hidden_width
        mid = [hw] * (cfg.conv_layers - 1)
        self.encoder = _Path(enc_plan, [z_channels, *mid, CODE_CHANNELS], rng, slope)
        self.decoder = _Path(dec_plan, [CODE_CHANNELS, *mid, z_channels], rng, slope)

    def encode(self, z: Tensor, n: int = 1) -> LatentCode:
        h, w = z.shape[-2:]
        if h % 4 or w % 4:
            raise InvalidArgument(f"latent extents {h}x{w} must be divisible by 4")
        if z.shape[-3] != self.z_channels:
            raise InvalidArgument(f"encoder expects {self.z_channels} channels, got {z.shape[-3]}")
        return LatentCode(self.encoder(z), n)

    def decode(self, code: LatentCode) -> Tensor:
        return self.decoder(code.s)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for side in ("encoder", "decoder"):
            for i, (w, b) in enumerate(getattr(self, side).convs):
                yield f"{prefix}{side}.{i}.weight", w
                yield f"{prefix}{side}.{i}.bias", b


def encode_z(z: Tensor, ae: AutoEncoder, n: int = 1) -> LatentCode:
    return ae.encode(z, n)


def decode_code(code: LatentCode, ae: AutoEncoder, target_channels: int | None = None) -> Tensor:
    if target_channels is not None and target_channels != ae.z_channels:
        raise InvalidArgument(f"decoder produces {ae.z_channels} channels, asked for {target_channels}")
    return ae.decode(code)


def reconstruction_mse(ae: AutoEncoder, z: Tensor) -> Tensor:
    return T.mean(T.square(ae.decode(ae.encode(z)) - z))


@dataclass
class PretrainResult:
    ae: AutoEncoder
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def pretrain_ae(cfg: AeConfig, z_shape: tuple[int, int, int], samples: int = 64,
                steps: int = 2000, *, batch: int = 4, lr: float = 1e-3, seed: int = 0,
                ae: AutoEncoder | None = None) -> PretrainResult:
    """Fit the autoencoder to standard-normal latents by reconstruction MSE.

    ``samples`` fixes the size of the drawn pool; each step uses a random
    batch from it.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    if ae is None:
        ae = AutoEncoder(z_shape[0], cfg, rng)
    pool = rng.standard_normal((samples, *z_shape)).astype(np.float32)
    params = ae.parameters()
    result = PretrainResult(ae)
    for _ in range(steps):
        idx = rng.integers(0, samples, size=min(batch, samples))
        loss = reconstruction_mse(ae, Tensor(pool[idx]))
        T.backward(loss)
        T.adam_step(params, lr=lr)
        result.losses.append(loss.item())
    return result
