"""Rescaling network: Haar stages + coupling blocks, with optional alpha or metadata latent.

Three variants share one topology:

* ``baseline`` -- the latent is discarded and replaced by zeros on the way up;
* ``alpha``    -- one extra lower-branch plane is carried out as an alpha channel;
* ``meta``     -- the latent is squeezed by an autoencoder into a small code
  that travels in the file header.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .invnet import BlockStack, SplitMode, SplitSpec, recover_removed_channel, split_channels
from .latent_codec import (AeConfig, AutoEncoder, ConfigError, FormatError, LatentCode,
                           QuantizedCode, dequantize_code, gather_z, quantize_code, scatter_z)
from .tensor import InvalidArgument, Parameter, Tensor
from .wavelet import haar_forward, haar_inverse_tensor


class Variant(str, Enum):
    BASELINE = "baseline"
    ALPHA = "alpha"
    META = "meta"


LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    variant: Variant = Variant.BASELINE
    blocks_per_stage: int = 8
    subnet_width: int = 32
    split: SplitSpec = field(default_factory=SplitSpec)
    ae: AeConfig | None = None
    clamp: float = 1.0
    color_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.split, dict):
            object.__setattr__(self, "split", SplitSpec(**self.split))
        if isinstance(self.ae, dict):
            object.__setattr__(self, "ae", AeConfig(**self.ae))
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.split.color_channels != self.color_channels:
            raise ConfigError("split.color_channels disagrees with color_channels")
        if (self.ae is not None) != (self.variant is Variant.META):
            raise ConfigError("an autoencoder config is required for, and only for, the meta variant")
        alpha_modes = {SplitMode.PRE_SPLIT_ALPHA, SplitMode.POST_SPLIT_ALPHA}
        if (self.variant is Variant.ALPHA) != (self.split.mode in alpha_modes):
            raise ConfigError(f"variant {self.variant.value} is incompatible with split mode "
                              f"{self.split.mode.value}")

    @property
    def stages(self) -> int:
        return int(math.log2(self.scale))

    @property
    def has_alpha(self) -> bool:
        return self.variant is Variant.ALPHA

    @property
    def pre_split(self) -> bool:
        return self.split.mode is SplitMode.PRE_SPLIT_ALPHA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["split"]["mode"] = self.split.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_variant(cls, variant: str, scale: int = 2, **kw) -> "ModelConfig":
        """Convenience constructor filling in the matching split/autoencoder settings."""
        variant = Variant(variant)
        c = kw.get("color_channels", 3)
        if variant is Variant.ALPHA:
            kw.setdefault("split", SplitSpec(SplitMode.PRE_SPLIT_ALPHA, True, c))
        else:
            kw.setdefault("split", SplitSpec(SplitMode.BASELINE, False, c))
        if variant is Variant.META:
            kw.setdefault("ae", AeConfig())
        return cls(scale=scale, variant=variant, **kw)


@dataclass
class RescaleArtifact:
    """What gets written to disk: the LR image plus whichever latent carrier applies."""

    lr_rgb: np.ndarray            # (C, h, w), nominally [0, 1]
    alpha: np.ndarray | None = None   # (1, h, w) in (0, 1)
    meta: QuantizedCode | None = None

    def __post_init__(self):
        if self.alpha is not None and self.meta is not None:
            raise InvalidArgument("an artifact carries either an alpha plane or metadata, not both")

    @property
    def variant(self) -> Variant:
        if self.alpha is not None:
            return Variant.ALPHA
        if self.meta is not None:
            return Variant.META
        return Variant.BASELINE


@dataclass
class ForwardResult:
    """Differentiable outputs of the downscaling pass."""

    lr_rgb: Tensor
    alpha_logit: Tensor | None   # pre-sigmoid alpha plane
    z: Tensor                    # latent that is not stored in the artifact
    stage_channels: list[int]
    code: LatentCode | None = None

    @property
    def alpha(self) -> Tensor | None:
        return None if self.alpha_logit is None else T.sigmoid(self.alpha_logit)


def logit_clamped(a, eps: float = LOGIT_EPS):
    """ln(a'/(1-a')) with a' clamped into [eps, 1-eps]."""
    if not 0 < eps < 0.5:
        raise InvalidArgument(f"eps must lie in (0, 0.5), got {eps}")
    a = np.clip(np.asarray(a, dtype=np.float64), eps, 1 - eps)
    out = np.log(a / (1 - a))
    return float(out) if out.ndim == 0 else out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class RescaleModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.color_channels
        self.stages: list[BlockStack] = []
        low = c
        for i in range(cfg.stages):
            if i == 0 and cfg.pre_split:
                lo, hi = cfg.split.low_channels, cfg.split.high_channels
            else:
                lo, hi = low, 3 * low
            self.stages.append(BlockStack.build(cfg.blocks_per_stage, lo, hi, rng,
                                                cfg.subnet_width, cfg.clamp))
            low = lo
        self.extra: dict = {}
        self.ae: AutoEncoder | None = None
        if cfg.ae is not None:
            self.ae = AutoEncoder(self.z_channels, cfg.ae, rng)

    # -- shape bookkeeping --------------------------------------------------
    @property
    def lower_channels(self) -> int:
        return self.stages[-1].blocks[0].low_channels

    @property
    def stage_channels(self) -> list[int]:
        chans = [s.blocks[0].high_channels for s in self.stages]
        if self.cfg.split.mode is SplitMode.POST_SPLIT_ALPHA:
            chans[-1] -= 1
        return chans

    @property
    def z_channels(self) -> int:
        n = len(self.stages)
        return sum(c * 4 ** (n - 1 - i) for i, c in enumerate(self.stage_channels))

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for i, st in enumerate(self.stages):
            yield from st.named_parameters(f"stage{i}.")
        if self.ae is not None:
            yield from self.ae.named_parameters("ae.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def net_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("ae.")]

    # -- passes -----------------------------------------------------------------
    def forward(self, hr) -> ForwardResult:
        """HR image(s) -> LR planes, alpha logit, leftover latent (and code for meta)."""
        hr = _as_tensor(hr)
        cfg = self.cfg
        h, w = hr.shape[-2:]
        if h % (2 * cfg.scale) or w % (2 * cfg.scale):
            raise InvalidArgument(f"input {h}x{w} must be divisible by {2 * cfg.scale}")
        if hr.shape[-3] != cfg.color_channels:
            raise InvalidArgument(f"expected {cfg.color_channels} channels, got {hr.shape[-3]}")
        c = cfg.color_channels
        x = hr
        latents: list[Tensor] = []
        for i, stack in enumerate(self.stages):
            hs = haar_forward(x)
            if i == 0 and cfg.pre_split:
                sp = split_channels(hs, cfg.split)
                x_l, x_h = sp.x_l, sp.x_h
            else:
                x_l, x_h = hs.low, hs.high
            x, y_h = stack.forward(x_l, x_h)
            latents.append(y_h)
        lower = T.scale(x, 1.0 / cfg.scale)
        lr_rgb = T.channels(lower, 0, c)
        alpha_logit = None
        if cfg.pre_split:
            alpha_logit = T.channels(lower, c, c + 1)
        elif cfg.split.mode is SplitMode.POST_SPLIT_ALPHA:
            last = latents[-1]
            alpha_logit = T.channels(last, 0, 1)
            latents[-1] = T.channels(last, 1, last.shape[-3])
        z = gather_z(latents)
        code = self.ae.encode(z, cfg.stages) if self.ae is not None else None
        return ForwardResult(lr_rgb, alpha_logit, z, self.stage_channels, code)

    def inverse(self, lr_rgb, alpha_logit=None, z_hat=None) -> Tensor:
        """LR planes (+ alpha logit) + latent estimate -> HR image(s).

        ``z_hat`` defaults to zeros.
        """
        cfg = self.cfg
        lr_rgb = _as_tensor(lr_rgb)
        c = cfg.color_channels
        if lr_rgb.shape[-3] != c:
            raise InvalidArgument(f"expected {c} LR channels, got {lr_rgb.shape[-3]}")
        if cfg.has_alpha and alpha_logit is None:
            raise InvalidArgument("alpha variant needs the alpha plane")
        lead, (h, w) = lr_rgb.shape[:-3], lr_rgb.shape[-2:]
        if z_hat is None:
            z_hat = Tensor(np.zeros(lead + (self.z_channels, h, w), np.float32))
        z_hat = _as_tensor(z_hat)
        if z_hat.shape != lead + (self.z_channels, h, w):
            raise InvalidArgument(f"latent must be {lead + (self.z_channels, h, w)}, got {z_hat.shape}")
        latents = scatter_z(z_hat, self.stage_channels)
        if cfg.pre_split:
            lower = T.concat_channels([lr_rgb, _as_tensor(alpha_logit)])
        else:
            lower = lr_rgb
        if cfg.split.mode is SplitMode.POST_SPLIT_ALPHA:
            latents[-1] = T.concat_channels([_as_tensor(alpha_logit), latents[-1]])
        y = T.scale(lower, float(cfg.scale))
        for i in reversed(range(len(self.stages))):
            x_l, x_h = self.stages[i].inverse(y, latents[i])
            if i == 0 and cfg.pre_split:
                x_m = recover_removed_channel(T.channels(x_l, c, c + 1), x_h, c)
                low = T.channels(x_l, 0, c)
                coeffs = T.concat_channels([low, x_m, x_h])
            else:
                coeffs = T.concat_channels([x_l, x_h])
            y = haar_inverse_tensor(coeffs)
        return y

    # -- artifact-level API -----------------------------------------------------
    def downscale(self, hr) -> tuple[RescaleArtifact, Tensor]:
        hr = _as_tensor(hr)
        if hr.ndim != 3:
            raise InvalidArgument(f"downscale takes one (C,H,W) image, got {hr.shape}")
        out = self.forward(hr)
        alpha = out.alpha.data.copy() if out.alpha_logit is not None else None
        meta = quantize_code(out.code) if out.code is not None else None
        return RescaleArtifact(out.lr_rgb.data.copy(), alpha, meta), out.z

    def upscale(self, artifact: RescaleArtifact, z_override=None) -> Tensor:
        cfg = self.cfg
        if artifact.variant is not cfg.variant:
            raise InvalidArgument(f"artifact carries a {artifact.variant.value} payload, "
                                  f"model is {cfg.variant.value}")
        alpha_logit = None
        if artifact.alpha is not None:
            alpha_logit = Tensor(logit_clamped(artifact.alpha).astype(np.float32))
        z_hat = z_override
        if z_hat is None and artifact.meta is not None:
            code = dequantize_code(artifact.meta)
            if code.s.shape[-2:] != tuple(d // 4 for d in artifact.lr_rgb.shape[-2:]):
                raise InvalidArgument(f"metadata code {code.s.shape} does not fit LR image "
                                      f"{artifact.lr_rgb.shape}")
            z_hat = self.ae.decode(code)
        return self.inverse(artifact.lr_rgb, alpha_logit, z_hat)


def downscale(hr, model: RescaleModel) -> tuple[RescaleArtifact, Tensor]:
    return model.downscale(hr)


def upscale(artifact: RescaleArtifact, model: RescaleModel, z_override=None) -> Tensor:
    return model.upscale(artifact, z_override)


# -- checkpoints ---------------------------------------------------------------------

_MAGIC = b"IRSC"
_CKPT_VERSION = 1


def save_checkpoint(model: RescaleModel, path, extra: dict | None = None) -> None:
    """Config header (JSON) followed by every parameter as little-endian float32."""
    named = list(model.named_parameters())
    header = {
        "config": model.cfg.to_dict(),
        "params": [[name, list(p.shape)] for name, p in named],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<HI", _CKPT_VERSION, len(hbytes)) + hbytes)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> RescaleModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"magic: {path} is not a checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"version: unsupported checkpoint version {version}")
    off = 10
    try:
        header = json.loads(raw[off:off + hlen])
    except ValueError as exc:
        raise FormatError(f"header: {exc}") from None
    off += hlen
    model = RescaleModel(ModelConfig.from_dict(header["config"]))
    params = dict(model.named_parameters())
    if [n for n, _ in header["params"]] != list(params):
        raise FormatError("params: parameter names do not match the configuration")
    for name, shape in header["params"]:
        p = params[name]
        if tuple(shape) != p.shape:
            raise FormatError(f"params: {name} has shape {shape}, expected {list(p.shape)}")
        nbytes = 4 * p.data.size
        if off + nbytes > len(raw):
            raise FormatError(f"params: truncated at {name}")
        p.data[...] = np.frombuffer(raw, "<f4", p.data.size, off).reshape(p.shape)
        off += nbytes
    if off != len(raw):
        raise FormatError("params: trailing bytes after last parameter")
    model.extra = header.get("extra", {})
    return model
