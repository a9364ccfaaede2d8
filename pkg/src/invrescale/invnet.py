"""Affine coupling blocks and the branch-splitting policies that feed them."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import InvalidArgument, Parameter, Tensor
from .wavelet import HaarStack


class SplitMode(str, Enum):
    BASELINE = "baseline"
    PRE_SPLIT_ALPHA = "pre_split_alpha"
    POST_SPLIT_ALPHA = "post_split_alpha"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = SplitMode.BASELINE
    alpha_avg_init: bool = True
    color_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        if self.color_channels < 1:
            raise InvalidArgument("color_channels must be positive")

    @property
    def low_channels(self) -> int:
        c = self.color_channels
        return c + 1 if self.mode is SplitMode.PRE_SPLIT_ALPHA else c

    @property
    def high_channels(self) -> int:
        return 4 * self.color_channels - self.low_channels


@dataclass
class SplitOutput:
    x_l: Tensor
    x_h: Tensor
    removed_channel_index: int | None = None


REMOVED_CHANNEL = 0


def split_channels(stack: HaarStack, spec: SplitSpec) -> SplitOutput:
    """Partition a Haar stack into the lower and upper coupling branches.

    In pre-split mode one extra plane (the alpha plane) joins the lower
    branch and the first detail plane is dropped from the upper branch, so
    the total channel count stays at 4C.
    """
    c = spec.color_channels
    if stack.channels != 4 * c:
        raise InvalidArgument(f"expected a {4 * c}-channel stack, got {stack.channels}")
    if spec.mode is SplitMode.POST_SPLIT_ALPHA:
        raise InvalidArgument("post-split alpha is taken after the coupling blocks, not here")
    if spec.mode is SplitMode.BASELINE:
        return SplitOutput(stack.low, stack.high)
    if spec.alpha_avg_init:
        alpha = T.channel_mean(stack.high)
    else:
        shape = stack.low.shape[:-3] + (1,) + stack.low.shape[-2:]
        alpha = Tensor(np.zeros(shape, dtype=stack.low.data.dtype))
    x_l = T.concat_channels([stack.low, alpha])
    x_h = T.channels(stack.high, REMOVED_CHANNEL + 1, 3 * c)
    return SplitOutput(x_l, x_h, REMOVED_CHANNEL)


def recover_removed_channel(x_alpha: Tensor, x_h_partial: Tensor, color_channels: int) -> Tensor:
    """Rebuild the dropped detail plane from the alpha plane and the 3C-1 kept ones.

    Exact when the alpha plane still holds the mean of all 3C detail planes.
    """
    c = color_channels
    if x_h_partial.shape[-3] != 3 * c - 1:
        raise InvalidArgument(f"expected {3 * c - 1} detail channels, got {x_h_partial.shape[-3]}")
    if x_alpha.shape[-3] != 1:
        raise InvalidArgument(f"alpha must be a single plane, got {x_alpha.shape[-3]} channels")
    return T.scale(x_alpha, 3 * c) - T.channel_sum(x_h_partial)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class ConvNet:
    """Plain stack of same-size 3x3 convolutions with leaky ReLU in between.

    With ``zero_last`` the final layer starts at zero, making the net output
    identically zero until trained.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator, *,
                 kernel: int = 3, slope: float = 0.2, zero_last: bool = True):
        self.slope = slope
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            shape = (cout, cin, kernel, kernel)
            last = i == len(widths) - 2
            w = np.zeros(shape, np.float32) if (last and zero_last) else _he_normal(rng, shape)
            self.layers.append((Parameter(w), Parameter(np.zeros(cout, np.float32))))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = T.conv2d(x, w, b)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x, self.slope)
        return x

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, (w, b) in enumerate(self.layers):
            yield f"{prefix}{i}.weight", w
            yield f"{prefix}{i}.bias", b


class InvBlock:
    """Affine coupling: y_l = x_l + phi(x_h); y_h = x_h * exp(s(y_l)) + eta(y_l)."""

    def __init__(self, low_channels: int, high_channels: int, rng: np.random.Generator,
                 width: int = 32, clamp: float = 1.0, depth: int = 3):
        self.low_channels = low_channels
        self.high_channels = high_channels
        self.clamp = clamp
        mid = [width] * (depth - 1)
        self.phi = ConvNet([high_channels, *mid, low_channels], rng)
        self.eta = ConvNet([low_channels, *mid, high_channels], rng)
        self.rho = ConvNet([low_channels, *mid, high_channels], rng)

    def log_scale(self, y_l: Tensor) -> Tensor:
        # centred sigmoid keeps the exponent inside [-clamp, clamp]
        return T.scale(T.sigmoid(self.rho(y_l)) * 2.0 - 1.0, self.clamp)

    def _check(self, low: Tensor, high: Tensor) -> None:
        if low.shape[-3] != self.low_channels or high.shape[-3] != self.high_channels:
            raise InvalidArgument(
                f"block expects {self.low_channels}+{self.high_channels} channels, "
                f"got {low.shape[-3]}+{high.shape[-3]}")
        if low.shape[:-3] != high.shape[:-3] or low.shape[-2:] != high.shape[-2:]:
            raise InvalidArgument(f"branch shapes disagree: {low.shape} vs {high.shape}")

    def forward(self, x_l: Tensor, x_h: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x_l, x_h)
        y_l = x_l + self.phi(x_h)
        y_h = x_h * T.exp(self.log_scale(y_l)) + self.eta(y_l)
        return y_l, y_h

    def inverse(self, y_l: Tensor, y_h: Tensor) -> tuple[Tensor, Tensor]:
        self._check(y_l, y_h)
        x_h = (y_h - self.eta(y_l)) * T.exp(-self.log_scale(y_l))
        x_l = y_l - self.phi(x_h)
        return x_l, x_h

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name in ("phi", "eta", "rho"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")


class BlockStack:
    def __init__(self, blocks: list[InvBlock]):
        self.blocks = blocks

    @classmethod
    def build(cls, depth: int, low_channels: int, high_channels: int,
              rng: np.random.Generator, width: int = 32, clamp: float = 1.0) -> "BlockStack":
        return cls([InvBlock(low_channels, high_channels, rng, width, clamp) for _ in range(depth)])

    def forward(self, x_l: Tensor, x_h: Tensor) -> tuple[Tensor, Tensor]:
        for b in self.blocks:
            x_l, x_h = b.forward(x_l, x_h)
        return x_l, x_h

    def inverse(self, y_l: Tensor, y_h: Tensor) -> tuple[Tensor, Tensor]:
        for b in reversed(self.blocks):
            y_l, y_h = b.inverse(y_l, y_h)
        return y_l, y_h

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}{i}.")


def invblock_forward(x_l: Tensor, x_h: Tensor, block: InvBlock) -> tuple[Tensor, Tensor]:
    return block.forward(x_l, x_h)


def invblock_inverse(y_l: Tensor, y_h: Tensor, block: InvBlock) -> tuple[Tensor, Tensor]:
    return block.inverse(y_l, y_h)
