"""Single-level orthonormal Haar transform, (C,H,W) <-> (4C,H/2,W/2).

Channel layout of the coefficient stack: ``C`` low-pass planes, then the
vertical, horizontal and diagonal detail planes, each group holding one plane
per input channel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import InvalidArgument, Tensor, concat_channels, channels


@dataclass
class HaarStack:
    low: Tensor   # (C, H/2, W/2)
    high: Tensor  # (3C, H/2, W/2): vertical, horizontal, diagonal

    @property
    def channels(self) -> int:
        return self.low.shape[-3] + self.high.shape[-3]

    def stacked(self) -> Tensor:
        return concat_channels([self.low, self.high])

    @classmethod
    def from_tensor(cls, t: Tensor) -> "HaarStack":
        c4 = t.shape[-3]
        if c4 % 4:
            raise InvalidArgument(f"Haar stack needs a multiple of 4 channels, got {c4}")
        return cls(channels(t, 0, c4 // 4), channels(t, c4 // 4, c4))


def _forward_np(x: np.ndarray) -> np.ndarray:
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    half = x.dtype.type(0.5)
    ll = (a + b + c + d) * half
    v = (a + b - c - d) * half
    hz = (a - b + c - d) * half
    dg = (a - b - c + d) * half
    return np.concatenate([ll, v, hz, dg], axis=-3)


def _inverse_np(s: np.ndarray) -> np.ndarray:
    c = s.shape[-3] // 4
    ll, v, hz, dg = (s[..., i * c:(i + 1) * c, :, :] for i in range(4))
    half = s.dtype.type(0.5)
    out = np.empty(s.shape[:-3] + (c, s.shape[-2] * 2, s.shape[-1] * 2), dtype=s.dtype)
    out[..., 0::2, 0::2] = (ll + v + hz + dg) * half
    out[..., 0::2, 1::2] = (ll + v - hz - dg) * half
    out[..., 1::2, 0::2] = (ll - v + hz - dg) * half
    out[..., 1::2, 1::2] = (ll - v - hz + dg) * half
    return out


def haar_forward_tensor(x: Tensor) -> Tensor:
    """Coefficient stack as one (4C, H/2, W/2) tensor."""
    if x.ndim not in (3, 4):
        raise InvalidArgument(f"haar_forward expects (C,H,W) or (N,C,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise InvalidArgument(f"haar_forward needs even extents, got {h}x{w}")
    # the basis matrix is symmetric and orthogonal, so the adjoint is the inverse
    return Tensor.from_op(_forward_np(x.data), (x,), lambda g: (_inverse_np(g),))


def haar_inverse_tensor(s: Tensor) -> Tensor:
    if s.ndim not in (3, 4):
        raise InvalidArgument(f"haar_inverse expects (4C,H,W) or (N,4C,H,W), got {s.shape}")
    if s.shape[-3] % 4:
        raise InvalidArgument(f"haar_inverse needs a multiple of 4 channels, got {s.shape[-3]}")
    return Tensor.from_op(_inverse_np(s.data), (s,), lambda g: (_forward_np(g),))


def haar_forward(x: Tensor) -> HaarStack:
    return HaarStack.from_tensor(haar_forward_tensor(x))


def haar_inverse(s: HaarStack | Tensor) -> Tensor:
    if isinstance(s, HaarStack):
        s = s.stacked()
    return haar_inverse_tensor(s)
