"""Minimal PNG codec and the on-disk form of rescaling artifacts.

Only 8-bit, non-interlaced grey/RGB/RGBA (+ grey-alpha on read) is handled.
Writes are deterministic: filter type 0 on every row, fixed zlib level, text
chunks before the image data.
"""
from __future__ import annotations

import base64
import binascii
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .latent_codec import FormatError, QuantizedCode
from .model import RescaleArtifact, logit_clamped
from .tensor import _sigmoid_np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
LATENT_KEYWORD = "irn-m-latent"
_COLOR_TYPES = {0: 1, 2: 3, 4: 2, 6: 4}
_CHANNELS_TO_TYPE = {1: 0, 3: 2, 2: 4, 4: 6}


@dataclass
class PngPayload:
    width: int
    height: int
    channels: int
    pixels: np.ndarray                      # (height, width, channels) uint8
    text_chunks: list[tuple[str, bytes]] = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValueError(f"pixel array {self.pixels.shape} does not match "
                             f"{self.height}x{self.width}x{self.channels}")
        for key, _ in self.text_chunks:
            _check_keyword(key)

    def text(self, keyword: str) -> bytes | None:
        for key, value in self.text_chunks:
            if key == keyword:
                return value
        return None


def _check_keyword(key: str) -> None:
    if not 1 <= len(key) <= 79 or not key.isascii():
        raise FormatError(f"keyword: {key!r} must be 1-79 ASCII characters")


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def encode_png(payload: PngPayload) -> bytes:
    if payload.channels not in _CHANNELS_TO_TYPE:
        raise FormatError(f"channels: unsupported count {payload.channels}")
    pix = np.ascontiguousarray(payload.pixels, dtype=np.uint8)
    ihdr = struct.pack(">IIBBBBB", payload.width, payload.height, 8,
                       _CHANNELS_TO_TYPE[payload.channels], 0, 0, 0)
    rows = pix.reshape(payload.height, -1)
    raw = np.concatenate([np.zeros((payload.height, 1), np.uint8), rows], axis=1).tobytes()
    out = [PNG_SIGNATURE, _chunk(b"IHDR", ihdr)]
    for key, value in payload.text_chunks:
        _check_keyword(key)
        out.append(_chunk(b"tEXt", key.encode("latin-1") + b"\x00" + value))
    out.append(_chunk(b"IDAT", zlib.compress(raw, 9)))
    out.append(_chunk(b"IEND", b""))
    return b"".join(out)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    if len(data) != height * (stride + 1):
        raise FormatError(f"IDAT: expected {height * (stride + 1)} bytes after inflate, got {len(data)}")
    buf = np.frombuffer(data, np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), np.uint8)
    prev = np.zeros(stride, np.uint8)
    for y in range(height):
        ftype, line = buf[y, 0], buf[y, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            cur = (np.cumsum(line.reshape(-1, bpp).astype(np.int64), axis=0) % 256).astype(np.uint8).ravel()
        elif ftype == 2:
            cur = line + prev
        elif ftype in (3, 4):
            cur = np.zeros(stride, np.int64)
            ln, up = line.astype(np.int64), prev.astype(np.int64)
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                if ftype == 3:
                    pred = (left + up[i]) >> 1
                else:
                    pred = _paeth(int(left), int(up[i]), int(up[i - bpp]) if i >= bpp else 0)
                cur[i] = (ln[i] + pred) & 0xFF
            cur = cur.astype(np.uint8)
        else:
            raise FormatError(f"filter: unknown row filter type {ftype} at row {y}")
        out[y] = cur
        prev = cur
    return out


def decode_png(raw: bytes) -> PngPayload:
    if not raw.startswith(PNG_SIGNATURE):
        raise FormatError("signature: not a PNG file")
    pos, header, idat, texts = len(PNG_SIGNATURE), None, [], []
    while True:
        if pos + 8 > len(raw):
            raise FormatError("chunk: truncated file (no IEND)")
        length, kind = struct.unpack_from(">I4s", raw, pos)
        data = raw[pos + 8:pos + 8 + length]
        if len(data) != length or pos + 12 + length > len(raw):
            raise FormatError(f"chunk: {kind!r} truncated")
        (crc,) = struct.unpack_from(">I", raw, pos + 8 + length)
        if zlib.crc32(kind + data) & 0xFFFFFFFF != crc:
            raise FormatError(f"crc: mismatch in {kind.decode('latin-1')} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"tEXt":
            key, sep, value = data.partition(b"\x00")
            if not sep:
                raise FormatError("tEXt: missing keyword separator")
            texts.append((key.decode("latin-1"), value))
        elif kind == b"IEND":
            break
    if header is None:
        raise FormatError("IHDR: missing")
    width, height, depth, ctype, comp, filt, interlace = header
    if depth != 8 or ctype not in _COLOR_TYPES or interlace or comp or filt:
        raise FormatError(f"IHDR: unsupported depth={depth} color={ctype} interlace={interlace}")
    ch = _COLOR_TYPES[ctype]
    try:
        inflated = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FormatError(f"IDAT: {exc}") from None
    pix = _unfilter(inflated, height, width * ch, ch).reshape(height, width, ch)
    return PngPayload(width, height, ch, pix, texts)


def read_png(path) -> PngPayload:
    return decode_png(Path(path).read_bytes())


def write_png(payload: PngPayload, path) -> None:
    Path(path).write_bytes(encode_png(payload))


# -- artifacts ------------------------------------------------------------------------

def quantize_plane(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize_alpha(q: np.ndarray) -> np.ndarray:
    """Bytes -> alpha in (0,1); the two extreme levels are pulled half a step inward."""
    a = q.astype(np.float64) / 255.0
    a[q == 0] = 0.5 / 256
    a[q == 255] = 255.5 / 256
    return a.astype(np.float32)


def stored_rgb(x: np.ndarray) -> np.ndarray:
    """What an LR plane reads back as after an 8-bit write."""
    return (quantize_plane(x).astype(np.float64) / 255.0).astype(np.float32)


def stored_alpha_logit(a: np.ndarray) -> np.ndarray:
    """Alpha logit as recovered after sigmoid -> 8-bit write -> read -> logit."""
    q = quantize_plane(_sigmoid_np(np.asarray(a, np.float64)))
    return logit_clamped(dequantize_alpha(q)).astype(np.float32)


def artifact_to_png(a: RescaleArtifact) -> PngPayload:
    planes = [quantize_plane(a.lr_rgb)]
    if a.alpha is not None:
        planes.append(quantize_plane(a.alpha))
    pix = np.concatenate(planes, axis=0).transpose(1, 2, 0)
    texts = []
    if a.meta is not None:
        texts.append((LATENT_KEYWORD, base64.b64encode(a.meta.to_bytes())))
    h, w, c = pix.shape
    return PngPayload(w, h, c, np.ascontiguousarray(pix), texts)


def png_to_artifact(p: PngPayload) -> RescaleArtifact:
    if p.channels not in (3, 4):
        raise FormatError(f"channels: artifact must be RGB or RGBA, got {p.channels} channels")
    pix = p.pixels.transpose(2, 0, 1)
    lr = (pix[:3].astype(np.float64) / 255.0).astype(np.float32)
    blob = p.text(LATENT_KEYWORD)
    if p.channels == 4:
        if blob is not None:
            raise FormatError(f"{LATENT_KEYWORD}: RGBA artifact must not carry a latent chunk")
        return RescaleArtifact(lr, alpha=dequantize_alpha(pix[3:4]))
    if blob is None:
        return RescaleArtifact(lr)
    try:
        code_bytes = base64.b64decode(blob, validate=True)
    except binascii.Error as exc:
        raise FormatError(f"{LATENT_KEYWORD}: bad base64 ({exc})") from None
    meta = QuantizedCode.from_bytes(code_bytes)
    return RescaleArtifact(lr, meta=meta)


def write_artifact(a: RescaleArtifact, path) -> None:
    write_png(artifact_to_png(a), path)


def read_artifact(path) -> RescaleArtifact:
    return png_to_artifact(read_png(path))


def load_image(path) -> np.ndarray:
    """Any image file -> float32 (3, H, W) in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(np.float32)


def save_image(img: np.ndarray, path) -> None:
    """(3, H, W) float in [0, 1] -> 8-bit RGB PNG."""
    pix = quantize_plane(img).transpose(1, 2, 0)
    h, w, c = pix.shape
    write_png(PngPayload(w, h, c, np.ascontiguousarray(pix)), path)
