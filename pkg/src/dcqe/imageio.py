"""Binary PNM (P5/P6, maxval 255) reading and writing, plus training patches."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor


class PNMError(ValueError):
    """Malformed PNM input.  ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(eq=False)
class ImageBuffer:
    """H x W x C image with samples in [0, 1]."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3 or s.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {s.shape}")
        self.samples = s

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape

    def clamped(self) -> "ImageBuffer":
        return ImageBuffer(np.clip(self.samples, 0.0, 1.0))

    def is_valid(self) -> bool:
        s = self.samples
        return bool(np.all(np.isfinite(s)) and s.min(initial=0.0) >= 0.0 and s.max(initial=0.0) <= 1.0)

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.samples, other.samples)

    __hash__ = None  # type: ignore[assignment]


_WHITESPACE = b" \t\n\r\v\f"


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c in _WHITESPACE and c:
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("truncated header", start)
    return buf[start:pos], start, pos


def read_pnm(data: bytes) -> ImageBuffer:
    """Parse a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    data = bytes(data)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, tok_start, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise PNMError(f"bad {label} {tok!r}", tok_start)
        fields.append((int(tok), tok_start))
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise PNMError("width must be positive", wpos)
    if height < 1:
        raise PNMError("height must be positive", hpos)
    if maxval != 255:
        raise PNMError(f"maxval {maxval} unsupported; only 255", mpos)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise PNMError("missing whitespace after header", pos)
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PNMError(f"truncated payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(pixels.astype(np.float64) / 255.0)


def to_bytes(img: ImageBuffer) -> np.ndarray:
    # round half up, after clamping
    s = np.clip(img.samples, 0.0, 1.0) * 255.0
    return np.floor(s + 0.5).astype(np.uint8)


def write_pnm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + to_bytes(img).tobytes()


def quantize(img: ImageBuffer) -> ImageBuffer:
    """Round-trip through 8-bit precision."""
    return ImageBuffer(to_bytes(img).astype(np.float64) / 255.0)


def load(path: str | Path) -> ImageBuffer:
    return read_pnm(Path(path).read_bytes())


def save(img: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(write_pnm(img))


def to_tensor(images: ImageBuffer | list[ImageBuffer], requires_grad: bool = False) -> Tensor:
    """Stack images into an NCHW tensor (values copied exactly)."""
    if isinstance(images, ImageBuffer):
        images = [images]
    arr = np.stack([im.samples.transpose(2, 0, 1) for im in images])
    return Tensor(arr, requires_grad=requires_grad)


def from_tensor(t: Tensor | np.ndarray) -> list[ImageBuffer]:
    """Split an NCHW tensor back into unclamped images."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return [ImageBuffer(a.transpose(1, 2, 0).copy()) for a in arr]


def patch_origins(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if size < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if size > min(height, width):
        raise ValueError(f"patch size {size} exceeds image side {min(height, width)}")
    return [(y, x) for y in range(0, height - size + 1, stride)
            for x in range(0, width - size + 1, stride)]


def extract_patches(img: ImageBuffer, size: int, stride: int, seed: int | None = None) -> list[ImageBuffer]:
    """All ``size``-square windows on a ``stride`` grid.

    With a seed the list is shuffled by a generator derived from it; the order
    depends only on geometry, so two images of the same size yield aligned
    patch lists under the same seed.
    """
    origins = patch_origins(img.height, img.width, size, stride)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(origins))
        origins = [origins[i] for i in order]
    return [ImageBuffer(img.samples[y:y + size, x:x + size].copy()) for y, x in origins]
