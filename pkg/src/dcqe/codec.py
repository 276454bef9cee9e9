"""JPEG-style block-DCT quantization round trip (no entropy coding)."""
from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .imageio import ImageBuffer, read_pnm, write_pnm

BLOCK = 8

# ITU-T T.81 Annex K luminance table
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def quant_table_for_quality(quality: int) -> np.ndarray:
    """IJG quality scaling of the base luminance table."""
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in 1..100, got {quality!r}")
    quality = int(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = (BASE_LUMA_TABLE * scale + 50) // 100
    return np.clip(table, 1, 255)


def quality_from_qp(qp: int) -> int:
    """Map an HEVC-style QP onto the simulator's quality axis (stand-in for BPG)."""
    return int(np.clip(100 - 2 * qp, 1, 100))


@dataclass(frozen=True)
class CodecConfig:
    quality: int = 50
    name: str = "jpeg"
    block_size: int = BLOCK
    luma_quant_table: np.ndarray = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.block_size != BLOCK:
            raise ValueError("block_size is fixed at 8")
        table = quant_table_for_quality(self.quality)
        if self.luma_quant_table is not None:
            table = np.asarray(self.luma_quant_table, dtype=np.int64)
            if table.shape != (BLOCK, BLOCK) or table.min() < 1 or table.max() > 255:
                raise ValueError("quantization table must be 8x8 with entries in [1, 255]")
        object.__setattr__(self, "luma_quant_table", table)

    @classmethod
    def from_qp(cls, qp: int) -> "CodecConfig":
        return cls(quality=quality_from_qp(qp), name=f"bpgsim-qp{qp}")

    @property
    def label(self) -> str:
        return f"{self.name}-q{self.quality}"


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


DCT = _dct_matrix()


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def encode_decode(img: ImageBuffer, cfg: CodecConfig) -> ImageBuffer:
    """Quantize every 8x8 block of every channel in the DCT domain and reconstruct."""
    if img.height == 0 or img.width == 0:
        raise ValueError("cannot compress an empty image")
    h, w = img.height, img.width
    ph, pw = -h % BLOCK, -w % BLOCK
    samples = img.samples
    if ph or pw:
        samples = np.pad(samples, ((0, ph), (0, pw), (0, 0)), mode="edge")
    table = cfg.luma_quant_table.astype(np.float64)
    out = np.empty_like(samples)
    for c in range(samples.shape[2]):
        blocks = _blocks(samples[:, :, c] * 255.0 - 128.0)
        coeffs = DCT @ blocks @ DCT.T
        q = _round_half_away(coeffs / table)
        rec = DCT.T @ (q * table) @ DCT
        out[:, :, c] = (_unblocks(rec) + 128.0) / 255.0
    out = np.clip(out[:h, :w], 0.0, 1.0)
    return ImageBuffer(out)


@dataclass(frozen=True)
class ExternalCodec:
    """Runs ``command``: PNM on stdin, PNM on stdout, exit status 0."""

    command: str
    name: str = "external"
    timeout: float = 60.0

    @property
    def label(self) -> str:
        return self.name

    def __call__(self, img: ImageBuffer) -> ImageBuffer:
        proc = subprocess.run(shlex.split(self.command), input=write_pnm(img),
                              capture_output=True, timeout=self.timeout, check=False)
        if proc.returncode != 0:
            raise RuntimeError(f"{self.command!r} exited with {proc.returncode}: "
                               f"{proc.stderr.decode(errors='replace').strip()}")
        out = read_pnm(proc.stdout)
        if out.shape != img.shape:
            raise RuntimeError(f"{self.command!r} changed image shape {img.shape} -> {out.shape}")
        return out


def compress(img: ImageBuffer, codec: CodecConfig | ExternalCodec) -> ImageBuffer:
    if isinstance(codec, ExternalCodec):
        return codec(img)
    return encode_decode(img, codec)
