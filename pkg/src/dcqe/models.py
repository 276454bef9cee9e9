"""Small CNN enhancement networks and their checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FAMILIES = ("arcnn_like", "dncnn_like")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "dncnn_like"
    channels_in: int = 1
    channels_hidden: tuple[int, ...] = (32,) * 7
    kernel_sizes: tuple[int, ...] = (3,) * 8
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels_hidden", tuple(int(c) for c in self.channels_hidden))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if len(self.kernel_sizes) != len(self.channels_hidden) + 1:
            raise ValueError("need one kernel size per layer (hidden layers + output layer)")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel_sizes}")
        if self.channels_in not in (1, 3):
            raise ValueError("channels_in must be 1 or 3")
        if self.family == "arcnn_like" and (self.depth != 4 or self.residual):
            raise ValueError("arcnn_like has exactly 4 layers and no residual path")
        if self.family == "dncnn_like" and (self.depth < 3 or not self.residual):
            raise ValueError("dncnn_like needs depth >= 3 and residual=True")

    @property
    def depth(self) -> int:
        return len(self.kernel_sizes)

    @classmethod
    def arcnn_like(cls, channels_in: int = 1, hidden: tuple[int, int, int] = (32, 16, 16),
                   kernels: tuple[int, int, int, int] = (9, 7, 1, 5)) -> "ModelSpec":
        # feature extraction, enhancement, mapping, reconstruction
        return cls("arcnn_like", channels_in, hidden, kernels, residual=False)

    @classmethod
    def dncnn_like(cls, channels_in: int = 1, depth: int = 8, width: int = 32, kernel: int = 3) -> "ModelSpec":
        return cls("dncnn_like", channels_in, (width,) * (depth - 1), (kernel,) * depth, residual=True)

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        chans = (self.channels_in, *self.channels_hidden, self.channels_in)
        return [(chans[i + 1], chans[i], k, k) for i, k in enumerate(self.kernel_sizes)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_hidden"] = list(self.channels_hidden)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(eq=False)
class ModelParams:
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def count(self) -> int:
        return int(np.sum([t.size for t in self.tensors()]))

    def arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors()]

    def copy(self) -> "ModelParams":
        return ModelParams([(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True))
                            for w, b in self.layers])

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return cls([(Tensor(w, True), Tensor(b, True)) for w, b in zip(it, it)])


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for shape in spec.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(shape[0]), requires_grad=True)))
    return ModelParams(layers)


def zero_params(spec: ModelSpec) -> ModelParams:
    return ModelParams([(Tensor(np.zeros(s), True), Tensor(np.zeros(s[0]), True))
                        for s in spec.layer_shapes()])


def forward(params: ModelParams, spec: ModelSpec, x: Tensor) -> Tensor:
    """Apply the network to an NCHW batch.  Output is not clamped."""
    if x.data.ndim != 4 or x.shape[1] != spec.channels_in:
        raise ad.ShapeError(f"model expects N x {spec.channels_in} x H x W input, got {x.shape}")
    if len(params.layers) != spec.depth:
        raise ad.ShapeError(f"spec has {spec.depth} layers, params have {len(params.layers)}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = ad.conv2d(h, w, b)
        if i < last:
            h = ad.relu(h)
    if spec.residual:
        h = ad.add(x, h)
    return h


def apply(params: ModelParams, spec: ModelSpec, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Inference on an NCHW array, outside any tape."""
    outs = [forward(params, spec, Tensor(images[i:i + batch])).data for i in range(0, len(images), batch)]
    return np.concatenate(outs)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"DCQECKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, spec: ModelSpec, params: ModelParams, meta: dict | None = None) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header, then every
    array as float64 little-endian in declaration order."""
    arrays = params.arrays()
    header = {"spec": spec.to_dict(), "shapes": [list(a.shape) for a in arrays], "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        if off + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    spec = ModelSpec.from_dict(header["spec"])
    params = ModelParams.from_arrays(arrays)
    if [tuple(w.shape) for w, _ in params.layers] != spec.layer_shapes():
        raise ValueError(f"{path}: parameter shapes do not match the stored spec")
    return spec, params, header.get("meta", {})
