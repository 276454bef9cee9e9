"""Strict JSON run configuration.

Every section is a dataclass; unknown keys and wrong types are rejected with
their dotted key path.  Missing keys take the dataclass defaults, so an empty
``weights`` section yields the paper CNN weights.  ``to_dict`` emits the
fully-resolved config, and parsing that echo gives back an equal RunConfig.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .codec import CodecConfig, ExternalCodec
from .models import ModelSpec
from .training import LossWeights, StraightforwardConfig, TrainConfig

COMMANDS = ("train", "cycle", "experiment", "toy", "report")
DATA_DIR = Path(__file__).parent / "data"
BUNDLED = {"desk:train": DATA_DIR / "desk" / "train", "desk:test": DATA_DIR / "desk" / "test"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataSection:
    train: tuple[str, ...] = ("desk:train",)
    test: tuple[str, ...] = ("desk:test",)
    quality: int = 40
    patch_stride: int = 16


@dataclass(frozen=True)
class ModelSection:
    family: str = "dncnn_like"
    channels_in: int = 1
    depth: int = 8
    width: int = 32
    kernel: int = 3
    hidden: tuple[int, ...] = (32, 16, 16)
    kernels: tuple[int, ...] = (9, 7, 1, 5)

    def spec(self) -> ModelSpec:
        if self.family == "arcnn_like":
            return ModelSpec.arcnn_like(self.channels_in, tuple(self.hidden), tuple(self.kernels))
        if self.family == "dncnn_like":
            return ModelSpec.dncnn_like(self.channels_in, self.depth, self.width, self.kernel)
        raise ConfigError("model.family", f"unknown family {self.family!r}")


@dataclass(frozen=True)
class OperatorSection:
    name: str = "identity"
    kind: str = "filter"
    filter: str = "identity"
    checkpoint: str = ""
    command: str = ""
    size: int = 3
    sigma: float = 1.0
    amount: float = 0.5


@dataclass(frozen=True)
class CodecSection:
    quality: int = 0
    qp: int = 0
    command: str = ""
    name: str = ""

    def build(self, path: str = "codecs") -> CodecConfig | ExternalCodec:
        if self.command:
            return ExternalCodec(self.command, self.name or "external")
        if self.qp and self.quality:
            raise ConfigError(path, "give either quality or qp, not both")
        if self.qp:
            return CodecConfig.from_qp(self.qp)
        if not 1 <= self.quality <= 100:
            raise ConfigError(path + ".quality", "quality must be in 1..100")
        return CodecConfig(self.quality, self.name or "jpeg")


@dataclass(frozen=True)
class CycleSection:
    cycles: int = 5
    case: str = "same_method"
    clamp_between_cycles: bool = True
    quantize_between_cycles: bool = False
    image: str = ""
    operators: tuple[OperatorSection, ...] = (OperatorSection(),)


@dataclass(frozen=True)
class ToySection:
    components: int = 3
    radius: float = 1.0
    std: float = 0.08
    sigma_ratio: float = 0.3
    hidden: int = 32
    train_samples: int = 2000
    eval_samples: int = 1000
    iterations: int = 3000
    batch_size: int = 128
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class ReportSection:
    inputs: tuple[str, ...] = ()
    metric: str = ""


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    seed: int = 0
    out: str = "runs/latest"
    workers: int = 0
    metrics: tuple[str, ...] = ("psnr", "ssim")
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    weights: LossWeights = LossWeights()
    straightforward: StraightforwardConfig = StraightforwardConfig()
    cycle: CycleSection = CycleSection()
    codecs: tuple[CodecSection, ...] = (CodecSection(quality=40),)
    toy: ToySection = ToySection()
    report: ReportSection = ReportSection()

    def to_dict(self) -> dict:
        return _dump(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def codec_pool(self) -> list:
        return [c.build(f"codecs[{i}]") for i, c in enumerate(self.codecs)]

    def train_config(self) -> TrainConfig:
        """TrainConfig with the run seed applied."""
        return dataclasses.replace(self.train, seed=self.seed)


def resolve_paths(items: typing.Iterable[str]) -> list[Path]:
    return [BUNDLED.get(p, Path(p)) for p in items]


# -- strict (de)serialization -------------------------------------------------

def _dump(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_dump(v) for v in obj]
    return obj


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        inner = args[0]
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp!r}")


def _build(cls, data: dict, path: str = ""):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            sub = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(data[name], hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(dotted, "cannot override inside a non-object value")
        cur = nxt
    cur[parts[-1]] = value


def parse_config(source: str | Path | dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig from a JSON file (or dict) plus dotted-key overrides."""
    if source is None:
        doc: dict = {}
    elif isinstance(source, dict):
        doc = json.loads(json.dumps(source))
    else:
        text = Path(source).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(doc, key, value)
    cfg = _build(RunConfig, doc)
    if cfg.command not in COMMANDS:
        raise ConfigError("command", f"unknown command {cfg.command!r}")
    if cfg.workers < 0:
        raise ConfigError("workers", "must be >= 0 (0 means one per processor)")
    for i, c in enumerate(cfg.codecs):
        c.build(f"codecs[{i}]")
    cfg.model.spec()
    return cfg
