"""Multi-enhancement cycling: compress once, enhance n times, track quality.

Three scenarios are supported:

* ``same_method``: one operator applied at every cycle;
* ``vary_method``: each cycle draws an operator from a pool, fixed codec;
* ``vary_method_and_codec``: as above, and each image also draws its
  (codec, quality) pair from a codec pool at cycle 0.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import imageio
from .codec import CodecConfig, ExternalCodec, compress
from .imageio import ImageBuffer
from .metrics import METRICS, HIGHER_IS_BETTER, MetricSeries, degradation_index
from .seeding import substream

log = logging.getLogger(__name__)

CASES = ("same_method", "vary_method", "vary_method_and_codec")


# -- operators ----------------------------------------------------------------

def _conv_edge(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    p = k // 2
    padded = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.einsum("hwcij,ij->hwc", win, kernel)


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g = np.outer(g, g)
    return g / g.sum()


def box_blur(img: np.ndarray, size: int = 3) -> np.ndarray:
    return _conv_edge(img, np.full((size, size), 1.0 / (size * size)))


def gaussian_blur(img: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    return _conv_edge(img, _gaussian_kernel(sigma, max(1, int(math.ceil(3 * sigma)))))


def unsharp(img: np.ndarray, amount: float = 0.5, sigma: float = 1.0) -> np.ndarray:
    return img + amount * (img - gaussian_blur(img, sigma))


def median3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    return np.median(win.reshape(*img.shape, 9), axis=-1)


BUILTIN_FILTERS: dict[str, Callable[..., np.ndarray]] = {
    "identity": lambda img: img.copy(),
    "box": box_blur,
    "gaussian": gaussian_blur,
    "unsharp": unsharp,
    "median": median3,
}

# pool used for the scenario comparison; all are mild smoothers or sharpeners
DEGRADING_POOL = (
    ("box3", "box", {"size": 3}),
    ("gauss1", "gaussian", {"sigma": 1.0}),
    ("median3", "median", {}),
    ("unsharp", "unsharp", {"amount": 0.6, "sigma": 1.0}),
)


@dataclass(eq=False)
class EnhanceOperator:
    """An image-to-image enhancement step.

    ``kind`` is ``filter`` (built-in, ``parameters['filter']`` names it),
    ``model`` (``parameters['checkpoint']``) or ``external``
    (``parameters['command']``, PNM over stdin/stdout).
    """

    name: str
    kind: str = "filter"
    parameters: dict = field(default_factory=dict)
    _model: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("filter", "model", "external"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "filter" and self.parameters.get("filter", "identity") not in BUILTIN_FILTERS:
            raise ValueError(f"unknown built-in filter {self.parameters.get('filter')!r}")

    @classmethod
    def identity(cls) -> "EnhanceOperator":
        return cls("identity", "filter", {"filter": "identity"})

    @classmethod
    def builtin(cls, name: str, filter: str, **kw) -> "EnhanceOperator":
        return cls(name, "filter", {"filter": filter, **kw})

    @classmethod
    def from_checkpoint(cls, path: str | Path, name: str | None = None) -> "EnhanceOperator":
        return cls(name or Path(path).stem, "model", {"checkpoint": str(path)})

    @classmethod
    def from_params(cls, name: str, spec, params) -> "EnhanceOperator":
        op = cls(name, "model", {"checkpoint": None})
        op._model = (spec, params.arrays())
        return op

    @classmethod
    def external(cls, name: str, command: str) -> "EnhanceOperator":
        return cls(name, "external", {"command": command})

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind, "parameters": dict(self.parameters)}

    def _load_model(self):
        from .models import ModelParams, load_checkpoint

        if self._model is None:
            spec, params, _ = load_checkpoint(self.parameters["checkpoint"])
            self._model = (spec, params.arrays())
        spec, arrays = self._model
        return spec, ModelParams.from_arrays(arrays)

    def __call__(self, img: ImageBuffer) -> ImageBuffer:
        if self.kind == "filter":
            kw = {k: v for k, v in self.parameters.items() if k != "filter"}
            out = BUILTIN_FILTERS[self.parameters.get("filter", "identity")](img.samples, **kw)
            return ImageBuffer(out)
        if self.kind == "external":
            return ExternalCodec(self.parameters["command"], self.name)(img)
        from .models import apply

        spec, params = self._load_model()
        out = apply(params, spec, img.samples.transpose(2, 0, 1)[None])[0]
        return ImageBuffer(out.transpose(1, 2, 0))


def degrading_pool() -> list[EnhanceOperator]:
    return [EnhanceOperator.builtin(n, f, **kw) for n, f, kw in DEGRADING_POOL]


# -- cycling ------------------------------------------------------------------

@dataclass(frozen=True)
class CycleSpec:
    operators: tuple[EnhanceOperator, ...]
    cycles: int = 5
    case: str = "same_method"
    codecs: tuple = ()
    seed: int = 0
    clamp_between_cycles: bool = True
    quantize_between_cycles: bool = False
    metrics: tuple[str, ...] = ("psnr", "ssim")

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "codecs", tuple(self.codecs))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.cycles < 1:
            raise ValueError("cycles must be at least 1")
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        if not self.operators:
            raise ValueError("operator pool is empty")
        if self.case != "same_method" and len(self.operators) < 2:
            raise ValueError(f"case {self.case} needs at least 2 operators")
        if self.case == "vary_method_and_codec" and len(self.codecs) < 1:
            raise ValueError("vary_method_and_codec needs a codec pool")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")

    @property
    def draw_rule(self) -> str:
        if self.case == "same_method":
            return "fixed"
        return "without_replacement" if len(self.operators) >= self.cycles else "with_replacement"


@dataclass
class DegradationReport:
    series: dict[str, MetricSeries]  # cycles 0..n
    di: dict[str, float]
    trace: list[str]  # operator per cycle 1..n
    codec: str
    seed: int
    config: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def cycles(self) -> int:
        return len(self.trace)


def choose_operators(spec: CycleSpec, image_index: int) -> list[int]:
    """Operator index for each cycle of one image (explicit, replayable draw)."""
    if spec.case == "same_method":
        return [0] * spec.cycles
    rng = substream(spec.seed, "case", image_index)
    pool = len(spec.operators)
    if pool >= spec.cycles:
        return [int(i) for i in rng.permutation(pool)[: spec.cycles]]
    return [int(i) for i in rng.integers(0, pool, size=spec.cycles)]


def choose_codec(spec: CycleSpec, image_index: int):
    rng = substream(spec.seed, "codec", image_index)
    return spec.codecs[int(rng.integers(0, len(spec.codecs)))]


def _di_or_nan(values: Sequence[float], orientation: int) -> float:
    try:
        return degradation_index(MetricSeries("", tuple(values), orientation))
    except ValueError:
        return math.nan


def run_cycles(raw: ImageBuffer, codec: CodecConfig | ExternalCodec, spec: CycleSpec,
               image_index: int = 0) -> DegradationReport:
    """Compress ``raw`` once and push it through ``spec.cycles`` enhancements."""
    if spec.case == "vary_method_and_codec":
        codec = choose_codec(spec, image_index)
    picks = choose_operators(spec, image_index)
    current = compress(raw, codec)
    values = {m: [METRICS[m](current, raw)] for m in spec.metrics}
    trace: list[str] = []
    error = None
    for k, idx in enumerate(picks, start=1):
        op = spec.operators[idx]
        try:
            nxt = op(current)
            if nxt.shape != current.shape:
                raise ValueError(f"operator changed shape {current.shape} -> {nxt.shape}")
            if not np.isfinite(nxt.samples).all():
                raise ValueError("operator produced non-finite samples")
        except Exception as exc:  # noqa: BLE001 - any operator failure truncates the report
            error = f"cycle {k}: operator {op.name} failed: {exc}"
            log.warning(error)
            break
        if spec.clamp_between_cycles:
            nxt = nxt.clamped()
        if spec.quantize_between_cycles:
            nxt = imageio.quantize(nxt)
        current = nxt
        trace.append(op.name)
        for m in spec.metrics:
            values[m].append(METRICS[m](current, raw))
    series = {m: MetricSeries.for_metric(m, v) for m, v in values.items()}
    di = {m: (_di_or_nan(s.values[1:], s.orientation) if len(s.values) > 2 else math.nan)
          for m, s in series.items()}
    return DegradationReport(series, di, trace, codec.label, spec.seed, cycle_config(spec), error)


def cycle_config(spec: CycleSpec) -> dict:
    return {
        "cycles": spec.cycles, "case": spec.case, "seed": spec.seed,
        "clamp_between_cycles": spec.clamp_between_cycles,
        "quantize_between_cycles": spec.quantize_between_cycles,
        "draw_rule": spec.draw_rule,
        "operators": [op.name for op in spec.operators],
        "codecs": [c.label for c in spec.codecs],
        "metrics": list(spec.metrics),
        "di_aggregation": "dataset_mean_series",
    }


# -- experiments --------------------------------------------------------------

@dataclass
class SummaryRow:
    method: str
    codec: str
    case: str
    metric: str
    series: tuple[float, ...]
    di: float
    images: int


@dataclass
class ExperimentReport:
    rows: list[dict]  # per (image, method, codec, case, cycle, metric)
    summary: list[SummaryRow]
    config: dict
    skipped: list[str] = field(default_factory=list)

    def mean_di(self, case: str, metric: str = "psnr") -> float:
        vals = [r.di for r in self.summary if r.case == case and r.metric == metric]
        return float(np.mean(vals))


def _work(args):
    raw_bytes, name, codec, spec, idx = args
    return name, run_cycles(imageio.read_pnm(raw_bytes), codec, spec, idx)


def _load_dataset(paths: Sequence[str | Path]) -> tuple[list[tuple[str, bytes]], list[str]]:
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.p[gp]m")) if p.is_dir() else [p])
    files = sorted(files, key=str)
    ok, skipped = [], []
    for f in files:
        try:
            data = f.read_bytes()
            imageio.read_pnm(data)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", f, exc)
            skipped.append(f"{f}: {exc}")
            continue
        ok.append((str(f), data))
    if not ok:
        raise ValueError(f"no readable images in {', '.join(map(str, paths))}")
    return ok, skipped


def _mean_series(reports: list[DegradationReport], metric: str, length: int) -> tuple[list[float], int]:
    usable = [r.series[metric].values for r in reports
              if len(r.series[metric].values) == length and all(math.isfinite(v) for v in r.series[metric].values)]
    excluded = len(reports) - len(usable)
    if excluded:
        log.info("%s: excluded %d image(s) with infinite or truncated series", metric, excluded)
    if not usable:
        return [math.nan] * length, 0
    return [float(v) for v in np.mean(np.array(usable), axis=0)], len(usable)


def run_experiment(dataset: Sequence[str | Path] | str | Path, operators: Sequence[EnhanceOperator],
                   codecs: Sequence[CodecConfig], case: str = "same_method", cycles: int = 5,
                   metrics: Sequence[str] = ("psnr", "ssim"), seed: int = 0, workers: int = 1,
                   clamp_between_cycles: bool = True, quantize_between_cycles: bool = False) -> ExperimentReport:
    """Cycle every image of a dataset and aggregate per (method, codec, case).

    Case 1 runs each operator on its own (``method`` is the operator name).
    Case 2 runs once per codec with random operator draws; case 3 runs once
    with random codec and operator draws (codec label ``mixed``).
    DI is computed on the dataset-mean series over cycles 1..n.
    """
    if isinstance(dataset, (str, Path)):
        dataset = [dataset]
    images, skipped = _load_dataset(dataset)
    operators = tuple(operators)
    codecs = tuple(codecs)
    jobs: list[tuple[str, str, CycleSpec, object]] = []
    common = dict(cycles=cycles, seed=seed, metrics=tuple(metrics),
                  clamp_between_cycles=clamp_between_cycles, quantize_between_cycles=quantize_between_cycles)
    if case == "same_method":
        for op in operators:
            for c in codecs:
                jobs.append((op.name, c.label, CycleSpec((op,), case=case, **common), c))
    elif case == "vary_method":
        for c in codecs:
            jobs.append(("random", c.label, CycleSpec(operators, case=case, **common), c))
    elif case == "vary_method_and_codec":
        jobs.append(("random", "mixed", CycleSpec(operators, case=case, codecs=codecs, **common), codecs[0]))
    else:
        raise ValueError(f"unknown case {case!r}")

    rows: list[dict] = []
    summary: list[SummaryRow] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for method, codec_label, spec, codec in jobs:
            tasks = [(data, name, codec, spec, i) for i, (name, data) in enumerate(images)]
            results = list(pool.map(_work, tasks)) if pool else [_work(t) for t in tasks]
            reports = []
            for name, rep in results:
                reports.append(rep)
                for metric, s in rep.series.items():
                    for cyc, v in enumerate(s.values):
                        rows.append({"image": Path(name).name, "method": method, "codec": rep.codec,
                                     "case": case, "cycle": cyc, "operator": rep.trace[cyc - 1] if cyc else "",
                                     "metric": metric, "value": v})
                if rep.error:
                    log.warning("%s: %s", name, rep.error)
            for metric in spec.metrics:
                mean, count = _mean_series(reports, metric, cycles + 1)
                di = _di_or_nan(mean[1:], HIGHER_IS_BETTER.get(metric, 1)) if cycles >= 2 else math.nan
                summary.append(SummaryRow(method, codec_label, case, metric, tuple(mean), di, count))
    finally:
        if pool:
            pool.shutdown()
    config = {"case": case, "cycles": cycles, "seed": seed, "metrics": list(metrics),
              "operators": [op.describe() for op in operators], "codecs": [c.label for c in codecs],
              "clamp_between_cycles": clamp_between_cycles, "quantize_between_cycles": quantize_between_cycles,
              "draw_rule": ("fixed" if case == "same_method" else
                            "without_replacement" if len(operators) >= cycles else "with_replacement"),
              "di_aggregation": "dataset_mean_series", "images": [Path(n).name for n, _ in images]}
    return ExperimentReport(rows, summary, config, skipped)


def default_workers() -> int:
    return os.cpu_count() or 1


# -- CSV output ---------------------------------------------------------------

ROW_FIELDS = ("image", "method", "codec", "case", "cycle", "operator", "metric", "value")


def fmt_value(v: float) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return repr(float(v))


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow([fmt_value(r[k]) if k == "value" else r[k] for k in ROW_FIELDS])
    return buf.getvalue()


def summary_csv(summary: list[SummaryRow]) -> str:
    n = max((len(s.series) for s in summary), default=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "codec", "case", "metric", "images", "DI"] + [f"Q{i}" for i in range(n)])
    for s in summary:
        w.writerow([s.method, s.codec, s.case, s.metric, s.images, fmt_value(s.di)]
                   + [fmt_value(v) for v in s.series])
    return buf.getvalue()


def cycle_report_csv(rep: DegradationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "operator"] + list(rep.series))
    n = max(len(s.values) for s in rep.series.values())
    for k in range(n):
        w.writerow([k, rep.trace[k - 1] if k else rep.codec]
                   + [fmt_value(s.values[k]) if k < len(s.values) else "" for s in rep.series.values()])
    w.writerow(["DI", ""] + [fmt_value(rep.di[m]) for m in rep.series])
    return buf.getvalue()


def write_experiment(report: ExperimentReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_path, sum_path = out / "cycles.csv", out / "summary.csv"
    rows_path.write_text(rows_csv(report.rows))
    sum_path.write_text(summary_csv(report.summary))
    return rows_path, sum_path


def read_summary(path: str | Path) -> list[SummaryRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for r in reader:
            qs = [float(r[k]) for k in reader.fieldnames if k.startswith("Q") and r[k] != ""]
            out.append(SummaryRow(r["method"], r["codec"], r["case"], r["metric"], tuple(qs),
                                  float(r["DI"]), int(r["images"])))
        return out


def render_table(summary: list[SummaryRow], metric: str | None = None) -> str:
    """Fixed-width DI table: one block per (case, metric), rows are codecs,
    columns are methods."""
    lines: list[str] = []
    blocks: dict[tuple[str, str], list[SummaryRow]] = {}
    for s in summary:
        if metric is None or s.metric == metric:
            blocks.setdefault((s.case, s.metric), []).append(s)
    for (case, met), rows in blocks.items():
        methods = list(dict.fromkeys(r.method for r in rows))
        codecs = list(dict.fromkeys(r.codec for r in rows))
        cell = {(r.codec, r.method): r.di for r in rows}
        width = max(10, *(len(m) + 2 for m in methods))
        lines.append(f"Case: {case} / Metric: {met.upper()} / DI (%)")
        lines.append("codec".ljust(16) + "".join(m.rjust(width) for m in methods))
        for c in codecs:
            vals = [cell.get((c, m)) for m in methods]
            lines.append(c.ljust(16) + "".join(("-" if v is None else f"{v:.2f}").rjust(width) for v in vals))
        avg = []
        for m in methods:
            v = [cell[(c, m)] for c in codecs if (c, m) in cell and math.isfinite(cell[(c, m)])]
            avg.append(f"{np.mean(v):.2f}" if v else "-")
        lines.append("Ave.".ljust(16) + "".join(a.rjust(width) for a in avg))
        lines.append("")
    return "\n".join(lines)
