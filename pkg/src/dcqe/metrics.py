"""Full-reference quality metrics, the Degradation Index and the drift measure."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .imageio import ImageBuffer

HIGHER_IS_BETTER = {"psnr": 1, "ssim": 1, "mse": -1, "mae": -1}


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, ImageBuffer) else np.asarray(x, dtype=np.float64)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = _samples(a), _samples(b)
    _check_same(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WIN = _gaussian_window()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid region only,
    averaged over the map and then over channels."""
    a, b = _samples(a), _samples(b)
    _check_same(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < len(_WIN):
        raise ValueError(f"image {a.shape[:2]} is smaller than the {len(_WIN)}x{len(_WIN)} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _filter_valid(x, _WIN), _filter_valid(y, _WIN)
        sxx = _filter_valid(x * x, _WIN) - mx * mx
        syy = _filter_valid(y * y, _WIN) - my * my
        sxy = _filter_valid(x * y, _WIN) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


METRICS = {"psnr": psnr, "ssim": ssim, "mse": mse}


@dataclass(frozen=True)
class MetricSeries:
    name: str
    values: tuple[float, ...]
    orientation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")

    @classmethod
    def for_metric(cls, name: str, values: Sequence[float]) -> "MetricSeries":
        return cls(name, tuple(values), HIGHER_IS_BETTER.get(name, 1))


def degradation_index(series: MetricSeries | Sequence[float], orientation: int | None = None) -> float:
    """Per-cycle relative quality loss in percent: m * ((Q1 - Qn)/Q1) / (n - 1) * 100.

    Positive means the series got worse under its orientation.
    """
    if isinstance(series, MetricSeries):
        values, m = series.values, series.orientation
    else:
        values, m = tuple(float(v) for v in series), 1
    if orientation is not None:
        m = orientation
    if m not in (1, -1):
        raise ValueError("orientation must be +1 or -1")
    n = len(values)
    if n < 2:
        raise ValueError(f"need at least 2 values, got {n}")
    q1, qn = values[0], values[-1]
    if q1 == 0:
        raise ValueError("Q1 is zero; degradation index is undefined")
    if not (math.isfinite(q1) and math.isfinite(qn)):
        raise ValueError("degradation index needs finite Q1 and Qn")
    return m * ((q1 - qn) / q1) / (n - 1) * 100.0


def drift(model, x, kind: str = "L1") -> float:
    """Distance between ``x`` and its one-step enhancement ``model(x)``.

    ``model`` maps an array (NCHW images, or N x d samples) to an array of the
    same shape.  ``x`` may be an ImageBuffer, a Tensor or an array.
    """
    from .training import distance  # shared loss code path

    if isinstance(x, ImageBuffer):
        arr = x.samples.transpose(2, 0, 1)[None]
    else:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = model(arr)
    out = out.data if isinstance(out, Tensor) else np.asarray(out)
    return distance(Tensor(out), Tensor(arr), kind).item()
