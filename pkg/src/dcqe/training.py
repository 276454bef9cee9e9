"""Domain-consistent (idempotent) training, plus the two reference baselines.

Each step runs four forward passes over the batch::

    I_E  = F(I_C)            I_RE = F(I_R)
    I_EE = F(I_E)            I_EE~ = F(stopgrad(I_E))

and combines enhancement, identity, idempotency and bounded compactness terms.
The frozen parameters of the idempotency/compactness terms are realized with
stop-gradient inside the current step, not a lagged copy.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor, stop_gradient
from .models import ModelParams, ModelSpec, forward, save_checkpoint
from .seeding import substream

log = logging.getLogger(__name__)

MODES = ("baseline", "straightforward", "domain_consistent")
DISTANCES = ("L1", "L2")
LOSS_COLUMNS = ("L_enh", "L_iden", "L_idem", "L_comp", "L_comp_tilde", "L_total")

# below this the tanh bound degenerates to min(L_comp, a*L_iden)
BOUND_EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_iden: float = 1e-2
    lambda_idem: float = 1e-2
    lambda_comp: float = 1e-3
    a: float = 1.5

    def __post_init__(self):
        for name in ("lambda_iden", "lambda_idem", "lambda_comp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")
        if not (math.isfinite(self.a) and self.a > 0):
            raise ValueError(f"a must be positive, got {self.a!r}")
        if self.lambda_comp > 0 and not self.lambda_comp * self.a < self.lambda_iden:
            raise ValueError(
                f"lambda_comp * a ({self.lambda_comp * self.a:g}) must stay below lambda_iden "
                f"({self.lambda_iden:g}) or the identity pressure turns negative")

    @classmethod
    def zero(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 1.5)


@dataclass(frozen=True)
class StraightforwardConfig:
    M: int = 2
    weights: tuple[float, ...] = (1.0, 0.01)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if len(self.weights) != self.M:
            raise ValueError(f"need {self.M} weights, got {len(self.weights)}")
        if any(w < 0 for w in self.weights):
            raise ValueError("cycle weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    iterations: int = 1000
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patch_size: int = 32
    seed: int = 0
    distance: str = "L1"
    mode: str = "domain_consistent"
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


# -- losses -------------------------------------------------------------------

def distance(a: Tensor, b: Tensor, kind: str = "L1") -> Tensor:
    if a.shape != b.shape:
        raise ad.ShapeError(f"distance: shapes {a.shape} and {b.shape} differ")
    diff = ad.sub(a, b)
    if kind == "L1":
        return ad.mean(ad.abs(diff))
    if kind == "L2":
        return ad.mean(ad.mul(diff, diff))
    raise ValueError(f"unknown distance {kind!r}")


class Passes(NamedTuple):
    I_E: Tensor
    I_RE: Tensor
    I_EE: Tensor
    I_EE_tilde: Tensor


class Losses(NamedTuple):
    L_enh: Tensor
    L_iden: Tensor
    L_idem: Tensor
    L_comp: Tensor
    L_comp_tilde: Tensor
    L_total: Tensor

    def record(self) -> dict[str, float]:
        return {k: v.item() for k, v in zip(LOSS_COLUMNS, self)}


Model = Callable[[Tensor], Tensor]


def forward_passes(model: Model, I_C: Tensor, I_R: Tensor) -> Passes:
    if I_C.shape != I_R.shape:
        raise ad.ShapeError(f"compressed {I_C.shape} and raw {I_R.shape} batches are not aligned")
    I_E = model(I_C)
    I_RE = model(I_R)
    I_EE = model(I_E)
    I_EE_tilde = model(stop_gradient(I_E))
    return Passes(I_E, I_RE, I_EE, I_EE_tilde)


def bounded_compactness(L_comp: Tensor, L_iden: Tensor, a: float) -> Tensor:
    """tanh(L_comp / (a L_iden)) * a L_iden, gradient through both factors."""
    bound = ad.scale(L_iden, a)
    if bound.item() < BOUND_EPS:
        return L_comp if L_comp.item() <= bound.item() else bound
    return ad.mul(ad.tanh(ad.div(L_comp, bound)), bound)


def losses(p: Passes, I_C: Tensor, I_R: Tensor, w: LossWeights, kind: str = "L1") -> Losses:
    L_enh = distance(p.I_E, I_R, kind)
    L_iden = distance(p.I_RE, I_R, kind)
    L_idem = distance(stop_gradient(p.I_EE), p.I_E, kind)
    L_comp = distance(p.I_EE_tilde, stop_gradient(p.I_E), kind)
    L_comp_tilde = bounded_compactness(L_comp, L_iden, w.a)
    L_total = ad.sub(
        ad.add(ad.add(L_enh, ad.scale(L_iden, w.lambda_iden)), ad.scale(L_idem, w.lambda_idem)),
        ad.scale(L_comp_tilde, w.lambda_comp))
    out = Losses(L_enh, L_iden, L_idem, L_comp, L_comp_tilde, L_total)
    for name, t in zip(LOSS_COLUMNS, out):
        if not np.isfinite(t.data).all():
            raise TrainingDiverged(f"{name} is not finite ({t.item()!r})")
    return out


def model_fn(params: ModelParams, spec: ModelSpec) -> Model:
    return lambda x: forward(params, spec, x)


# -- optimizers ---------------------------------------------------------------

@dataclass(eq=False)
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, tensors: list[Tensor], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(t.data) for t in tensors]
            self.v = [np.zeros_like(t.data) for t in tensors]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for t, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(eq=False)
class SGD:
    lr: float

    def step(self, tensors: list[Tensor], grads: list[np.ndarray]) -> None:
        for t, g in zip(tensors, grads):
            t.data -= self.lr * g


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)


def _apply_update(params: ModelParams, loss: Tensor, opt) -> None:
    grads = ad.backward(loss)
    tensors = params.tensors()
    gs = [ad.grad_of(grads, t) for t in tensors]
    for t, g in zip(tensors, gs):
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter of shape {t.shape}")
    opt.step(tensors, gs)


# -- steps --------------------------------------------------------------------

def evaluate_losses(params, spec, I_C: Tensor, I_R: Tensor, w: LossWeights, kind: str = "L1") -> dict[str, float]:
    """All six loss values without recording a tape."""
    f = model_fn(params, spec)
    return losses(forward_passes(f, I_C, I_R), I_C, I_R, w, kind).record()


def train_step(params: ModelParams, spec: ModelSpec, batch: tuple[Tensor, Tensor], cfg: TrainConfig,
               w: LossWeights, opt) -> dict[str, float]:
    """One update on the overall loss.  ``params`` is modified in place."""
    I_C, I_R = batch
    with GradientTape():
        out = losses(forward_passes(model_fn(params, spec), I_C, I_R), I_C, I_R, w, cfg.distance)
        _apply_update(params, out.L_total, opt)
    return out.record()


def baseline_step(params, spec, batch, cfg: TrainConfig, opt) -> dict[str, float]:
    """Enhancement loss only (single forward pass)."""
    I_C, I_R = batch
    with GradientTape():
        L_enh = distance(forward(params, spec, I_C), I_R, cfg.distance)
        if not np.isfinite(L_enh.data).all():
            raise TrainingDiverged("L_enh is not finite")
        _apply_update(params, L_enh, opt)
    return {"L_enh": L_enh.item(), "L_total": L_enh.item()}


def unrolled_loss(model: Model, I_C: Tensor, I_R: Tensor, sc: StraightforwardConfig, kind: str = "L1") -> Tensor:
    """sum_i w_i * D(F^i(I_C), I_R) with gradient through every application."""
    x = I_C
    total = None
    for wi in sc.weights:
        x = model(x)
        term = ad.scale(distance(x, I_R, kind), wi)
        total = term if total is None else ad.add(total, term)
    return total


def straightforward_step(params, spec, batch, cfg: TrainConfig, sc: StraightforwardConfig, opt) -> dict[str, float]:
    I_C, I_R = batch
    with GradientTape():
        loss = unrolled_loss(model_fn(params, spec), I_C, I_R, sc, cfg.distance)
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged("unrolled loss is not finite")
        _apply_update(params, loss, opt)
    return {"L_total": loss.item()}


# -- loop ---------------------------------------------------------------------

@dataclass(eq=False)
class PatchSet:
    """Aligned compressed/raw patch arrays, NCHW."""

    compressed: np.ndarray
    raw: np.ndarray

    def __post_init__(self):
        if self.compressed.shape != self.raw.shape or self.compressed.ndim != 4:
            raise ValueError(f"misaligned patch arrays {self.compressed.shape} vs {self.raw.shape}")
        if len(self.compressed) == 0:
            raise ValueError("empty patch set")

    def __len__(self) -> int:
        return len(self.compressed)

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[Tensor, Tensor]]:
        """Endless uniform draws with replacement."""
        rng = substream(seed, "data")
        while True:
            idx = rng.integers(0, len(self), size=batch_size)
            yield Tensor(self.compressed[idx]), Tensor(self.raw[idx])


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[dict[str, float]]
    iterations: int


class LossCSV:
    """Append-only loss curve writer."""

    header = ("iteration",) + LOSS_COLUMNS

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row["iteration"]] + [_fmt(row[c]) for c in LOSS_COLUMNS])


def _fmt(x: float) -> str:
    return repr(float(x))


def train_loop(params: ModelParams, spec: ModelSpec, data: PatchSet, cfg: TrainConfig,
               w: LossWeights | None = None, sc: StraightforwardConfig | None = None,
               out_dir: str | Path | None = None, start_iteration: int = 0,
               monitor: PatchSet | None = None) -> TrainResult:
    """Run ``cfg.iterations`` steps of the configured mode, logging every
    ``cfg.log_every`` steps.

    The logged losses are always the full six-term evaluation on a fixed
    monitor batch, so baseline and adapted runs are comparable.
    """
    w = w if w is not None else LossWeights()
    sc = sc if sc is not None else StraightforwardConfig()
    opt = make_optimizer(cfg)
    batches = data.batches(cfg.batch_size, cfg.seed)
    mon = monitor if monitor is not None else data
    mrng = substream(cfg.seed, "monitor")
    midx = mrng.choice(len(mon), size=min(len(mon), 4 * cfg.batch_size), replace=False)
    mon_c, mon_r = Tensor(mon.compressed[np.sort(midx)]), Tensor(mon.raw[np.sort(midx)])
    out = Path(out_dir) if out_dir is not None else None
    writer = LossCSV(out / "loss_curve.csv") if out is not None else None
    curve: list[dict[str, float]] = []

    def log_point(it: int) -> None:
        row = {"iteration": it, **evaluate_losses(params, spec, mon_c, mon_r, w, cfg.distance)}
        curve.append(row)
        if writer is not None:
            writer.append(row)
        log.debug("iter %d %s", it, row)

    end = start_iteration + cfg.iterations
    for it in range(start_iteration + 1, end + 1):
        batch = next(batches)
        if cfg.mode == "domain_consistent":
            train_step(params, spec, batch, cfg, w, opt)
        elif cfg.mode == "straightforward":
            straightforward_step(params, spec, batch, cfg, sc, opt)
        else:
            baseline_step(params, spec, batch, cfg, opt)
        if cfg.log_every and it % cfg.log_every == 0:
            log_point(it)
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it != end:
            save_checkpoint(out / f"checkpoint_{it:06d}.ckpt", spec, params, {"iteration": it})
    if not curve or curve[-1]["iteration"] != end:
        log_point(end)
    if out is not None:
        save_checkpoint(out / "model.ckpt", spec, params,
                        {"iteration": end, "mode": cfg.mode, "train": asdict(cfg), "weights": asdict(w)})
    return TrainResult(params, curve, end)
