"""Two-dimensional toy version of domain-consistent training.

A Gaussian mixture plays the natural domain; adding isotropic noise to its
samples gives the "compressed" domain.  A small MLP is trained with exactly
the same loss code as the image models, and the result is judged by energy
distance to the target and by its drift profile on and off the target.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor
from .seeding import substream
from .training import Adam, LossWeights, TrainConfig, TrainingDiverged, forward_passes, losses


@dataclass(frozen=True)
class ToyDistribution:
    means: tuple[tuple[float, float], ...]
    covariances: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        k = len(self.means)
        if not (len(self.covariances) == len(self.weights) == k) or k == 0:
            raise ValueError("means, covariances and weights must have equal non-zero length")
        if not math.isclose(sum(self.weights), 1.0, abs_tol=1e-12) or min(self.weights) < 0:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        for c in self.covariances:
            if np.any(np.linalg.eigvalsh(np.asarray(c, dtype=float)) <= 0):
                raise ValueError(f"covariance {c} is not positive definite")

    @classmethod
    def ring(cls, components: int = 3, radius: float = 1.0, std: float = 0.08) -> "ToyDistribution":
        if not 2 <= components <= 4:
            raise ValueError("use 2 to 4 components")
        ang = 2 * np.pi * np.arange(components) / components
        means = tuple((float(radius * np.cos(t)), float(radius * np.sin(t))) for t in ang)
        cov = ((std * std, 0.0), (0.0, std * std))
        return cls(means, (cov,) * components, (1.0 / components,) * components)

    @property
    def spread(self) -> float:
        """Mean distance of the component means from their centroid."""
        m = np.asarray(self.means)
        return float(np.mean(np.linalg.norm(m - m.mean(axis=0), axis=1)))

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=count, p=np.asarray(self.weights))
        out = np.empty((count, 2))
        for k in range(len(self.weights)):
            idx = np.flatnonzero(comp == k)
            out[idx] = rng.multivariate_normal(self.means[k], self.covariances[k], size=len(idx))
        return out


def sample_pair(dist: ToyDistribution, sigma: float, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Target samples ``x`` and corrupted copies ``z = x + N(0, sigma^2 I)``."""
    if sigma < 0 or count < 1:
        raise ValueError("need sigma >= 0 and count >= 1")
    x = dist.sample(count, substream(seed, "toy-target"))
    if sigma == 0:
        return x, x.copy()
    z = x + sigma * substream(seed, "toy-noise").standard_normal(x.shape)
    return x, z


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E|A-B| - E|A-A'| - E|B-B'| over all pairs (V-statistic, Euclidean).

    Sums are exactly rounded, so the value does not depend on sample order.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    def mean_dist(p, q):
        d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=-1))
        return math.fsum(d.ravel()) / d.size

    val = 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    return max(0.0, val)


# -- model --------------------------------------------------------------------

@dataclass(eq=False)
class ToyModel:
    layers: list[tuple[Tensor, Tensor]]
    residual: bool = True

    @classmethod
    def init(cls, hidden: int = 32, seed: int = 0, residual: bool = True) -> "ToyModel":
        if not 1 <= hidden <= 64:
            raise ValueError("hidden width must be in 1..64")
        rng = substream(seed, "toy-init")
        dims = [2, hidden, hidden, 2]
        layers = []
        for i in range(3):
            w = rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i]))
            if i == 2 and residual:
                w *= 0.1
            layers.append((Tensor(w, True), Tensor(np.zeros(dims[i + 1]), True)))
        return cls(layers, residual)

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = ad.linear(h, w, b)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return ad.add(x, h) if self.residual else h

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self(Tensor(x)).data

    def point_drift(self, x: np.ndarray) -> np.ndarray:
        """Per-sample mean absolute displacement |f(x) - x| (L1 over coordinates)."""
        return np.mean(np.abs(self.apply(x) - x), axis=1)


@dataclass
class ToyConfig:
    hidden: int = 32
    sigma_ratio: float = 0.3
    train_samples: int = 2000
    eval_samples: int = 1000
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-3, batch_size=128, iterations=3000, patch_size=1, log_every=500))

    @property
    def seed(self) -> int:
        return self.train.seed


@dataclass
class ToyResult:
    model: ToyModel
    curve: list[dict]
    energy_generated: float
    energy_corrupted: float
    drift_target: float
    drift_corrupted: float
    samples: dict[str, np.ndarray]

    def diagnostics(self) -> dict[str, float]:
        return {"energy_generated": self.energy_generated, "energy_corrupted": self.energy_corrupted,
                "drift_target": self.drift_target, "drift_corrupted": self.drift_corrupted}


def toy_losses(model: ToyModel, z: Tensor, x: Tensor, w: LossWeights, kind: str = "L1"):
    """Same loss path as the image trainer, applied to point batches."""
    return losses(forward_passes(model, z, x), z, x, w, kind)


def train_toy(dist: ToyDistribution, cfg: ToyConfig | None = None, w: LossWeights | None = None) -> ToyResult:
    cfg = cfg or ToyConfig()
    w = w if w is not None else LossWeights()
    tc = cfg.train
    sigma = cfg.sigma_ratio * dist.spread
    x_tr, z_tr = sample_pair(dist, sigma, cfg.train_samples, tc.seed)
    x_ev, z_ev = sample_pair(dist, sigma, cfg.eval_samples, tc.seed + 1)
    model = ToyModel.init(cfg.hidden, tc.seed)
    opt = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.epsilon)
    rng = substream(tc.seed, "data")
    curve = []
    for it in range(1, tc.iterations + 1):
        idx = rng.integers(0, len(x_tr), size=tc.batch_size)
        with GradientTape():
            out = toy_losses(model, Tensor(z_tr[idx]), Tensor(x_tr[idx]), w, tc.distance)
            grads = ad.backward(out.L_total)
        gs = [ad.grad_of(grads, t) for t in model.tensors()]
        if not all(np.isfinite(g).all() for g in gs):
            raise TrainingDiverged(f"non-finite toy gradient at iteration {it}")
        opt.step(model.tensors(), gs)
        if tc.log_every and (it % tc.log_every == 0 or it == tc.iterations):
            curve.append({"iteration": it, **out.record()})
    gen = model.apply(z_ev)
    return ToyResult(
        model, curve,
        energy_generated=energy_distance(gen, x_ev),
        energy_corrupted=energy_distance(z_ev, x_ev),
        drift_target=float(model.point_drift(x_ev).mean()),
        drift_corrupted=float(model.point_drift(z_ev).mean()),
        samples={"target": x_ev, "corrupted": z_ev, "generated": gen},
    )


def write_toy_outputs(result: ToyResult, out_dir: str | Path, grid: int = 41, extent: float = 2.0) -> None:
    """Sample clouds and a drift profile on a square grid, as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "toy_samples.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["set", "x", "y", "drift"])
        for name, pts in result.samples.items():
            d = result.model.point_drift(pts)
            for (px, py), dv in zip(pts, d):
                wr.writerow([name, repr(float(px)), repr(float(py)), repr(float(dv))])
    axis = np.linspace(-extent, extent, grid)
    gx, gy = np.meshgrid(axis, axis)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d = result.model.point_drift(pts)
    with (out / "toy_drift_grid.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "drift"])
        for (px, py), dv in zip(pts, d):
            wr.writerow([repr(float(px)), repr(float(py)), repr(float(dv))])
    with (out / "toy_diagnostics.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["quantity", "value"])
        for k, v in result.diagnostics().items():
            wr.writerow([k, repr(float(v))])
    with (out / "toy_loss_curve.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        cols = ["iteration", "L_enh", "L_iden", "L_idem", "L_comp", "L_comp_tilde", "L_total"]
        wr.writerow(cols)
        for row in result.curve:
            wr.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])
