"""Training losses, evaluation metrics and per-(step, species) error statistics.

All losses are means of squared residuals over every element, computed in
the normalized log space the network predicts in. Time derivatives are
finite-difference stencils on the unit-spaced step grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

LOSS_NAMES = ("recon", "d1", "d2", "idn", "mass")


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    d1: float = 10.0
    d2: float = 10.0
    idn: float = 1.0
    mass: float = 0.001

    def __post_init__(self):
        for name, value in zip(LOSS_NAMES, astuple(self)):
            if not value >= 0.0:
                raise ConfigError(f"loss weight {name} must be non-negative, got {value}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(LOSS_NAMES, astuple(self)))


def _same_shape(pred: Tensor, truth: Tensor, what: str) -> None:
    if pred.shape != truth.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} and truth {truth.shape} differ")


def loss_recon(pred, truth) -> Tensor:
    pred, truth = tn.as_tensor(pred), tn.as_tensor(truth)
    _same_shape(pred, truth, "loss_recon")
    return tn.square(pred - truth).mean()


def time_derivative(x, order: int) -> Tensor:
    """Stencil derivative along axis 1 of ``x[B, T, N]``.

    Order 1: central differences inside, one-sided at both ends (length T).
    Order 2: x[t+1] - 2 x[t] + x[t-1] at interior points only (length T - 2).
    """
    x = tn.as_tensor(x)
    T = x.shape[1]
    if order == 1:
        if T < 2:
            raise ContractError(f"first-order derivative needs T >= 2, got {T}")
        if T == 2:
            d = x[:, 1:] - x[:, :1]
            return tn.concat([d, d], axis=1)
        start = x[:, 1:2] - x[:, 0:1]
        inner = tn.scale(x[:, 2:] - x[:, :-2], 0.5)
        end = x[:, -1:] - x[:, -2:-1]
        return tn.concat([start, inner, end], axis=1)
    if order == 2:
        if T < 3:
            raise ContractError(f"second-order derivative needs T >= 3, got {T}")
        return x[:, 2:] - tn.scale(x[:, 1:-1], 2.0) + x[:, :-2]
    raise ContractError(f"derivative order must be 1 or 2, got {order}")


def loss_derivative(pred, truth, order: int) -> Tensor:
    pred, truth = tn.as_tensor(pred), tn.as_tensor(truth)
    _same_shape(pred, truth, "loss_derivative")
    # the stencil is linear, so differentiate the residual once
    return tn.square(time_derivative(pred - truth, order)).mean()


def loss_mass(pred, truth) -> Tensor:
    """MSE between species-summed prediction and truth, per sample and step."""
    pred, truth = tn.as_tensor(pred), tn.as_tensor(truth)
    _same_shape(pred, truth, "loss_mass")
    return tn.square((pred - truth).sum(axis=-1)).mean()


def loss_identity(m, x0, k, shared: "SpeciesMap", initial_pred: Tensor | None = None) -> Tensor:
    """MSE between x0 and the model's t0 reconstruction on shared species.

    ``initial_pred`` may carry an already computed ``predict_initial`` to
    avoid a second forward pass.
    """
    if not len(shared):
        raise ConfigError("identity loss needs at least one species shared by input and output")
    x0 = tn.as_tensor(x0)
    recon = m.predict_initial(x0, k) if initial_pred is None else initial_pred
    return tn.square(recon[:, shared.out_idx] - x0[:, shared.in_idx]).mean()


@dataclass(frozen=True)
class SpeciesMap:
    """Positions of species present in both the input and the output set."""

    in_idx: tuple[int, ...]
    out_idx: tuple[int, ...]

    @classmethod
    def from_names(cls, inputs: Sequence[str], outputs: Sequence[str]) -> "SpeciesMap":
        pos = {name: i for i, name in enumerate(outputs)}
        pairs = [(i, pos[name]) for i, name in enumerate(inputs) if name in pos]
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def __len__(self) -> int:
        return len(self.in_idx)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def loss_total(components: dict[str, Tensor], w: LossWeights) -> LossBreakdown:
    """Weighted sum of the five terms; terms with zero weight are skipped."""
    weights = w.as_dict()
    total = None
    terms = {}
    for name in LOSS_NAMES:
        term = components.get(name)
        terms[name] = float(term.item()) if term is not None else 0.0
        if weights[name] == 0.0 or term is None:
            continue
        scaled = tn.scale(term, weights[name])
        total = scaled if total is None else total + scaled
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(total, terms)


def compute_losses(m, x0, k, truth, w: LossWeights, shared: SpeciesMap, t_grid=None) -> LossBreakdown:
    """One forward pass on [t0, t1..tT]; step tokens feed the trajectory losses."""
    out = m.forward(x0, k, t_grid)
    pred = out[:, 1:, :]
    comps = {}
    if w.recon > 0:
        comps["recon"] = loss_recon(pred, truth)
    if w.d1 > 0:
        comps["d1"] = loss_derivative(pred, truth, 1)
    if w.d2 > 0:
        comps["d2"] = loss_derivative(pred, truth, 2)
    if w.idn > 0:
        comps["idn"] = loss_identity(m, x0, k, shared, initial_pred=out[:, 0, :])
    if w.mass > 0:
        comps["mass"] = loss_mass(pred, truth)
    return loss_total(comps, w)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mbe: float


def metrics(pred, truth) -> Metrics:
    """Pooled MAE / RMSE / MBE over every element; error = pred - truth."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise DimensionError(f"metrics: prediction {pred.shape} and truth {truth.shape} differ")
    err = (pred - truth).reshape(-1)
    return Metrics(
        mae=float(np.mean(np.abs(err))),
        rmse=float(math.sqrt(np.mean(err * err))),
        mbe=float(np.mean(err)),
    )


# ---------------------------------------------------------------------------
# error statistics


@dataclass
class ErrorStats:
    mean: np.ndarray  # [T, n_out]
    variance: np.ndarray  # [T, n_out], population variance
    errors: np.ndarray | None = None  # [n_samples, T, n_out]

    def worst_species(self, k: int = 5, names: Sequence[str] | None = None) -> list[tuple[int, str, float]]:
        """Species ranked by RMS error over all steps (worst first)."""
        score = np.sqrt(np.mean(self.mean**2 + self.variance, axis=0))
        order = np.argsort(-score, kind="stable")[:k]
        label = (lambda i: names[i]) if names is not None else str
        return [(int(i), label(int(i)), float(score[i])) for i in order]

    def variance_by_step(self) -> np.ndarray:
        return self.variance.mean(axis=1)


def error_stats(pred_set, truth_set, keep_errors: bool = False) -> ErrorStats:
    pred, truth = np.asarray(pred_set, dtype=float), np.asarray(truth_set, dtype=float)
    if pred.shape != truth.shape:
        raise DimensionError(f"error_stats: prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise ContractError("error_stats needs a non-empty [n_samples, T, n_out] set")
    err = pred - truth
    mean = err.mean(axis=0)
    var = ((err - mean) ** 2).mean(axis=0)
    return ErrorStats(mean, var, err if keep_errors else None)


def export_error_stats(stats: ErrorStats, path, names: Sequence[str] | None = None) -> None:
    T, n = stats.mean.shape
    names = list(names) if names is not None else [f"s{i}" for i in range(n)]
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["species_index", "species_name", "t_index", "mean_err", "var_err"])
        for s in range(n):
            for t in range(T):
                writer.writerow([s, names[s], t + 1, repr(float(stats.mean[t, s])), repr(float(stats.variance[t, s]))])


def read_error_stats(path) -> tuple[ErrorStats, list[str]]:
    rows = list(csv.DictReader(open(Path(path), encoding="utf-8")))
    n = 1 + max(int(r["species_index"]) for r in rows)
    T = max(int(r["t_index"]) for r in rows)
    mean, var = np.zeros((T, n)), np.zeros((T, n))
    names = [""] * n
    for r in rows:
        s, t = int(r["species_index"]), int(r["t_index"]) - 1
        mean[t, s], var[t, s] = float(r["mean_err"]), float(r["var_err"])
        names[s] = r["species_name"]
    return ErrorStats(mean, var), names
