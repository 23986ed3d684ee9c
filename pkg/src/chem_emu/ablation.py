"""Component and loss-term ablation grids with a matched training budget."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .kinetics.dataset import ChemDataset
from .model import ChemNNEModel, ModelConfig, build
from .objective import LossWeights
from .train import Schedule, evaluate, train_loop

# (label, use_attn, use_time_emb, use_inr, use_fno); the plain autoencoder is the baseline row
COMPONENT_GRID = (
    ("AE", False, False, False, False),
    ("AE+Attn", True, False, False, False),
    ("AE+Time", False, True, False, False),
    ("AE+INR", False, False, True, False),
    ("AE+FNO", False, False, False, True),
    ("AE+Attn+Time", True, True, False, False),
    ("AE+Attn+Time+INR", True, True, True, False),
    ("Full", True, True, True, True),
)

# (label, recon, d1, d2, idn, mass)
LOSS_GRID = (
    ("MSE", 1.0, 0.0, 0.0, 0.0, 0.0),
    ("MSE+Derivs", 1.0, 10.0, 10.0, 0.0, 0.0),
    ("MSE+Derivs+Idn", 1.0, 10.0, 10.0, 1.0, 0.0),
    ("MSE+Derivs+Mass", 1.0, 10.0, 10.0, 0.0, 0.001),
    ("MSE+Derivs+Idn+Mass", 1.0, 10.0, 10.0, 1.0, 0.001),
)

GRIDS = ("components", "losses")


@dataclass
class AblationRow:
    index: int
    label: str
    val_rmse: float
    val_mae: float
    val_mbe: float
    rank: int = 0
    model: ChemNNEModel | None = field(default=None, repr=False, compare=False)


def grid_rows(grid: str, base: ModelConfig, weights: LossWeights) -> list[tuple[str, ModelConfig, LossWeights]]:
    if grid == "components":
        return [
            (label, replace(base, use_attn=a, use_time_emb=t, use_inr=i, use_fno=f), weights)
            for label, a, t, i, f in COMPONENT_GRID
        ]
    if grid == "losses":
        return [(label, base, LossWeights(*w)) for label, *w in LOSS_GRID]
    raise ValueError(f"unknown grid {grid!r}; choose from {', '.join(GRIDS)}")


def run_ablation(
    grid: str,
    base: ModelConfig,
    weights: LossWeights,
    schedule: Schedule,
    train: ChemDataset,
    val: ChemDataset,
    log=None,
    cache: dict | None = None,
) -> list[AblationRow]:
    """Train every row with the same seed and budget; rank by validation RMSE (1 = best).

    Training is deterministic, so a shared ``cache`` lets rows that repeat
    across grids (the full model with all losses) train once.
    """
    rows = []
    for index, (label, cfg, w) in enumerate(grid_rows(grid, base, weights)):
        key = (repr(cfg), repr(w), repr(schedule), id(train), id(val))
        if cache is not None and key in cache:
            model, mt = cache[key]
        else:
            model = build(cfg, schedule.seed)
            train_loop(model, train, w, schedule, val=None)
            mt = evaluate(model, val)
            if cache is not None:
                cache[key] = (model, mt)
        rows.append(AblationRow(index, label, mt.rmse, mt.mae, mt.mbe, model=model))
        if log:
            log(f"{label}: val RMSE {mt.rmse:.5f}")
    for rank, row in enumerate(sorted(rows, key=lambda r: (r.val_rmse, r.index)), start=1):
        row.rank = rank
    return rows
