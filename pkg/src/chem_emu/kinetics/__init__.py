"""Synthetic ground truth: mass-action mechanisms, a stiff integrator and dataset assembly."""

from .dataset import (
    ChemDataset,
    ConcentrationGroup,
    Corpus,
    NormMeta,
    SamplingPlan,
    assemble,
    augment_roll,
    build_dataset,
    dataset_nbytes,
    demo_plan,
    plan_by_name,
    small_plan,
    denormalize,
    denormalize_env,
    normalize,
    normalize_env,
    read_dataset,
    simulate_plan,
    split_assignment,
    write_dataset,
)
from .integrate import backward_euler, integrate, integrate_batch, integrate_fixed, output_times
from .mechanism import (
    Environment,
    Mechanism,
    Reaction,
    demo_mechanism,
    demo_mechanism_nonstiff,
    load_mechanism,
    parse_mechanism,
    rates,
    rhs_and_jacobian,
    rhs_batch,
)

__all__ = [name for name in dir() if not name.startswith("_")]
