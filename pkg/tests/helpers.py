"""Shared fixtures-as-functions for the test suite."""

import numpy as np

from chem_emu.kinetics.dataset import ChemDataset, NormMeta


def synthetic_dataset(n=8, n_in=3, n_out=3, T=11, seed=0, split="train", shared=True):
    """Small normalized dataset with smooth trajectories; no simulation needed."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-0.3, 0.6, size=(n, n_in))
    env = rng.uniform(-1, 1, size=(n, 3))
    t = np.arange(1, T + 1) / T
    rate = rng.uniform(0.2, 2.0, size=(n, 1, n_out))
    start = x0[:, None, :n_out] if n_out <= n_in else rng.uniform(-0.3, 0.6, size=(n, 1, n_out))
    traj = start * np.exp(-rate * t[None, :, None]) + 0.05 * env[:, None, :1]
    names_in = [f"S{i}" for i in range(n_in)]
    names_out = names_in[:n_out] if shared else [f"P{i}" for i in range(n_out)]
    meta = NormMeta(divisor=3.0, env_min=(270.0, 0.1, 0.0), env_max=(310.0, 0.9, 800.0), floor=1e-3, log_base=10.0)
    return ChemDataset(
        env.astype(np.float32).astype(float),
        x0.astype(np.float32).astype(float),
        traj.astype(np.float32).astype(float),
        meta,
        split=split,
        in_species=names_in,
        out_species=names_out,
    )
