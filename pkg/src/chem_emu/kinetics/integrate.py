"""Backward-Euler integration of mass-action systems.

Each output interval is split into ``n`` equal substeps; each substep
solves c - c_prev - h f(c) = 0 by Newton's method with the analytic
Jacobian. The substep count doubles, and the backward-Euler results of
the successive levels feed a Richardson extrapolation table (the global
error of backward Euler has an expansion in powers of h). Doubling stops
once the best estimates of two successive levels agree. Every entry of
the table is a fixed linear combination of backward-Euler solutions, so
it keeps every linear invariant (atom totals) backward Euler keeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, IntegrationError
from .mechanism import Environment, Mechanism, rates, rhs_and_jacobian_batch

NEWTON_ATOL = 1e-10
NEWTON_RTOL = 1e-14  # roundoff floor for large (bulk) concentrations
NEWTON_MAX_ITER = 20
MAX_SUBSTEPS = 2**16
CLIP_FRACTION = 0.05


@dataclass
class FixedResult:
    traj: np.ndarray  # [B, n_outputs, S]
    converged: np.ndarray  # [B] Newton converged on every substep
    clipped_steps: np.ndarray  # [B] substeps where an iterate was clipped at zero
    n_steps: int


@dataclass
class BatchResult:
    traj: np.ndarray  # [B, n_outputs, S]; NaN rows for failed samples
    ok: np.ndarray  # [B]
    substeps: np.ndarray  # [B] substeps per output interval at acceptance
    errors: dict[int, str] = field(default_factory=dict)  # sample id -> reason


def output_times(t_end: float, n_outputs: int) -> np.ndarray:
    return t_end * np.arange(1, n_outputs + 1) / n_outputs


def _check(c0: np.ndarray, t_end: float, n_outputs: int) -> None:
    if not t_end > 0:
        raise ContractError(f"t_end must be > 0, got {t_end}")
    if n_outputs < 1:
        raise ContractError(f"n_outputs must be >= 1, got {n_outputs}")
    if np.any(c0 < 0) or not np.all(np.isfinite(c0)):
        raise ContractError("initial concentrations must be finite and non-negative")


def backward_euler(mech: Mechanism, k: np.ndarray, c0: np.ndarray, t_end: float, n_outputs: int, substeps: int) -> FixedResult:
    """Plain backward Euler with ``substeps`` steps per output interval, batched over rows of c0."""
    k = np.atleast_2d(np.asarray(k, dtype=float))
    c = np.atleast_2d(np.asarray(c0, dtype=float)).copy()
    B, S = c.shape
    h = t_end / (n_outputs * substeps)
    eye = np.eye(S)
    out = np.empty((B, n_outputs, S))
    converged = np.ones(B, dtype=bool)
    clipped = np.zeros(B, dtype=np.int64)
    for i in range(n_outputs):
        for _ in range(substeps):
            prev = c
            x = prev.copy()
            active = np.ones(B, dtype=bool)
            hit = np.zeros(B, dtype=bool)
            for _ in range(NEWTON_MAX_ITER):
                idx = np.flatnonzero(active)
                if idx.size == 0:
                    break
                f, J = rhs_and_jacobian_batch(mech, k[idx] if k.shape[0] > 1 else k, x[idx])
                g = x[idx] - prev[idx] - h * f
                delta = np.linalg.solve(eye - h * J, -g[..., None])[..., 0]
                new = x[idx] + delta
                neg = new < 0
                if neg.any():
                    hit[idx[neg.any(axis=1)]] = True
                    new = np.where(neg, 0.0, new)
                x[idx] = new
                done = np.all(np.abs(delta) <= NEWTON_ATOL + NEWTON_RTOL * np.abs(new), axis=1)
                active[idx[done]] = False
            converged &= ~active
            clipped += hit
            c = x
        out[:, i] = c
    return FixedResult(out, converged, clipped, n_outputs * substeps)


def _env_rates(mech: Mechanism, env) -> np.ndarray:
    if isinstance(env, Environment):
        return rates(mech, env)[None, :]
    env = np.atleast_2d(np.asarray(env, dtype=float))
    for row in env:
        Environment(*row)  # validation
    return rates(mech, env)


def integrate_fixed(mech: Mechanism, env, c0, t_end: float, n_outputs: int, substeps: int) -> np.ndarray:
    """Backward Euler at a fixed substep count, no refinement. Returns [n_outputs, S]."""
    c0 = np.asarray(c0, dtype=float)
    _check(c0, t_end, n_outputs)
    res = backward_euler(mech, _env_rates(mech, env), c0[None, :], t_end, n_outputs, substeps)
    if not res.converged[0]:
        raise IntegrationError(f"Newton did not converge with {substeps} substeps per interval")
    return res.traj[0]


def integrate_batch(
    mech: Mechanism,
    envs,
    c0s,
    t_end: float,
    n_outputs: int,
    rtol: float = 1e-6,
    atol: float = 1e-9,  # one millionth of the dataset floor
    start: int = 2,
    max_order: int = 8,
    max_substeps: int = MAX_SUBSTEPS,
    sample_ids=None,
) -> BatchResult:
    """Refined integration of many samples; converged samples leave the batch.

    ``max_substeps`` caps the total number of substeps over the whole
    trajectory. Samples that cannot meet the tolerance, keep failing
    Newton, or clip on more than 5% of their steps are marked failed.
    """
    c0s = np.atleast_2d(np.asarray(c0s, dtype=float))
    B, S = c0s.shape
    _check(c0s, t_end, n_outputs)
    k_all = _env_rates(mech, envs)
    if k_all.shape[0] == 1 and B > 1:
        k_all = np.repeat(k_all, B, axis=0)
    ids = list(range(B)) if sample_ids is None else list(sample_ids)

    traj = np.full((B, n_outputs, S), np.nan)
    ok = np.zeros(B, dtype=bool)
    used = np.zeros(B, dtype=np.int64)
    errors: dict[int, str] = {}

    pending = np.arange(B)
    # extrapolation table: row i holds T[i, 0..j]; column j removes the h^j error term
    row = [backward_euler(mech, k_all, c0s, t_end, n_outputs, start).traj]
    best_prev = None
    n = start
    while pending.size:
        n *= 2
        if n * n_outputs > max_substeps:
            for j in pending:
                errors[ids[j]] = f"no agreement within rel {rtol} at the {max_substeps}-substep cap"
            break
        res = backward_euler(mech, k_all[pending], c0s[pending], t_end, n_outputs, n)
        new_row = [res.traj]
        for j in range(1, min(len(row) + 1, max_order)):
            factor = 2.0**j - 1.0
            new_row.append(new_row[j - 1] + (new_row[j - 1] - row[j - 1]) / factor)
        best = new_row[-1]
        if best_prev is None:
            agree = np.zeros(pending.size, dtype=bool)
        else:
            agree = np.all(np.abs(best - best_prev) <= rtol * np.abs(best) + atol, axis=(1, 2))
        agree &= res.converged
        # clipping is judged at the accepted resolution; coarse levels may undershoot freely
        bad = agree & (res.clipped_steps > CLIP_FRACTION * res.n_steps)
        for local in np.flatnonzero(bad):
            errors[ids[pending[local]]] = (
                f"{int(res.clipped_steps[local])} of {res.n_steps} steps clipped negative concentrations"
            )
        done = agree & ~bad
        finished = pending[done]
        traj[finished] = np.maximum(best[done], 0.0)
        ok[finished] = True
        used[finished] = n
        keep = ~agree
        pending = pending[keep]
        row = [r[keep] for r in new_row]
        best_prev = best[keep]
    for j in np.flatnonzero(~ok):
        errors.setdefault(ids[j], "integration failed")
    return BatchResult(traj, ok, used, errors)


def integrate(mech: Mechanism, env, c0, t_end: float, n_outputs: int, sample_id=None, **kwargs) -> np.ndarray:
    """Trajectory [n_outputs, S] at t_end * i / n_outputs, i = 1..n_outputs."""
    res = integrate_batch(mech, env, np.asarray(c0, dtype=float)[None, :], t_end, n_outputs, sample_ids=[sample_id], **kwargs)
    if not res.ok[0]:
        raise IntegrationError(res.errors.get(sample_id, "integration failed"), sample_id)
    return res.traj[0]
