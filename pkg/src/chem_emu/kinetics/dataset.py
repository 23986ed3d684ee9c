"""Sampling plans, corpus simulation, normalization, splits and the CNNE1 file format."""

from __future__ import annotations

import itertools
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractError, FormatError
from .integrate import integrate_batch, output_times
from .mechanism import Mechanism

FLOOR = 1e-3
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# sampling plan


@dataclass(frozen=True)
class ConcentrationGroup:
    """Species varied in tandem: ``levels[l][i]`` is the level-l value of ``species[i]``."""

    species: tuple[str, ...]
    levels: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        for lv in self.levels:
            if len(lv) != len(self.species):
                raise ConfigError(f"group {self.species}: level {lv} has the wrong length")
            if any(v < 0 for v in lv):
                raise ConfigError(f"group {self.species}: negative concentration level")


@dataclass(frozen=True)
class SamplingPlan:
    groups: tuple[ConcentrationGroup, ...]
    env_levels: tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]
    background: tuple[tuple[str, float], ...] = ()
    reservoirs: tuple[str, ...] = ()  # bulk carriers never used as inputs or outputs
    t_end: float = 55.0  # minutes
    n_steps: int = 11
    floor: float = FLOOR
    significance: float = 1.0  # task-2 threshold on the 90th-percentile peak
    jitter: float = 0.0  # optional log-normal spread of concentration levels

    @property
    def precursors(self) -> list[str]:
        return [s for g in self.groups for s in g.species]

    @property
    def n_samples(self) -> int:
        n = 1
        for g in self.groups:
            n *= len(g.levels)
        for lv in self.env_levels:
            n *= len(lv)
        return n

    def validate(self, mech: Mechanism) -> None:
        known = set(mech.species)
        names = self.precursors + [s for s, _ in self.background] + list(self.reservoirs)
        for s in names:
            if s not in known:
                raise ConfigError(f"sampling plan names unknown species {s!r}")
        if len(set(self.precursors)) != len(self.precursors):
            raise ConfigError("a species appears in more than one concentration group")
        if len(self.env_levels) != 3 or any(len(lv) == 0 for lv in self.env_levels):
            raise ConfigError("env_levels needs at least one level for each of the three channels")
        if self.n_steps < 3 or not self.t_end > 0:
            raise ConfigError("need n_steps >= 3 and t_end > 0")

    def grid(self, mech: Mechanism, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Initial states [N, S] and environments [N, 3] in sample-index order."""
        self.validate(mech)
        base = np.zeros(mech.n_species)
        for s, v in self.background:
            base[mech.index[s]] = v
        combos = itertools.product(*[range(len(g.levels)) for g in self.groups], *self.env_levels)
        c0, env = [], []
        ng = len(self.groups)
        for combo in combos:
            c = base.copy()
            for g, li in zip(self.groups, combo[:ng]):
                for s, v in zip(g.species, g.levels[li]):
                    c[mech.index[s]] = v
            c0.append(c)
            env.append(combo[ng:])
        c0, env = np.array(c0), np.array(env, dtype=float)
        if self.jitter > 0:
            if rng is None:
                raise ContractError("a jittered plan needs an rng")
            idx = [mech.index[s] for s in self.precursors]
            c0[:, idx] *= np.exp(self.jitter * rng.standard_normal((len(c0), len(idx))))
        return c0, env


def demo_plan(**overrides) -> SamplingPlan:
    """Three tandem groups at two levels and three environment channels at three levels (216 samples)."""
    plan = SamplingPlan(
        groups=(
            ConcentrationGroup(("NO", "NO2"), ((1.0, 2.0), (20.0, 40.0))),
            ConcentrationGroup(("CO", "CH4"), ((100.0, 1800.0), (400.0, 2200.0))),
            ConcentrationGroup(("O3", "SO2"), ((20.0, 0.5), (80.0, 10.0))),
        ),
        env_levels=((278.0, 293.0, 308.0), (0.2, 0.55, 0.9), (0.0, 400.0, 800.0)),
        background=(("O2", 2.0e5), ("H2O", 2.0e4), ("HCHO", 1.0), ("H2O2", 1.0), ("HNO3", 0.5)),
        reservoirs=("O2", "H2O"),
    )
    return replace(plan, **overrides)


def small_plan(**overrides) -> SamplingPlan:
    """The demo groups with two environment levels per channel (64 samples)."""
    base = demo_plan(env_levels=((278.0, 308.0), (0.2, 0.9), (0.0, 800.0)))
    return replace(base, **overrides)


PLANS = {"demo": demo_plan, "small": small_plan}


def plan_by_name(name: str, **overrides) -> SamplingPlan:
    if name not in PLANS:
        raise ConfigError(f"unknown sampling plan {name!r}; choose from {', '.join(PLANS)}")
    return PLANS[name](**overrides)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormMeta:
    divisor: float
    env_min: tuple[float, ...]
    env_max: tuple[float, ...]
    floor: float = FLOOR
    log_base: float = 10.0

    def to_dict(self) -> dict:
        return {
            "log_base": self.log_base,
            "divisor": self.divisor,
            "floor": self.floor,
            "env_min": list(self.env_min),
            "env_max": list(self.env_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormMeta":
        return cls(float(d["divisor"]), tuple(d["env_min"]), tuple(d["env_max"]), float(d["floor"]), float(d["log_base"]))

    @classmethod
    def fit(cls, values: np.ndarray, env: np.ndarray, floor: float = FLOOR) -> "NormMeta":
        logs = np.log10(np.maximum(np.asarray(values, dtype=float), floor))
        D = float(np.max(np.abs(logs)))
        if D == 0.0:
            D = 1.0
        env = np.atleast_2d(env)
        return cls(D, tuple(env.min(axis=0).tolist()), tuple(env.max(axis=0).tolist()), floor)


def _need(meta) -> NormMeta:
    if meta is None:
        raise ContractError("normalization metadata is required")
    return meta


def normalize(v_raw, meta: NormMeta) -> np.ndarray:
    meta = _need(meta)
    v = np.maximum(np.asarray(v_raw, dtype=float), meta.floor)
    return np.log(v) / np.log(meta.log_base) / meta.divisor


def denormalize(v_norm, meta: NormMeta) -> np.ndarray:
    meta = _need(meta)
    return np.power(meta.log_base, np.asarray(v_norm, dtype=float) * meta.divisor)


def normalize_env(env, meta: NormMeta) -> np.ndarray:
    meta = _need(meta)
    lo, hi = np.array(meta.env_min), np.array(meta.env_max)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = 2.0 * (np.asarray(env, dtype=float) - lo) / span - 1.0
    return np.where(hi > lo, out, 0.0)


def denormalize_env(env_norm, meta: NormMeta) -> np.ndarray:
    meta = _need(meta)
    lo, hi = np.array(meta.env_min), np.array(meta.env_max)
    return lo + (np.asarray(env_norm, dtype=float) + 1.0) * 0.5 * (hi - lo)


# ---------------------------------------------------------------------------
# augmentation


def augment_roll(traj, tau: int, rng=None):
    """Cyclic shift along the time axis (axis -2): out[t] = traj[(t + tau) mod T].

    ``tau=None`` draws it uniformly from ``rng``.
    """
    traj = np.asarray(traj)
    if traj.ndim < 2:
        raise ContractError(f"augment_roll expects [..., T, n_out], got shape {traj.shape}")
    T = traj.shape[-2]
    if tau is None:
        if rng is None:
            raise ContractError("augment_roll needs tau or an rng")
        tau = int(rng.integers(T))
    if not 0 <= tau < T:
        raise ContractError(f"roll shift must satisfy 0 <= tau < {T}, got {tau}")
    return np.roll(traj, -tau, axis=-2)


def rolled_positions(T: int, tau: int) -> np.ndarray:
    """Source index of every output position after ``augment_roll`` by ``tau``."""
    return (np.arange(T) + tau) % T


# ---------------------------------------------------------------------------
# splits


def splitmix64(x: int) -> int:
    mask = (1 << 64) - 1
    z = (x + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def split_assignment(n: int, val_frac: float = 0.2, test_frac: float = 0.2) -> dict[str, np.ndarray]:
    """Deterministic split of indices 0..n-1 by hash rank; each part sorted by index."""
    order = sorted(range(n), key=lambda i: (splitmix64(i), i))
    n_val, n_test = int(round(val_frac * n)), int(round(test_frac * n))
    parts = {"val": order[:n_val], "test": order[n_val : n_val + n_test], "train": order[n_val + n_test :]}
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ChemDataset:
    env: np.ndarray  # [n, 3] normalized
    x0: np.ndarray  # [n, n_in] normalized
    traj: np.ndarray  # [n, T, n_out] normalized
    meta: NormMeta | None
    split: str = "train"
    task: int = 1
    in_species: list[str] = field(default_factory=list)
    out_species: list[str] = field(default_factory=list)
    sample_ids: np.ndarray | None = None
    t_end: float = 55.0

    def __post_init__(self):
        n = self.env.shape[0]
        if self.x0.shape[0] != n or self.traj.shape[0] != n or self.traj.ndim != 3:
            raise ContractError(f"inconsistent sample counts: env {self.env.shape}, x0 {self.x0.shape}, traj {self.traj.shape}")
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return self.env.shape[0]

    def __len__(self) -> int:
        return self.env.shape[0]

    @property
    def n_in(self) -> int:
        return self.x0.shape[1]

    @property
    def n_out(self) -> int:
        return self.traj.shape[2]

    @property
    def n_steps(self) -> int:
        return self.traj.shape[1]

    def times(self) -> np.ndarray:
        return output_times(self.t_end, self.n_steps)

    def subset(self, idx) -> "ChemDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, env=self.env[idx], x0=self.x0[idx], traj=self.traj[idx], sample_ids=self.sample_ids[idx])

    def descriptor(self) -> dict:
        return {
            "norm": self.meta.to_dict() if self.meta is not None else None,
            "split": self.split,
            "task": self.task,
            "in_species": list(self.in_species),
            "out_species": list(self.out_species),
            "sample_ids": [int(i) for i in self.sample_ids],
            "t_end": self.t_end,
        }


@dataclass
class Corpus:
    """Raw simulation output for a whole sampling plan."""

    species: list[str]
    c0: np.ndarray  # [N, S]
    env: np.ndarray  # [N, 3]
    traj: np.ndarray  # [N, T, S]; NaN for failed samples
    ok: np.ndarray  # [N]
    errors: dict[int, str]
    plan: SamplingPlan

    def peaks(self) -> np.ndarray:
        """Per-sample peak concentration [N_ok, S] over t0..tT."""
        good = self.ok
        return np.maximum(self.c0[good], self.traj[good].max(axis=1))


def _simulate_chunk(args):
    mech, env, c0, t_end, n_steps, ids = args
    res = integrate_batch(mech, env, c0, t_end, n_steps, sample_ids=ids)
    return res.traj, res.ok, res.errors


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("CHEM_EMU_THREADS")
    n = requested if requested is not None else 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"CHEM_EMU_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def simulate_plan(mech: Mechanism, plan: SamplingPlan, rng=None, workers: int | None = None, chunk: int = 64) -> Corpus:
    """Integrate every grid point. Results are ordered by sample index whatever the worker count."""
    c0, env = plan.grid(mech, rng)
    N = len(c0)
    starts = range(0, N, chunk)
    jobs = [(mech, env[s : s + chunk], c0[s : s + chunk], plan.t_end, plan.n_steps, list(range(s, min(s + chunk, N)))) for s in starts]
    n_workers = worker_count(workers)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_simulate_chunk, jobs))
    else:
        results = [_simulate_chunk(j) for j in jobs]
    traj = np.concatenate([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    errors: dict[int, str] = {}
    for r in results:
        errors.update(r[2])
    return Corpus(list(mech.species), c0, env, traj, ok, errors, plan)


def select_species(corpus: Corpus, task: int) -> tuple[list[str], list[str]]:
    """(input species, output species) for a task.

    Task 1 predicts its own inputs. Task 2 predicts the significant species:
    those whose 90th-percentile per-sample peak reaches ``plan.significance``.
    Task 3 predicts the generated complement: every non-input species that
    starts at zero and whose 90th-percentile peak rises above the floor.
    """
    plan = corpus.plan
    inputs = plan.precursors
    if task == 1:
        return inputs, list(inputs)
    score = np.percentile(corpus.peaks(), 90, axis=0)
    candidates = [i for i, s in enumerate(corpus.species) if s not in plan.reservoirs]
    if task == 2:
        out = [corpus.species[i] for i in candidates if score[i] >= plan.significance]
    elif task == 3:
        background = {s for s, v in plan.background if v > 0}
        out = [
            corpus.species[i]
            for i in candidates
            if corpus.species[i] not in inputs and corpus.species[i] not in background and score[i] > plan.floor
        ]
    else:
        raise ConfigError(f"task must be 1, 2 or 3, got {task}")
    if not out:
        raise ConfigError(f"task {task} selects no output species; adjust the significance threshold")
    return inputs, out


def f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision, keep float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def assemble(corpus: Corpus, task: int, val_frac: float = 0.2, test_frac: float = 0.2) -> dict[str, ChemDataset]:
    inputs, outputs = select_species(corpus, task)
    idx = {s: i for i, s in enumerate(corpus.species)}
    in_idx = [idx[s] for s in inputs]
    out_idx = [idx[s] for s in outputs]
    good = corpus.ok
    used = np.concatenate([corpus.c0[good][:, in_idx].ravel(), corpus.traj[good][:, :, out_idx].ravel()])
    meta = NormMeta.fit(used, corpus.env, corpus.plan.floor)
    env_n = f32(normalize_env(corpus.env, meta))
    x0_n = f32(normalize(corpus.c0[:, in_idx], meta))
    traj_n = f32(normalize(np.nan_to_num(corpus.traj[:, :, out_idx], nan=1.0), meta))
    parts = split_assignment(len(corpus.c0), val_frac, test_frac)
    out = {}
    for name in SPLITS:
        keep = parts[name][good[parts[name]]]
        out[name] = ChemDataset(
            env_n[keep], x0_n[keep], traj_n[keep], meta, name, task, list(inputs), list(outputs), keep, corpus.plan.t_end
        )
    return out


def build_dataset(mech: Mechanism, plan: SamplingPlan, task: int, rng=None, workers: int | None = None):
    """Simulate the plan and return ({split: ChemDataset}, corpus)."""
    corpus = simulate_plan(mech, plan, rng, workers)
    return assemble(corpus, task), corpus


# ---------------------------------------------------------------------------
# CNNE1 binary format

MAGIC = b"CNNE"
VERSION = 1
HEADER = struct.Struct("<4s7I")
FLAG_META = 1


def write_dataset(ds: ChemDataset, path, include_meta: bool = True) -> None:
    """Little-endian CNNE1 file. Without ``include_meta`` the file is header + payload only."""
    n, T, n_out = ds.traj.shape
    flags = FLAG_META if include_meta else 0
    parts = [HEADER.pack(MAGIC, VERSION, n, ds.env.shape[1], ds.n_in, n_out, T, flags)]
    if include_meta:
        blob = json.dumps(ds.descriptor(), sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    rows = np.concatenate([ds.env, ds.x0, ds.traj.reshape(n, T * n_out)], axis=1)
    parts.append(rows.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> ChemDataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"file holds {len(raw)} bytes, shorter than the {HEADER.size}-byte header", len(raw))
    magic, version, n, n_env, n_in, n_out, T, flags = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = HEADER.size
    desc: dict = {}
    if flags & FLAG_META:
        if len(raw) < pos + 4:
            raise FormatError("truncated before the metadata length", pos)
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if len(raw) < pos + length:
            raise FormatError(f"metadata block needs {length} bytes, {len(raw) - pos} present", pos)
        try:
            desc = json.loads(raw[pos : pos + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable metadata block: {exc}", pos) from None
        pos += length
    width = n_env + n_in + T * n_out
    expected = pos + 4 * n * width
    if len(raw) != expected:
        raise FormatError(f"expected {expected} bytes in total, file has {len(raw)}", min(len(raw), expected))
    rows = np.frombuffer(raw, dtype="<f4", count=n * width, offset=pos).astype(np.float64).reshape(n, width)
    env = rows[:, :n_env]
    x0 = rows[:, n_env : n_env + n_in]
    traj = rows[:, n_env + n_in :].reshape(n, T, n_out)
    meta = NormMeta.from_dict(desc["norm"]) if desc.get("norm") else None
    ids = np.array(desc["sample_ids"], dtype=np.int64) if "sample_ids" in desc else None
    return ChemDataset(
        env.copy(),
        x0.copy(),
        traj.copy(),
        meta,
        desc.get("split", "train"),
        int(desc.get("task", 1)),
        list(desc.get("in_species", [])),
        list(desc.get("out_species", [])),
        ids,
        float(desc.get("t_end", 55.0)),
    )


def dataset_nbytes(n_samples: int, n_env: int, n_in: int, n_steps: int, n_out: int) -> int:
    """Size of a CNNE1 file written without the metadata block."""
    return HEADER.size + 4 * n_samples * (n_env + n_in + n_steps * n_out)

