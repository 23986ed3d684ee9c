"""Adam, the training loop and CNCK checkpoints."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, FormatError, TrainingAborted
from .kinetics.dataset import ChemDataset, rolled_positions
from .model import ChemNNEModel, ModelConfig, build, standard_grid
from .objective import LossWeights, SpeciesMap, compute_losses, metrics

HISTORY_COLUMNS = (
    "iter",
    "loss_total",
    "loss_recon",
    "loss_d1",
    "loss_d2",
    "loss_idn",
    "loss_mass",
    "val_rmse",
    "val_mae",
    "val_mbe",
)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, tn.Tensor], lr: float = 1e-3) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
            lr,
        )


def adam_step(params: dict[str, tn.Tensor], grads: dict[str, np.ndarray] | None, st: AdamState) -> AdamState:
    """One bias-corrected Adam update in place. ``grads=None`` reads ``p.grad``."""
    if grads is None:
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
    if set(grads) != set(params) or set(st.m) != set(params):
        raise DimensionError("parameter, gradient and optimizer-state names differ")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1**st.step
    c2 = 1.0 - b2**st.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m, v = st.m[name], st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
    return st


def clip_gradients(params: dict[str, tn.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; return the norm before."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


# ---------------------------------------------------------------------------
# checkpoints

CK_MAGIC = b"CNCK"
CK_VERSION = 1
_F64 = 0x80  # rank-byte flag: payload is float64 instead of float32
_ALWAYS_F64 = ("rng/", "history/")


@dataclass
class Checkpoint:
    config: dict  # {"model": ModelConfig dict, plus any run metadata}
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_state: dict | None = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    version: int = CK_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def model(self) -> ChemNNEModel:
        m = build(self.model_config, 0)
        m.load_parameters(self.params)
        return m


def _rng_words(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise ConfigError(f"only PCG64 generator state can be stored, got {state.get('bit_generator')}")
    words = []
    for big in (state["state"]["state"], state["state"]["inc"]):
        words += [(big >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [state["has_uint32"], state["uinteger"]]
    return np.array(words, dtype=np.float64)


def _rng_state(words: np.ndarray) -> dict:
    w = [int(x) for x in words]
    join = lambda part: sum(v << (32 * i) for i, v in enumerate(part))  # noqa: E731
    return {
        "bit_generator": "PCG64",
        "state": {"state": join(w[0:4]), "inc": join(w[4:8])},
        "has_uint32": w[8],
        "uinteger": w[9],
    }


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.adam is not None:
        out += [(f"adam/m/{k}", v) for k, v in ckpt.adam.m.items()]
        out += [(f"adam/v/{k}", v) for k, v in ckpt.adam.v.items()]
    if ckpt.rng_state is not None:
        out.append(("rng/pcg64", _rng_words(ckpt.rng_state)))
    if ckpt.history:
        for col in HISTORY_COLUMNS:
            out.append((f"history/{col}", np.array([row.get(col, math.nan) for row in ckpt.history], dtype=np.float64)))
    return out


def checkpoint_bytes(ckpt: Checkpoint, precision: str = "f64") -> bytes:
    if precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {precision!r}")
    meta = dict(ckpt.config)
    meta["iteration"] = ckpt.iteration
    if ckpt.adam is not None:
        a = ckpt.adam
        meta["adam"] = {"step": a.step, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = _tensors(ckpt)
    parts = [CK_MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        # generator words and history counters must survive exactly whatever the precision
        wide = precision == "f64" or name.startswith(_ALWAYS_F64)
        rank = arr.ndim | (_F64 if wide else 0)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", rank))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8" if wide else "<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint, precision: str = "f64") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt, precision))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(raw) - pos} left", pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CK_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, n_cfg = struct.unpack("<II", take(8, "header"))
    if version != CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        meta = json.loads(take(n_cfg, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", 12) from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        start = pos
        (n_name,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        name = take(n_name, f"name of tensor {i}").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1, f"rank of tensor {name!r}"))
        wide = bool(rank & _F64)
        rank &= ~_F64
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of tensor {name!r}"))
        n = int(np.prod(dims)) if rank else 1
        width = 8 if wide else 4
        if pos + width * n > len(raw):
            raise FormatError(
                f"tensor {name!r} declares {n} values ({width * n} bytes) but only {len(raw) - pos} bytes remain", start
            )
        data = np.frombuffer(take(width * n, f"data of tensor {name!r}"), dtype="<f8" if wide else "<f4")
        tensors[name] = data.astype(np.float64).reshape(dims)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after the last tensor", pos)

    if "model" not in meta:
        raise FormatError("checkpoint config has no model section", 12)
    try:
        ModelConfig.from_dict(meta["model"])
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"checkpoint model config is incompatible with this build: {exc}") from None

    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = None
    if "adam" in meta:
        a = meta.pop("adam")
        adam = AdamState(
            {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam/m/")},
            {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam/v/")},
            a["step"],
            a["lr"],
            a["beta1"],
            a["beta2"],
            a["eps"],
        )
    rng_state = _rng_state(tensors["rng/pcg64"]) if "rng/pcg64" in tensors else None
    history = []
    if "history/iter" in tensors:
        cols = {c: tensors[f"history/{c}"] for c in HISTORY_COLUMNS}
        for i in range(len(cols["iter"])):
            row = {c: float(cols[c][i]) for c in HISTORY_COLUMNS}
            row["iter"] = int(row["iter"])
            history.append({k: v for k, v in row.items() if not (isinstance(v, float) and math.isnan(v))})
    iteration = int(meta.pop("iteration", 0))
    return Checkpoint(meta, {k: v.copy() for k, v in params.items()}, adam, rng_state, iteration, history, version)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Schedule:
    iters: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    eval_every: int = 500
    seed: int = 0
    clip_norm: float | None = None  # global gradient-norm cap; off by default
    roll: bool = False
    history_tail: int = 1000  # rows of history carried inside checkpoints

    def validate(self) -> None:
        if self.iters < 0 or self.batch_size < 1 or self.eval_every < 1 or not self.lr > 0:
            raise ConfigError(f"invalid schedule {self}")


@dataclass
class TrainResult:
    model: ChemNNEModel
    history: list[dict]
    best_val_rmse: float | None
    best_iter: int | None
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def evaluate(m: ChemNNEModel, ds: ChemDataset, batch: int = 256):
    preds = [m.predict(ds.x0[i : i + batch], ds.env[i : i + batch]) for i in range(0, ds.n_samples, batch)]
    return metrics(np.concatenate(preds), ds.traj)


def _check_fit(m: ChemNNEModel, ds: ChemDataset) -> None:
    cfg = m.config
    if (ds.n_in, ds.env.shape[1], ds.n_out, ds.n_steps) != (cfg.n_in, cfg.n_env, cfg.n_out, cfg.n_steps):
        raise ConfigError(
            f"dataset (n_in={ds.n_in}, n_env={ds.env.shape[1]}, n_out={ds.n_out}, T={ds.n_steps}) does not match "
            f"model (n_in={cfg.n_in}, n_env={cfg.n_env}, n_out={cfg.n_out}, T={cfg.n_steps})"
        )


def _batch_grid(T: int, taus: np.ndarray) -> np.ndarray:
    """[B, T+1] token times: t0 stays, step tokens follow the rolled targets."""
    grid = standard_grid(T)
    out = np.empty((len(taus), T + 1))
    out[:, 0] = grid[0]
    for b, tau in enumerate(taus):
        out[b, 1:] = grid[1:][rolled_positions(T, int(tau))]
    return out


def train_loop(
    m: ChemNNEModel,
    ds: ChemDataset,
    w: LossWeights,
    schedule: Schedule,
    val: ChemDataset | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    run_meta: dict | None = None,
    log=None,
) -> TrainResult:
    """Sample with replacement, step Adam, validate every ``eval_every`` iterations.

    With ``out_dir`` the loop keeps ``last.ckpt`` (written at every
    validation and at the end) and ``best.ckpt`` (lowest validation RMSE).
    ``resume`` continues an interrupted run exactly where it stopped.
    """
    schedule.validate()
    if ds.n_samples == 0:
        raise ConfigError("training set is empty")
    _check_fit(m, ds)
    if val is not None:
        _check_fit(m, val)
    shared = SpeciesMap.from_names(ds.in_species, ds.out_species) if ds.in_species else SpeciesMap(
        tuple(range(ds.n_in)), tuple(range(ds.n_in))
    )
    if w.idn > 0 and not len(shared):
        raise ConfigError("identity loss weight is positive but inputs and outputs share no species")

    params = m.parameters()
    rng = np.random.default_rng(schedule.seed)
    adam = AdamState.init(params, schedule.lr)
    history: list[dict] = []
    start = 0
    best_rmse, best_iter = None, None
    meta = {"model": m.config.to_dict(), "loss": w.as_dict(), "schedule": asdict(schedule)}
    meta.update(run_meta or {})
    if resume is not None:
        m.load_parameters(resume.params)
        if resume.adam is not None:
            adam = resume.adam
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.iteration
        history = list(resume.history)
        best_rmse = resume.config.get("best_val_rmse")
        best_iter = resume.config.get("best_iter")

    out = Path(out_dir) if out_dir is not None else None
    last_path = out / "last.ckpt" if out else None
    best_path = out / "best.ckpt" if out else None
    saved_any = False

    def snapshot(iteration: int) -> Checkpoint:
        cfg = dict(meta, best_val_rmse=best_rmse, best_iter=best_iter)
        return Checkpoint(
            cfg,
            {k: p.data.copy() for k, p in params.items()},
            AdamState({k: a.copy() for k, a in adam.m.items()}, {k: a.copy() for k, a in adam.v.items()},
                      adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps),
            rng.bit_generator.state,
            iteration,
            history[-schedule.history_tail :],
        )

    T = ds.n_steps
    for it in range(start + 1, schedule.iters + 1):
        idx = rng.integers(0, ds.n_samples, size=schedule.batch_size)
        x0, env, truth = ds.x0[idx], ds.env[idx], ds.traj[idx]
        grid = None
        if schedule.roll:
            taus = rng.integers(0, T, size=schedule.batch_size)
            truth = np.stack([truth[b][rolled_positions(T, int(t))] for b, t in enumerate(taus)])
            grid = _batch_grid(T, taus)
        tn.zero_grad(params.values())
        br = compute_losses(m, x0, env, truth, w, shared, grid)
        loss = br.total.item()
        if not math.isfinite(loss):
            raise TrainingAborted("non-finite training loss", it, str(last_path) if saved_any else None)
        br.total.backward()
        if schedule.clip_norm:
            clip_gradients(params, schedule.clip_norm)
        adam_step(params, None, adam)

        row = {"iter": it, "loss_total": loss}
        row.update({f"loss_{k}": v for k, v in br.terms.items()})
        if it % schedule.eval_every == 0 or it == schedule.iters:
            if val is not None and val.n_samples:
                mt = evaluate(m, val)
                row.update(val_rmse=mt.rmse, val_mae=mt.mae, val_mbe=mt.mbe)
                if best_rmse is None or mt.rmse < best_rmse:
                    best_rmse, best_iter = mt.rmse, it
                    if out:
                        save_checkpoint(best_path, snapshot(it))
            history.append(row)
            if out:
                save_checkpoint(last_path, snapshot(it))
                saved_any = True
            if log:
                log(row)
        else:
            history.append(row)

    if out:
        save_checkpoint(last_path, snapshot(schedule.iters))
        if best_rmse is None or not best_path.exists():
            save_checkpoint(best_path, snapshot(schedule.iters))
    return TrainResult(m, history, best_rmse, best_iter, last_path, best_path if out else None)


def write_history(history: list[dict], path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in HISTORY_COLUMNS])


def read_history(path) -> list[dict]:
    rows = []
    with open(Path(path), encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {k: (int(v) if k == "iter" else float(v)) for k, v in rec.items() if v != ""}
            rows.append(row)
    return rows
