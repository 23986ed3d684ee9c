"""The assembled emulator: encoder, latent propagator, decoder.

Forward pass for inputs ``x0[B, n_in]``, ``k[B, n_env]`` and a time grid
``t[T']``::

    z0     = inr_in(concat(x0, k))            # first sine layer, omega = 30
    tokens = inr_map(z0)[:, None] + lambda(t)  # one token per requested time
    tokens = attention blocks(tokens)
    latent = tokens + fno_stack(tokens)        # the integral term as a residual
    x_t    = decoder(latent)                   # shared per-token head

The model's standard grid is ``[0, 1/T, ..., T/T]``: token 0 is the
initial-condition code used by the identity loss, tokens 1..T are the
predicted steps.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .nn import AttentionBlock, FnoBlock, MlpDecoder, Module, TimeEmbedding, TokenMlp, make_layer
from .spectral import n_freq
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_in: int = 6
    n_env: int = 3
    n_out: int = 6
    n_steps: int = 11
    hidden: int = 128
    time_dim: int | None = None  # L; defaults to hidden // 2
    attn_blocks: int = 2
    heads: int = 1
    fno_blocks: int = 4
    fno_modes: int | None = None  # defaults to n_steps // 2 + 1
    d_ff: int | None = None  # defaults to 2 * hidden
    fno_activation: str = "gelu"
    use_attn: bool = True
    use_time_emb: bool = True
    use_inr: bool = True
    use_fno: bool = True

    def __post_init__(self):
        if self.time_dim is None:
            self.time_dim = self.hidden // 2
        if self.fno_modes is None:
            self.fno_modes = n_freq(self.n_steps)
        if self.d_ff is None:
            self.d_ff = 2 * self.hidden
        self.validate()

    def validate(self) -> None:
        counts = ("n_in", "n_env", "n_out", "n_steps", "hidden", "time_dim", "attn_blocks", "heads",
                  "fno_blocks", "fno_modes", "d_ff")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if 2 * self.time_dim != self.hidden:
            raise ConfigError(f"time embedding size 2L = {2 * self.time_dim} must equal hidden = {self.hidden}")
        if self.fno_modes > n_freq(self.n_steps):
            raise ConfigError(f"fno_modes {self.fno_modes} exceeds {n_freq(self.n_steps)} for n_steps={self.n_steps}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.fno_activation not in ("gelu", "sin", "identity"):
            raise ConfigError(f"unknown fno_activation {self.fno_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.use_attn, self.use_time_emb, self.use_inr, self.use_fno)


def standard_grid(n_steps: int) -> np.ndarray:
    """[0, 1/n, ..., n/n]: the t0 code followed by the predicted steps."""
    return np.arange(n_steps + 1, dtype=float) / n_steps


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden
        self.inr_in = make_layer(cfg.n_in + cfg.n_env, d, True, cfg.use_inr, rng)
        self.inr_map = make_layer(d, d, False, cfg.use_inr, rng)
        self.time = TimeEmbedding.init(cfg.time_dim, cfg.n_steps) if cfg.use_time_emb else None
        self.blocks = (
            [AttentionBlock(d, cfg.d_ff, cfg.heads, rng, use_inr=cfg.use_inr) for _ in range(cfg.attn_blocks)]
            if cfg.use_attn
            else []
        )


class ChemNNEModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        if cfg.use_fno:
            self.propagator = [
                FnoBlock.init(cfg.hidden, cfg.fno_modes, rng, act=cfg.fno_activation) for _ in range(cfg.fno_blocks)
            ]
        else:
            self.propagator = [TokenMlp(cfg.hidden, cfg.fno_blocks, rng, act=cfg.fno_activation)]
        self.decoder = MlpDecoder(cfg.hidden, cfg.n_out, rng, use_inr=cfg.use_inr)

    # -- parameters --------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p, _ in self.named_parameters()}

    def census(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, p, kind in self.named_parameters():
            out[kind] = out.get(kind, 0) + p.size
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters().values()])

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=float)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    # -- forward -----------------------------------------------------------
    def encode(self, x0, k) -> Tensor:
        x0, k = tn.as_tensor(x0), tn.as_tensor(k)
        cfg = self.config
        if x0.ndim != 2 or x0.shape[1] != cfg.n_in:
            raise DimensionError(f"x0 must be [B, {cfg.n_in}], got {x0.shape}")
        if k.ndim != 2 or k.shape[1] != cfg.n_env or k.shape[0] != x0.shape[0]:
            raise DimensionError(f"k must be [{x0.shape[0]}, {cfg.n_env}], got {k.shape}")
        return self.encoder.inr_in(tn.concat([x0, k], axis=1))

    def tokens(self, z0: Tensor, t_grid) -> Tensor:
        t_grid = tn.as_tensor(t_grid)
        base = self.encoder.inr_map(z0)
        B, d = base.shape
        T = t_grid.shape[-1]
        z = tn.broadcast_to(tn.reshape(base, (B, 1, d)), (B, T, d))
        if self.encoder.time is not None:
            z = z + self.encoder.time(t_grid)
        return z

    def propagate(self, z: Tensor) -> Tensor:
        for blk in self.encoder.blocks:
            z = blk(z)
        flow = z
        for blk in self.propagator:
            flow = blk(flow)
        return z + flow

    def forward(self, x0, k, t_grid=None) -> Tensor:
        """[B, n_in], [B, n_env], [T'] or [B, T'] -> [B, T', n_out]."""
        if t_grid is None:
            t_grid = standard_grid(self.config.n_steps)
        latent = self.propagate(self.tokens(self.encode(x0, k), t_grid))
        return self.decoder(latent)

    __call__ = forward

    def predict_initial(self, x0, k) -> Tensor:
        """Decoder output at the t0 token of the standard grid."""
        return self.forward(x0, k)[:, 0, :]

    def predict(self, x0, k) -> np.ndarray:
        """Normalized predictions for steps 1..T, no graph recorded."""
        with tn.no_grad():
            return self.forward(x0, k).data[:, 1:, :]


def build(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ChemNNEModel:
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    model = ChemNNEModel(cfg, rng)
    check_census(model)
    return model


def forward(m: ChemNNEModel, x0, k, t_grid=None) -> Tensor:
    return m.forward(x0, k, t_grid)


def predict_initial(m: ChemNNEModel, x0, k) -> Tensor:
    return m.predict_initial(x0, k)


# ---------------------------------------------------------------------------
# parameter census


def expected_census(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts per kind, derived from the config alone."""
    d, n_in, n_env, n_out = cfg.hidden, cfg.n_in, cfg.n_env, cfg.n_out
    layer = lambda a, b: a * b + b  # noqa: E731
    dense_kind = "sine" if cfg.use_inr else "linear"
    out: dict[str, int] = {}

    def put(kind, n):
        out[kind] = out.get(kind, 0) + n

    put(dense_kind, layer(n_in + n_env, d) + layer(d, d))  # encoder INR pair
    put(dense_kind, 2 * layer(d, d))  # decoder sine layers
    put("linear", layer(d, n_out))
    if cfg.use_time_emb:
        put("time", cfg.time_dim)
    if cfg.use_attn:
        put("attention", cfg.attn_blocks * (3 * d * d + layer(d, cfg.d_ff) + layer(cfg.d_ff, d)))
    if cfg.use_fno:
        put("fno", cfg.fno_blocks * (d * d + 2 * cfg.fno_modes * d * d))
    else:
        put("linear", cfg.fno_blocks * layer(d, d))
    return out


def check_census(model: ChemNNEModel) -> None:
    got, want = model.census(), expected_census(model.config)
    if got != want:
        raise ConfigError(f"parameter census {got} does not match config-derived {want}")


# ---------------------------------------------------------------------------
# cost model


def count_macs(cfg: ModelConfig, tokens: int | None = None) -> int:
    """Per-sample multiply-accumulate count of one forward pass.

    Linear layers cost tokens * d_in * d_out; attention adds 3Td^2 (QKV),
    T^2 d (scores), T^2 d (weighted sum) and 2 T d d_ff (ffn); each spectral
    convolution costs T_freq d^2 complex products at 4 real MACs each plus a
    naive T^2 d transform in each direction.
    """
    T = cfg.n_steps + 1 if tokens is None else tokens
    d = cfg.hidden
    macs = linear_macs(1, cfg.n_in + cfg.n_env, d) + linear_macs(1, d, d)
    if cfg.use_attn:
        macs += cfg.attn_blocks * attention_macs(T, d, cfg.d_ff)
    if cfg.use_fno:
        macs += cfg.fno_blocks * (linear_macs(T, d, d) + spectral_macs(T, d, cfg.fno_modes))
    else:
        macs += cfg.fno_blocks * linear_macs(T, d, d)
    macs += linear_macs(T, d, d) * 2 + linear_macs(T, d, cfg.n_out)
    return int(macs)


def linear_macs(tokens: int, d_in: int, d_out: int) -> int:
    return tokens * d_in * d_out


def attention_macs(T: int, d: int, d_ff: int) -> int:
    return 3 * T * d * d + T * T * d + T * T * d + 2 * T * d * d_ff


def spectral_macs(T: int, d: int, modes: int) -> int:
    return 4 * modes * d * d + 2 * T * T * d


# ---------------------------------------------------------------------------
# timing


def timing_harness(m: ChemNNEModel, dataset, batch: int = 64, runs: int = 30, warmup: int = 3) -> float:
    """Median wall-clock seconds per sample for batched inference."""
    n = len(dataset)
    if n == 0:
        raise ContractError("timing needs a non-empty dataset")
    idx = np.arange(batch) % n
    x0, env = dataset.x0[idx], dataset.env[idx]
    times = []
    with tn.no_grad():
        for i in range(warmup + runs):
            start = time.perf_counter()
            m.forward(x0, env)
            if i >= warmup:
                times.append((time.perf_counter() - start) / batch)
    return statistics.median(times)


def param_count_millions(cfg: ModelConfig) -> float:
    return sum(expected_census(cfg).values()) / 1e6


def macs_millions(cfg: ModelConfig) -> float:
    return count_macs(cfg) / 1e6


__all__ = [
    "ModelConfig",
    "ChemNNEModel",
    "build",
    "forward",
    "predict_initial",
    "count_macs",
    "timing_harness",
    "standard_grid",
    "expected_census",
]

