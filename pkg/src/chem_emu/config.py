"""Flat ``section.key = value`` run configuration with named profiles.

Example::

    # comments start with '#'
    model.hidden = 64
    [train]            # optional section header; following keys get the prefix
    iters = 2000
    lr = 1e-3

Booleans are ``true``/``false``, lists are comma separated, ``none``
clears an optional value. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, ParseError
from .objective import LossWeights

# key -> (type, default); "int?"/"float?" accept none
SCHEMA: dict[str, tuple[str, Any]] = {
    # model; n_in/n_env/n_out/n_steps come from the dataset unless given
    "model.n_in": ("int?", None),
    "model.n_env": ("int?", None),
    "model.n_out": ("int?", None),
    "model.n_steps": ("int?", None),
    "model.hidden": ("int", 128),
    "model.time_dim": ("int?", None),
    "model.attn_blocks": ("int", 2),
    "model.heads": ("int", 1),
    "model.fno_blocks": ("int", 4),
    "model.fno_modes": ("int?", None),
    "model.d_ff": ("int?", None),
    "model.fno_activation": ("str", "gelu"),
    "model.use_attn": ("bool", True),
    "model.use_time_emb": ("bool", True),
    "model.use_inr": ("bool", True),
    "model.use_fno": ("bool", True),
    # train
    "train.iters": ("int", 5000),
    "train.batch_size": ("int", 32),
    "train.lr": ("float", 1e-3),
    "train.eval_every": ("int", 500),
    "train.seed": ("int", 0),
    "train.clip_norm": ("float?", None),
    "train.roll": ("bool", False),
    "train.history_tail": ("int", 1000),
    "train.max_samples": ("int", 0),  # 0 = whole training split
    # loss weights
    "loss.recon": ("float", 1.0),
    "loss.d1": ("float", 10.0),
    "loss.d2": ("float", 10.0),
    "loss.idn": ("float", 1.0),
    "loss.mass": ("float", 0.001),
    # data generation
    "data.mechanism": ("str", "demo"),
    "data.plan": ("str", "demo"),
    "data.task": ("int", 1),
    "data.t_end": ("float", 55.0),
    "data.n_steps": ("int", 11),
    "data.significance": ("float", 1.0),
    "data.jitter": ("float", 0.0),
    "data.workers": ("int", 1),
    "data.max_failures": ("float", 0.05),  # tolerated fraction of failed simulations
    # reporting
    "report.species": ("list", []),
    "report.samples": ("list", ["0"]),
    "report.worst_k": ("int", 5),
}

PROFILES: dict[str, dict[str, Any]] = {
    "demo": {},
    # reference optimizer and loss settings; the model section keeps the default architecture
    "paper-defaults": {
        "train.lr": 1e-3,
        "train.batch_size": 4096,
        "train.iters": 100_000,
        "loss.recon": 1.0,
        "loss.d1": 10.0,
        "loss.d2": 10.0,
        "loss.idn": 1.0,
        "loss.mass": 0.001,
    },
    "smoke": {
        "model.hidden": 16,
        "model.attn_blocks": 1,
        "model.fno_blocks": 1,
        "train.iters": 200,
        "train.batch_size": 16,
        "train.eval_every": 100,
        "data.plan": "small",
    },
}


def _coerce(key: str, kind: str, raw: str, line: int | None):
    text = raw.strip()
    try:
        if kind.endswith("?"):
            if text.lower() in ("none", ""):
                return None
            kind = kind[:-1]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if kind == "list":
            return [p.strip() for p in text.split(",") if p.strip()]
        return text
    except ValueError as exc:
        raise ParseError(f"{key}: cannot read {raw!r} as {kind} ({exc})", line) from None


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})
    profile: str = "demo"

    @classmethod
    def from_profile(cls, name: str) -> "RunConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
        cfg = cls(profile=name)
        cfg.values.update(PROFILES[name])
        return cfg

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """Parse config text. A leading ``profile = name`` picks the base profile."""
        entries: list[tuple[str, str, int]] = []
        section = ""
        profile = "demo"
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ParseError(f"expected 'key = value', got {line!r}", lineno)
            key = key.strip()
            if key == "profile" and not section:
                profile = value.strip()
                continue
            if section and "." not in key:
                key = f"{section}.{key}"
            entries.append((key, value, lineno))
        try:
            cfg = cls.from_profile(profile)
        except ConfigError as exc:
            raise ParseError(str(exc)) from None
        for key, value, lineno in entries:
            if key not in SCHEMA:
                raise ParseError(f"unknown key {key!r}", lineno)
            cfg.values[key] = _coerce(key, SCHEMA[key][0], value, lineno)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"))

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        kind = SCHEMA[key][0]
        self.values[key] = _coerce(key, kind, value, None) if isinstance(value, str) and kind != "str" else value

    def __getitem__(self, key: str):
        return self.values[key]

    def check(self) -> None:
        self.loss_weights()
        if self["data.task"] not in (1, 2, 3):
            raise ConfigError(f"data.task must be 1, 2 or 3, got {self['data.task']}")
        if self["train.iters"] < 0 or self["train.batch_size"] < 1:
            raise ConfigError("train.iters must be >= 0 and train.batch_size >= 1")

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.section("loss"))

    def dump(self) -> str:
        lines = [f"# resolved configuration (base profile: {self.profile})"]
        for key in SCHEMA:
            v = self.values[key]
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif v is None:
                text = "none"
            elif isinstance(v, list):
                text = ", ".join(str(x) for x in v)
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"
