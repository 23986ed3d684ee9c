"""Mass-action reaction networks: text format, rate laws, right-hand side."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError

T_REF = 298.15
ENV_NAMES = ("temperature", "relative_humidity", "radiation")


@dataclass(frozen=True)
class Reaction:
    reactants: tuple[tuple[int, int], ...]  # (species index, stoichiometric coefficient)
    products: tuple[tuple[int, int], ...]
    k0: float
    ea: float = 0.0
    photo: bool = False
    h2o: bool = False
    line: int | None = None


@dataclass
class Mechanism:
    species: list[str]
    reactions: list[Reaction]
    atoms: list[str] = field(default_factory=list)
    composition: np.ndarray | None = None  # [n_atoms, n_species]

    def __post_init__(self):
        self.index = {name: i for i, name in enumerate(self.species)}
        S, R = len(self.species), len(self.reactions)
        self.stoich = np.zeros((S, R))
        for j, rx in enumerate(self.reactions):
            for i, n in rx.reactants:
                self.stoich[i, j] -= n
            for i, n in rx.products:
                self.stoich[i, j] += n
        width = max((sum(n for _, n in rx.reactants) for rx in self.reactions), default=1)
        # reactant slots, padded with a dummy species (index S) held at 1
        self.slots = np.full((R, max(width, 1)), S, dtype=np.intp)
        for j, rx in enumerate(self.reactions):
            flat = [i for i, n in rx.reactants for _ in range(n)]
            self.slots[j, : len(flat)] = flat
        self.k0 = np.array([rx.k0 for rx in self.reactions])
        self.ea = np.array([rx.ea for rx in self.reactions])
        self.photo = np.array([rx.photo for rx in self.reactions], dtype=bool)
        self.h2o = np.array([rx.h2o for rx in self.reactions], dtype=bool)

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    def imbalance(self) -> np.ndarray | None:
        """A @ stoich per reaction ([n_atoms, n_reactions]) or None without composition."""
        if self.composition is None:
            return None
        return self.composition @ self.stoich

    def scaled(self, factor: float) -> "Mechanism":
        """Same network with every rate constant multiplied by ``factor``."""
        rxs = [Reaction(r.reactants, r.products, r.k0 * factor, r.ea, r.photo, r.h2o, r.line) for r in self.reactions]
        return Mechanism(list(self.species), rxs, list(self.atoms), self.composition)


@dataclass(frozen=True)
class Environment:
    temperature: float = T_REF  # K
    relative_humidity: float = 0.5  # fraction
    radiation: float = 500.0  # W m^-2

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be > 0 K, got {self.temperature}")
        if not 0.0 <= self.relative_humidity <= 1.0:
            raise ContractError(f"relative humidity must be in [0, 1], got {self.relative_humidity}")
        if not self.radiation >= 0:
            raise ContractError(f"radiation must be >= 0, got {self.radiation}")

    def as_array(self) -> np.ndarray:
        return np.array([self.temperature, self.relative_humidity, self.radiation])


# ---------------------------------------------------------------------------
# parsing

_TERM = re.compile(r"^(?:(\d+)\s*\*?\s*)?([A-Za-z_][A-Za-z0-9_()]*)$")


def _side(text: str, lineno: int) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = []
    text = text.strip()
    if not text:
        return out
    for term in text.split("+"):
        term = term.strip()
        m = _TERM.match(term)
        if not m:
            raise ParseError(f"cannot read species term {term!r}", lineno)
        coef = int(m.group(1)) if m.group(1) else 1
        if coef < 1:
            raise ParseError(f"stoichiometric coefficient must be positive in {term!r}", lineno)
        out.append((m.group(2), coef))
    return out


def _merge(terms, index) -> tuple[tuple[int, int], ...]:
    acc: dict[int, int] = {}
    for name, coef in terms:
        acc[index[name]] = acc.get(index[name], 0) + coef
    return tuple(sorted(acc.items()))


def parse_mechanism(text: str) -> Mechanism:
    """Parse the line-oriented mechanism format.

    ``A + B -> C ; k0=1e-3 [ea=500] [photo] [h2o]`` declares a reaction,
    ``atoms NO2 N=1 O=2`` declares a species and its composition, ``#``
    starts a comment. Once any ``atoms`` line exists, reactions may only
    name declared species and every reaction must conserve each atom.
    """
    comp: dict[str, dict[str, int]] = {}
    raw_rx: list[tuple[list, list, dict, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("atoms "):
            parts = line.split()
            if len(parts) < 2:
                raise ParseError("atoms line needs a species name", lineno)
            name = parts[1]
            if name in comp:
                raise ParseError(f"species {name!r} declared twice", lineno)
            counts = {}
            for item in parts[2:]:
                atom, _, n = item.partition("=")
                try:
                    counts[atom] = int(n)
                except ValueError:
                    raise ParseError(f"bad atom count {item!r}", lineno) from None
                if counts[atom] < 0:
                    raise ParseError(f"negative atom count {item!r}", lineno)
            comp[name] = counts
            continue
        if "->" not in line:
            raise ParseError(f"expected a reaction 'A + B -> C ; k0=...', got {line!r}", lineno)
        eqn, _, opts = line.partition(";")
        lhs, _, rhs = eqn.partition("->")
        reactants, products = _side(lhs, lineno), _side(rhs, lineno)
        if not reactants:
            raise ParseError("reaction has no reactants", lineno)
        params = {"photo": False, "h2o": False}
        for tok in opts.split():
            key, eq, value = tok.partition("=")
            if key in ("photo", "h2o") and not eq:
                params[key] = True
            elif key in ("k0", "ea") and eq:
                try:
                    params[key] = float(value)
                except ValueError:
                    raise ParseError(f"bad number in {tok!r}", lineno) from None
            else:
                raise ParseError(f"unknown reaction option {tok!r}", lineno)
        if "k0" not in params:
            raise ParseError("reaction needs k0=<rate constant>", lineno)
        if not params["k0"] >= 0 or not math.isfinite(params["k0"]):
            raise ParseError(f"rate constant must be a non-negative number, got {params['k0']}", lineno)
        raw_rx.append((reactants, products, params, lineno))

    if comp:
        species = list(comp)
    else:
        species = []
        for reactants, products, _, _ in raw_rx:
            for name, _ in reactants + products:
                if name not in species:
                    species.append(name)
    index = {name: i for i, name in enumerate(species)}

    reactions = []
    for reactants, products, params, lineno in raw_rx:
        for name, _ in reactants + products:
            if name not in index:
                raise ParseError(f"unknown species {name!r}", lineno)
        reactions.append(
            Reaction(
                _merge(reactants, index),
                _merge(products, index),
                params["k0"],
                params.get("ea", 0.0),
                params["photo"],
                params["h2o"],
                lineno,
            )
        )

    atoms: list[str] = []
    composition = None
    if comp:
        for counts in comp.values():
            for atom in counts:
                if atom not in atoms:
                    atoms.append(atom)
        composition = np.array([[comp[s].get(a, 0) for s in species] for a in atoms], dtype=float)
    mech = Mechanism(species, reactions, atoms, composition)
    bad = mech.imbalance()
    if bad is not None:
        for j in range(mech.n_reactions):
            if np.any(bad[:, j] != 0):
                off = {atoms[a]: int(bad[a, j]) for a in range(len(atoms)) if bad[a, j] != 0}
                raise ParseError(f"reaction {j} does not conserve atoms (net change {off})", reactions[j].line)
    return mech


def load_mechanism(path) -> Mechanism:
    return parse_mechanism(Path(path).read_text(encoding="utf-8"))


def demo_mechanism_text() -> str:
    return resources.files("chem_emu.kinetics").joinpath("data/demo.mech").read_text(encoding="utf-8")


def demo_mechanism() -> Mechanism:
    return parse_mechanism(demo_mechanism_text())


# rate constants scaled down so the fastest pseudo-first-order loss is a few per minute
NONSTIFF_FACTOR = 0.02


def demo_mechanism_nonstiff() -> Mechanism:
    return demo_mechanism().scaled(NONSTIFF_FACTOR)


# ---------------------------------------------------------------------------
# kinetics


def rates(mech: Mechanism, env) -> np.ndarray:
    """Rate constants for one environment (``Environment``) or a batch ([B, 3] array)."""
    if isinstance(env, Environment):
        return _rates(mech, env.as_array()[None, :])[0]
    env = np.asarray(env, dtype=float)
    return _rates(mech, env[None, :])[0] if env.ndim == 1 else _rates(mech, env)


def _rates(mech: Mechanism, env: np.ndarray) -> np.ndarray:
    temp, rh, rad = env[:, 0:1], env[:, 1:2], env[:, 2:3]
    thermal = mech.k0 * np.exp(-mech.ea * (1.0 / temp - 1.0 / T_REF))
    photo = mech.k0 * (rad / 1000.0)
    k = np.where(mech.photo, photo, thermal)
    return np.where(mech.h2o, k * rh, k)


def reaction_rates(mech: Mechanism, k: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-reaction rates k_j prod_r c_r^s_rj for c of shape [B, S]."""
    ext = np.concatenate([c, np.ones(c.shape[:-1] + (1,))], axis=-1)
    return k * np.prod(ext[..., mech.slots], axis=-1)


def rhs_batch(mech: Mechanism, k: np.ndarray, c: np.ndarray) -> np.ndarray:
    return reaction_rates(mech, k, c) @ mech.stoich.T


def rhs_and_jacobian_batch(mech: Mechanism, k: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dc/dt [B, S] and the analytic Jacobian [B, S, S]."""
    B, S = c.shape
    R, M = mech.slots.shape
    ext = np.concatenate([c, np.ones((B, 1))], axis=-1)
    vals = ext[:, mech.slots]  # [B, R, M]
    # product of all slots except m, from prefix and suffix products (no division by zero)
    prefix = np.ones((B, R, M + 1))
    suffix = np.ones((B, R, M + 1))
    for m in range(M):
        prefix[:, :, m + 1] = prefix[:, :, m] * vals[:, :, m]
        suffix[:, :, M - 1 - m] = suffix[:, :, M - m] * vals[:, :, M - 1 - m]
    r = k * prefix[:, :, M]
    partial = k[..., None] * prefix[:, :, :M] * suffix[:, :, 1:]  # d r_j / d slot m
    dr = np.zeros((B, R, S + 1))
    rows = np.arange(R)
    for m in range(M):  # a species may fill several slots of one reaction, so accumulate
        dr[:, rows, mech.slots[:, m]] += partial[:, :, m]
    return r @ mech.stoich.T, mech.stoich @ dr[:, :, :S]


def rhs_and_jacobian(mech: Mechanism, k: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-state version; negative concentrations are read as zero."""
    c = np.maximum(np.asarray(c, dtype=float), 0.0)
    f, J = rhs_and_jacobian_batch(mech, np.asarray(k)[None, :], c[None, :])
    return f[0], J[0]
