"""Layers: sine (INR) layers, learnable time embedding, attention, FNO, decoder."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .spectral import SpectralWeights, spectral_conv
from .tensor import Tensor

FIRST_OMEGA = 30.0

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sin": tn.sin,
    "tanh": tn.tanh,
    "gelu": tn.gelu,
    "identity": tn.identity,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


class Module:
    """Minimal parameter container; subclasses list their tensors and children."""

    kind = "linear"

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, str]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value, self.kind
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, SpectralWeights):
                yield path + ".re", value.R.re, "fno"
                yield path + ".im", value.R.im, "fno"
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")


def uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """``x @ W + b`` with plain uniform(+-sqrt(1/d_in)) init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = math.sqrt(1.0 / d_in)
        self.W = uniform(rng, bound, (d_in, d_out))
        self.b = uniform(rng, bound, (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.W
        return y + self.b if self.b is not None else y


class InrLayer(Module):
    """``act(omega * (x @ W + b))``; sine gives the implicit-representation layer.

    With ``act="tanh"`` the layer is the non-INR ablation: plain init, no omega.
    """

    def __init__(self, W: Tensor, b: Tensor, omega: float = 1.0, act: str = "sin"):
        self.W = W
        self.b = b
        self.omega = omega
        self.act = act
        self.kind = "sine" if act == "sin" else "linear"

    def __call__(self, x: Tensor) -> Tensor:
        pre = x @ self.W + self.b
        if self.omega != 1.0:
            pre = tn.scale(pre, self.omega)
        return activation(self.act)(pre)


def siren_bound(d_in: int, is_first: bool) -> float:
    return 1.0 / d_in if is_first else math.sqrt(6.0 / d_in)


def siren_init(d_in: int, d_out: int, is_first: bool, rng: np.random.Generator) -> InrLayer:
    """Sine layer initialised so hidden pre-activations stay near unit scale.

    Hidden layers draw W ~ U(-sqrt(6/d_in), sqrt(6/d_in)); the first layer
    draws U(-1/d_in, 1/d_in) and multiplies by omega = 30 inside the sine.
    Biases start at zero.
    """
    if d_in < 1 or d_out < 1:
        raise ConfigError(f"layer dims must be >= 1, got {d_in}x{d_out}")
    W = uniform(rng, siren_bound(d_in, is_first), (d_in, d_out))
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return InrLayer(W, b, omega=FIRST_OMEGA if is_first else 1.0, act="sin")


def plain_layer(d_in: int, d_out: int, rng: np.random.Generator, act: str = "tanh") -> InrLayer:
    lin = Linear(d_in, d_out, rng)
    return InrLayer(lin.W, lin.b, omega=1.0, act=act)


def make_layer(d_in: int, d_out: int, is_first: bool, use_inr: bool, rng: np.random.Generator) -> InrLayer:
    return siren_init(d_in, d_out, is_first, rng) if use_inr else plain_layer(d_in, d_out, rng)


# ---------------------------------------------------------------------------


class TimeEmbedding(Module):
    """lambda(t) = [sin(2 pi theta t), cos(2 pi theta t)] with learnable theta."""

    kind = "time"

    def __init__(self, freqs: Tensor):
        self.freqs = freqs

    @classmethod
    def init(cls, L: int, n_steps: int) -> "TimeEmbedding":
        # geometric spread from a quarter cycle to just below the grid's Nyquist
        # rate; exactly at Nyquist the sine channel vanishes on every grid point
        freqs = np.geomspace(0.25, max(0.45 * n_steps, 0.5), L)
        return cls(Tensor(freqs, requires_grad=True))

    @property
    def dim(self) -> int:
        return 2 * self.freqs.shape[0]

    def __call__(self, t) -> Tensor:
        """``t`` of shape [T] or [B, T] -> [..., T, 2L]."""
        t = tn.as_tensor(t)
        phase = tn.scale(tn.reshape(t, t.shape + (1,)) * self.freqs, 2.0 * math.pi)
        return tn.concat([tn.sin(phase), tn.cos(phase)], axis=-1)


def time_embed(te: TimeEmbedding, t) -> Tensor:
    return te(t)


# ---------------------------------------------------------------------------


class AttentionBlock(Module):
    """out = z + ffn(z + softmax(Q K^T / sqrt(d_head)) V), ffn = W2 act(W1 . + b1) + b2."""

    kind = "attention"

    def __init__(self, d: int, d_ff: int, heads: int, rng: np.random.Generator, use_inr: bool = True):
        if heads < 1 or d % heads:
            raise ConfigError(f"hidden size {d} is not divisible by head count {heads}")
        bound = math.sqrt(1.0 / d)
        self.heads = heads
        self.W_Q = uniform(rng, bound, (d, d))
        self.W_K = uniform(rng, bound, (d, d))
        self.W_V = uniform(rng, bound, (d, d))
        ff1 = siren_init(d, d_ff, False, rng) if use_inr else plain_layer(d, d_ff, rng)
        self.ff1_W, self.ff1_b = ff1.W, ff1.b
        self.ff_act = "sin" if use_inr else "tanh"
        ff2 = Linear(d_ff, d, rng)
        self.ff2_W, self.ff2_b = ff2.W, ff2.b

    def attend(self, z: Tensor) -> Tensor:
        B, T, d = z.shape
        h = self.heads
        dh = d // h

        def split(x):
            return tn.transpose(tn.reshape(x, (B, T, h, dh)), (0, 2, 1, 3))

        q, k, v = split(z @ self.W_Q), split(z @ self.W_K), split(z @ self.W_V)
        scores = tn.scale(q @ tn.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        weights = tn.softmax(scores, axis=-1)
        ctx = weights @ v
        return tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, T, d))

    def ffn(self, x: Tensor) -> Tensor:
        hidden = activation(self.ff_act)(x @ self.ff1_W + self.ff1_b)
        return hidden @ self.ff2_W + self.ff2_b

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[2] != self.W_Q.shape[0]:
            raise DimensionError(f"attention expects [B, T, {self.W_Q.shape[0]}], got {z.shape}")
        return z + self.ffn(z + self.attend(z))


def attention_forward(blk: AttentionBlock, z: Tensor, lam: Tensor | None = None) -> Tensor:
    """Apply one block to ``z`` (plus the time embedding ``lam`` when given)."""
    if lam is not None:
        z = z + lam
    return blk(z)


class FnoBlock(Module):
    """gamma(z W_local^T + spectral_conv(z))."""

    kind = "fno"

    def __init__(self, W_local: Tensor, spectral: SpectralWeights, act: str = "gelu"):
        self.W_local = W_local
        self.spectral = spectral
        self.act = act

    @classmethod
    def init(cls, width: int, modes: int, rng: np.random.Generator, act: str = "gelu") -> "FnoBlock":
        W = uniform(rng, math.sqrt(1.0 / width), (width, width))
        return cls(W, SpectralWeights.init(modes, width, rng), act)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[2] != self.W_local.shape[0]:
            raise DimensionError(f"FNO block expects [B, T, {self.W_local.shape[0]}], got {z.shape}")
        local = z @ tn.transpose(self.W_local)
        return activation(self.act)(local + spectral_conv(z, self.spectral))


def fno_forward(blk: FnoBlock, z: Tensor) -> Tensor:
    return blk(z)


class TokenMlp(Module):
    """Per-token stack of act(z W + b); stands in for the FNO stack in ablations."""

    def __init__(self, width: int, depth: int, rng: np.random.Generator, act: str = "gelu"):
        self.layers = [Linear(width, width, rng) for _ in range(depth)]
        self.act = act

    def __call__(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = activation(self.act)(layer(z))
        return z


class MlpDecoder(Module):
    """Shared per-token head: sine layer, linear + sine, linear output."""

    def __init__(self, d: int, n_out: int, rng: np.random.Generator, use_inr: bool = True):
        self.inr = make_layer(d, d, False, use_inr, rng)
        self.hidden = make_layer(d, d, False, use_inr, rng)
        self.out = Linear(d, n_out, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.out(self.hidden(self.inr(z)))


def mlp_decoder_forward(layers: MlpDecoder, z: Tensor) -> Tensor:
    return layers(z)
