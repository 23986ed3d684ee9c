"""Real-input DFT over the time axis and the truncated spectral convolution.

The transforms are dense matrix products against cached cosine/sine
tables. At the trajectory lengths used here (T around 11) this is both
exact to rounding and cheap, and because the tables are constants the
autodiff backward is automatically the adjoint transform.

Conventions: forward is un-normalized, inverse carries 1/T. A real signal
of length T has T//2 + 1 non-redundant bins.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"real part {self.re.shape} and imaginary part {self.im.shape} differ")

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def n_freq(T: int) -> int:
    return T // 2 + 1


@lru_cache(maxsize=64)
def _forward_tables(T: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(K)[:, None]
    t = np.arange(T)[None, :]
    ang = 2.0 * np.pi * ((k * t) % T) / T
    cos, sin = np.cos(ang), -np.sin(ang)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


@lru_cache(maxsize=64)
def _inverse_tables(T: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(K)
    weight = np.where((k == 0) | (2 * k == T), 1.0, 2.0) / T
    ang = 2.0 * np.pi * ((np.arange(T)[:, None] * k[None, :]) % T) / T
    cos = np.cos(ang) * weight
    sin = -np.sin(ang) * weight
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def rdft(x: Tensor, axis: int = -1, modes: int | None = None) -> ComplexTensor:
    """Forward transform of a real tensor along ``axis``; first ``modes`` bins."""
    x = tn.as_tensor(x)
    axis = axis % x.ndim
    T = x.shape[axis]
    if T < 1:
        raise ContractError("dft needs at least one sample")
    K = n_freq(T) if modes is None else modes
    if not 1 <= K <= n_freq(T):
        raise ContractError(f"cannot keep {K} modes of a length-{T} signal (max {n_freq(T)})")
    cos, sin = _forward_tables(T, K)
    if x.ndim == 1:
        X = rdft(tn.reshape(x, (1, T)), modes=K)
        return ComplexTensor(tn.reshape(X.re, (K,)), tn.reshape(X.im, (K,)))
    if axis == x.ndim - 1:
        return ComplexTensor(x @ Tensor(cos.T), x @ Tensor(sin.T))
    moved = _move_to(x, axis, -2)
    re, im = Tensor(cos) @ moved, Tensor(sin) @ moved
    return ComplexTensor(_move_to(re, -2, axis), _move_to(im, -2, axis))


def irdft(X: ComplexTensor, n: int, axis: int = -1, check_hermitian: bool = False, atol: float = 1e-9) -> Tensor:
    """Inverse transform to a real length-``n`` signal.

    Bins past ``X.shape[axis]`` are treated as zero. The imaginary parts of
    the DC bin (and of the Nyquist bin for even ``n``) cannot be represented
    in a real signal and are dropped; with ``check_hermitian`` they must be
    zero instead.
    """
    ndim = len(X.shape)
    axis = axis % ndim
    K = X.shape[axis]
    if not 1 <= K <= n_freq(n):
        raise ContractError(f"{K} bins cannot come from a real length-{n} signal")
    if check_hermitian:
        im = np.moveaxis(X.im.data, axis, -1)
        bad = [0] + ([n // 2] if n % 2 == 0 and K > n // 2 else [])
        scale = max(1.0, float(np.abs(X.re.data).max(initial=0.0)))
        if np.abs(im[..., bad]).max(initial=0.0) > atol * scale:
            raise ContractError("spectrum is not Hermitian-consistent: DC/Nyquist bins carry imaginary parts")
    cos, sin = _inverse_tables(n, K)
    if ndim == 1:
        row = ComplexTensor(tn.reshape(X.re, (1, K)), tn.reshape(X.im, (1, K)))
        return tn.reshape(irdft(row, n), (n,))
    if axis == ndim - 1:
        return X.re @ Tensor(cos.T) + X.im @ Tensor(sin.T)
    re = _move_to(X.re, axis, -2)
    im = _move_to(X.im, axis, -2)
    out = Tensor(cos) @ re + Tensor(sin) @ im
    return _move_to(out, -2, axis)


def dft(x, direction: str = "forward", n: int | None = None, axis: int = -1):
    """``forward``: real Tensor -> ComplexTensor; ``inverse``: ComplexTensor -> real Tensor.

    The inverse direction needs the signal length ``n`` and insists on a
    Hermitian-consistent spectrum.
    """
    if direction == "forward":
        return rdft(x, axis=axis)
    if direction == "inverse":
        if n is None:
            raise ContractError("inverse dft needs the signal length n")
        return irdft(x, n, axis=axis, check_hermitian=True)
    raise ContractError(f"unknown direction {direction!r}")


def _move_to(x: Tensor, src: int, dst: int) -> Tensor:
    src, dst = src % x.ndim, dst % x.ndim
    if src == dst:
        return x
    axes = list(range(x.ndim))
    axes.insert(dst, axes.pop(src))
    return tn.transpose(x, tuple(axes))


# ---------------------------------------------------------------------------


@dataclass
class SpectralWeights:
    """Per-mode complex channel-mixing matrices ``R[k, out, in]``."""

    modes_kept: int
    R: ComplexTensor

    def __post_init__(self):
        shape = self.R.shape
        if len(shape) != 3 or shape[0] != self.modes_kept or shape[1] != shape[2]:
            raise DimensionError(f"R must be [modes_kept={self.modes_kept}, d_v, d_v], got {shape}")

    @property
    def width(self) -> int:
        return self.R.shape[1]

    @classmethod
    def init(cls, modes: int, width: int, rng: np.random.Generator) -> "SpectralWeights":
        scale = 1.0 / (width * width)
        re = Tensor(scale * rng.random((modes, width, width)), requires_grad=True)
        im = Tensor(scale * rng.random((modes, width, width)), requires_grad=True)
        return cls(modes, ComplexTensor(re, im))

    @classmethod
    def identity(cls, modes: int, width: int) -> "SpectralWeights":
        eye = np.broadcast_to(np.eye(width), (modes, width, width)).copy()
        return cls(modes, ComplexTensor(Tensor(eye), Tensor(np.zeros_like(eye))))


def spectral_conv(z: Tensor, w: SpectralWeights) -> Tensor:
    """Mix channels per retained frequency of ``z[B, T, d_v]``; drop the rest."""
    if z.ndim != 3:
        raise DimensionError(f"spectral_conv expects [B, T, d_v], got {z.shape}")
    T, width = z.shape[1], z.shape[2]
    if width != w.width:
        raise DimensionError(f"spectral_conv: input width {width} != weight width {w.width}")
    if w.modes_kept > n_freq(T):
        raise ContractError(f"{w.modes_kept} modes requested but a length-{T} axis has {n_freq(T)}")
    X = rdft(z, axis=1, modes=w.modes_kept)
    # complex product as one real matmul: [Xre, Xim] @ [[Re^T, Im^T], [-Im^T, Re^T]]
    rt = tn.transpose(w.R.re, (0, 2, 1))
    it = tn.transpose(w.R.im, (0, 2, 1))
    block = tn.concat([tn.concat([rt, it], axis=2), tn.concat([-it, rt], axis=2)], axis=1)
    stacked = tn.transpose(tn.concat([X.re, X.im], axis=2), (1, 0, 2))  # [K, B, 2d]
    mixed = tn.transpose(stacked @ block, (1, 0, 2))  # [B, K, 2d]
    yre, yim = mixed[:, :, :width], mixed[:, :, width:]
    return irdft(ComplexTensor(yre, yim), T, axis=1)


def parseval_check(x) -> tuple[float, float]:
    """(sum x^2, (1/T) sum |X_k|^2 over the full spectrum)."""
    x = tn.as_tensor(x)
    T = x.shape[-1]
    X = rdft(x).numpy()
    k = np.arange(X.shape[-1])
    mult = np.where((k == 0) | (2 * k == T), 1.0, 2.0)
    return float(np.sum(x.data**2)), float(np.sum(mult * np.abs(X) ** 2) / T)
