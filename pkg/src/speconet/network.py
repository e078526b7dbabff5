"""
Coefficient-predicting networks and their weak-form residual losses.

Both sub-networks share one shape: a valid, stride-1 convolution over the
input grid, a Swish activation, and a linear head,

    y = swish(b + K * x).ravel() @ W.

The velocity network keeps one convolution for a block of K steps and one
head per step. The correction network has one convolution and head per step.

Outputs are decoded into the unknowns of the weak-form systems:

* Legendre: preconditioned eigen-coordinates w (a = E C w).
* Fourier: complex coefficients from a real/imaginary channel pair, passed
  through the Hermitian projection and the Nyquist mask so that synthesized
  fields are real.

The losses are quadratic in the decoded unknowns, so their gradients are
2 A^T r pulled back through the decoder (a self-adjoint projection), the
head, the activation and the convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .basis import hermitian_part
from .discretization import Discretization


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x):
    return x * sigmoid(x)


def swish_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_shape(grid: tuple[int, ...], kernel: int) -> tuple[int, ...]:
    out = tuple(g - kernel + 1 for g in grid)
    if any(o < 1 for o in out):
        raise ValueError(f"kernel {kernel} is larger than the input grid {grid}")
    return out


def conv_windows(x: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding windows (B, Cin, *L, *k) of an input batch (B, Cin, *grid)."""
    m = x.ndim - 2
    conv_output_shape(x.shape[2:], kernel)
    return sliding_window_view(x, (kernel,) * m, axis=tuple(range(2, 2 + m)))


def conv_forward(win: np.ndarray, K: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pre-activations (B, Cout, *L) from windows and kernel (Cout, Cin, *k)."""
    m = K.ndim - 2
    B = win.shape[0]
    # contract over Cin and kernel offsets
    axes_w = [1] + list(range(2 + m, 2 + 2 * m))
    axes_k = [1] + list(range(2, 2 + m))
    out = np.tensordot(win, K, axes=(axes_w, axes_k))  # (B, *L, Cout)
    out = np.moveaxis(out, -1, 1)
    return out + b.reshape((1, -1) + (1,) * m)


def conv_backward(win: np.ndarray, dA: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kernel and bias gradients from dL/d(pre-activation) (B, Cout, *L)."""
    m = dA.ndim - 2
    axes_a = [0] + list(range(2, 2 + m))
    axes_w = [0] + list(range(2, 2 + m))
    dK = np.tensordot(dA, win, axes=(axes_a, axes_w))  # (Cout, Cin, *k)
    db = dA.sum(axis=tuple(axes_a))
    return dK, db


# ---------------------------------------------------------------------------
# Output decoding
# ---------------------------------------------------------------------------


class OutputMap:
    """Linear map from raw head outputs to weak-form unknowns.

    ``kind`` is "velocity" or "phi". The map is a coordinate reshaping, with
    pinned entries dropped (Legendre) or a Hermitian projection plus masks
    (Fourier). Its adjoint is used for gradients.
    """

    def __init__(self, disc: Discretization, kind: str, op):
        self.disc = disc
        self.kind = kind
        self.op = op
        d, n = disc.dim, disc.n
        self.comps = d if kind == "velocity" else 1
        if disc.periodic:
            self.unknown_shape = (n,) * d
            self.size = self.comps * 2 * n**d
            self.mask = op.mask
        else:
            self.unknown_shape = (n ** (d - 1), n)
            self.size = self.comps * n**d
            self.mask = op.pinned

    def _shape(self, S):
        return (S, self.comps) + self.unknown_shape if self.kind == "velocity" else (S,) + self.unknown_shape

    def decode(self, y: np.ndarray) -> np.ndarray:
        S = y.shape[0]
        d = self.disc
        if d.periodic:
            y = y.reshape((S, self.comps, 2) + self.unknown_shape)
            a = y[:, :, 0] + 1j * y[:, :, 1]
            a = np.where(self.mask, 0.0, hermitian_part(a, d.dim))
            return a if self.kind == "velocity" else a[:, 0]
        w = y.reshape(self._shape(S))
        return np.where(self.mask, 0.0, w)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Pull a gradient with respect to the unknowns back to raw outputs."""
        S = g.shape[0]
        d = self.disc
        if d.periodic:
            if self.kind != "velocity":
                g = g[:, None]
            ga = hermitian_part(np.where(self.mask, 0.0, g), d.dim)
            out = np.stack([ga.real, ga.imag], axis=2)
            return out.reshape(S, -1)
        return np.where(self.mask, 0.0, g).reshape(S, -1)

    def coeffs(self, unknowns: np.ndarray) -> np.ndarray:
        """Spectral coefficients from unknowns (a = E C w for Legendre)."""
        return self.op.coeffs(unknowns)

    def encode(self, coeffs: np.ndarray) -> np.ndarray:
        """Raw output vector whose decoding reproduces ``coeffs``."""
        S = coeffs.shape[0]
        w = self.op.to_w(coeffs)
        if self.disc.periodic:
            a = w if self.kind == "velocity" else w[:, None]
            return np.stack([a.real, a.imag], axis=2).reshape(S, -1)
        return w.reshape(S, -1)


def system_residual(op, w: np.ndarray, h: np.ndarray) -> np.ndarray:
    return op.apply(w) - h


def sq(r: np.ndarray) -> float:
    if np.iscomplexobj(r):
        return float(np.sum(r.real**2 + r.imag**2))
    return float(np.sum(r * r))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvHead:
    """One convolution with a stack of linear heads."""

    kernel: np.ndarray  # (Cout, Cin, *k)
    bias: np.ndarray  # (Cout,)
    heads: np.ndarray  # (H, F, O)
    input_scale: float = 1.0  # inputs are divided by this before the convolution

    @property
    def feature_len(self) -> int:
        return self.heads.shape[1]

    def copy(self) -> "ConvHead":
        return ConvHead(self.kernel.copy(), self.bias.copy(), self.heads.copy(), self.input_scale)


def feature_length(grid: tuple[int, ...], kernel: int, filters: int) -> int:
    return filters * int(np.prod(conv_output_shape(grid, kernel)))


def input_rms(x: np.ndarray) -> float:
    """Root-mean-square of a training batch, used as the fixed input scale."""
    s = float(np.sqrt(np.mean(np.square(x))))
    return s if s > 1e-300 else 1.0


def init_convhead(rng: np.random.Generator, in_channels: int, grid: tuple[int, ...],
                  kernel: int, filters: int, out_len: int, n_heads: int,
                  input_scale: float = 1.0) -> ConvHead:
    """Uniform(+-1/sqrt(fan_in)) weights, zero bias."""
    m = len(grid)
    fan_conv = in_channels * kernel**m
    K = rng.uniform(-1, 1, (filters, in_channels) + (kernel,) * m) / np.sqrt(fan_conv)
    F = feature_length(grid, kernel, filters)
    W = rng.uniform(-1, 1, (n_heads, F, out_len)) / np.sqrt(F)
    return ConvHead(K, np.zeros(filters), W, float(input_scale))


def features(p: ConvHead, x: np.ndarray):
    """Swish features (B, F) plus what the backward pass needs."""
    win = conv_windows(x / p.input_scale, p.kernel.shape[-1])
    A = conv_forward(win, p.kernel, p.bias)
    Z = swish(A).reshape(A.shape[0], -1)
    return Z, (win, A)


def forward(p: ConvHead, x: np.ndarray, head: int) -> np.ndarray:
    """Raw outputs (B, O) of head ``head`` for inputs (B, Cin, *grid)."""
    Z, _ = features(p, x)
    return Z @ p.heads[head]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class StepProblem:
    """Weak-form system for one network at one time step.

    ``x`` are network inputs (S, Cin, *grid); ``h`` the transformed right-hand
    sides in the unknowns' layout; ``omap`` decodes raw outputs.
    """

    x: np.ndarray
    h: np.ndarray
    omap: OutputMap
    scale: float = 1.0
    cache: dict = field(default_factory=dict)

    @property
    def op(self):
        return self.omap.op


def loss_and_grad(p: ConvHead, head: int, prob: StepProblem, train_conv: bool,
                  Z_fixed: np.ndarray | None = None):
    """Loss sum_s ||A w_s - h_s||^2 * scale and its gradients.

    Returns (loss, grads) where grads is a dict with "heads" (F, O) and, when
    ``train_conv``, "kernel" and "bias".
    """
    if Z_fixed is not None and not train_conv:
        Z, aux = Z_fixed, None
    else:
        Z, aux = features(p, prob.x)
    W = p.heads[head]
    y = Z @ W
    w = prob.omap.decode(y)
    r = system_residual(prob.op, w, prob.h)
    loss = prob.scale * sq(r)
    gw = 2.0 * prob.scale * _apply_adjoint(prob.op, r)
    gy = prob.omap.adjoint(gw)
    grads = {"heads": Z.T @ gy}
    if train_conv:
        win, A = aux
        dZ = (gy @ W.T).reshape(A.shape)
        dA = dZ * swish_grad(A)
        grads["kernel"], grads["bias"] = conv_backward(win, dA)
    return loss, grads


def _apply_adjoint(op, r):
    # both operator families are symmetric (real diagonal for Fourier)
    return op.apply(r)


def exact_unknowns(prob: StepProblem) -> np.ndarray:
    """Unknowns solving the step system exactly (the classical target)."""
    return prob.op.solve_w(prob.h)
