"""Convolution, fully-connected layers, initialisation and spectral normalisation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng, Tensor, get_default_dtype, scale


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"conv: extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"gives a non-integral or empty output ({span}/{stride} + 1)")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, H, W) -> (B, C*kh*kw, Ho*Wo), filled one kernel tap at a time
    b, c = x.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B, C, H, W) map with an (O, C, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input has {c} channels but the kernel expects {wc}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise_conv(x, weight, bias)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)  # (B, O, Ho*Wo)
    if bias is not None:
        out += bias.data[:, None]
    value = out.reshape(b, o, ho, wo)

    def back(g):
        gx = gw = gb = None
        g2 = g.reshape(b, o, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gxp = _col2im(np.matmul(wmat.T, g2), xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(value, parents, back)


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    # adjoint of _im2col: scatter-add each tap back onto the padded input
    b, c = xp_shape[:2]
    taps = gcols.reshape(b, c, kh, kw, ho, wo)
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + hs:stride, j:j + ws:stride] += taps[:, :, i, j]
    return gxp


def _pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    b, c, h, w = x.shape
    o = weight.shape[0]
    wmat = weight.data.reshape(o, c)
    xm = x.data.reshape(b, c, h * w)
    out = np.matmul(wmat, xm)  # (B, O, N)
    if bias is not None:
        out += bias.data[:, None]
    value = out.reshape(b, o, h, w)

    def back(g):
        g2 = g.reshape(b, o, h * w)
        gx = np.matmul(wmat.T, g2).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, xm.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(value, parents, back)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape (B, D) and weight of shape (D, D')."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected: incompatible shapes {x.shape} and {weight.shape}")
    value = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"fully_connected: bias shape {bias.shape} vs {weight.shape[1]} outputs")
        value = value + bias.data

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(value, parents, back)


# ---------------------------------------------------------------------------
# initialisation


@dataclass(frozen=True)
class InitSpec:
    """Zero-mean normal initialiser described by its variance."""

    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"init variance must be > 0, got {self.variance}")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def init_params(spec: InitSpec, rng: Rng, shape) -> np.ndarray:
    """I.i.d. draws from N(0, spec.variance)."""
    return rng.normal(spec.std, shape, dtype=get_default_dtype())


def fan_in_spec(fan_in: int) -> InitSpec:
    """He-style variance 2/fan_in, used for the plain conv and dense layers."""
    return InitSpec(2.0 / fan_in)


# ---------------------------------------------------------------------------
# spectral normalisation


@dataclass
class SpectralNormState:
    """Power-iteration state for one weight matrix.

    ``sigma`` is the estimate from the most recent refresh; evaluation uses it
    as-is so the normalised weight is a fixed rescaling of the raw weight.
    """

    u: np.ndarray
    n_power_iters: int = 1
    sigma: float = 1.0
    degenerate: bool = False
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, out_dim: int, rng: Rng, n_power_iters: int = 1) -> "SpectralNormState":
        u = rng.normal(1.0, (out_dim,), dtype=np.float64)
        return cls(u=u / np.linalg.norm(u), n_power_iters=n_power_iters)


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a)
    return a / n if n > 0 else a


def power_iteration(w: np.ndarray, state: SpectralNormState, n_iters: int | None = None) -> float:
    """Refresh ``state`` in place from matrix ``w`` (rows = outputs); return sigma."""
    mat = w.reshape(w.shape[0], -1).astype(np.float64)
    if not np.any(mat):
        if not state.degenerate:
            warnings.warn("spectral normalisation of an all-zero matrix; weight left unchanged",
                          RuntimeWarning, stacklevel=3)
        state.degenerate = True
        state.sigma = 1.0
        return state.sigma
    state.degenerate = False
    u = state.u
    v = state.v
    for _ in range(n_iters or state.n_power_iters):
        v = _unit(mat.T @ u)
        u = _unit(mat @ v)
    state.u, state.v = u, v
    state.sigma = float(u @ mat @ v)
    return state.sigma


def spectral_normalize(w: Tensor, state: SpectralNormState, update: bool = True,
                       n_iters: int | None = None) -> Tensor:
    """Return ``w / sigma``.

    With ``update`` the power iteration advances first.  sigma is a constant
    for backprop: no gradient flows through the power iteration.
    """
    if update:
        power_iteration(w.data, state, n_iters)
    if state.degenerate:
        return w
    return scale(w, 1.0 / state.sigma)
