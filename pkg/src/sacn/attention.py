"""Non-local self-attention block placed between the feature conv and the primary capsules.

For a feature map x with C channels and N = H*W locations::

    f = W_f x,  g = W_g x          (C -> C/8, 1x1 convs)
    h = W_h x                      (C -> C,   1x1 conv)
    eta[i, j]  = f_i . g_j
    beta[:, j] = softmax over i of eta[:, j]
    o_j        = sum_i beta[i, j] h_i
    y          = alpha * o + x     (alpha starts at exactly 0)

All three projections are spectrally normalised and carry no bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import SpectralNormState, conv2d, fan_in_spec, init_params, spectral_normalize
from .tensor import Rng, Tensor

SOFTMAX_AXES = ("i", "j")


def reduced_channels(channels: int) -> int:
    return max(1, channels // 8)


@dataclass
class AttentionBlockParams:
    w_f: Tensor
    w_g: Tensor
    w_h: Tensor
    alpha: Tensor
    sn_f: SpectralNormState
    sn_g: SpectralNormState
    sn_h: SpectralNormState

    @classmethod
    def create(cls, channels: int, rng: Rng, prefix: str = "attention",
               n_power_iters: int = 1) -> "AttentionBlockParams":
        reduced = reduced_channels(channels)
        spec = fan_in_spec(channels)

        def weight(name, out_ch):
            data = init_params(spec, rng.child(f"{prefix}.{name}"), (out_ch, channels, 1, 1))
            return Tensor(data, requires_grad=True, name=f"{prefix}.{name}")

        def sn(name, out_ch):
            return SpectralNormState.create(out_ch, rng.child(f"{prefix}.{name}.sn"), n_power_iters)

        dtype = T.get_default_dtype()
        return cls(
            w_f=weight("w_f", reduced), w_g=weight("w_g", reduced), w_h=weight("w_h", channels),
            alpha=Tensor(np.zeros((1,), dtype=dtype), requires_grad=True, name=f"{prefix}.alpha"),
            sn_f=sn("w_f", reduced), sn_g=sn("w_g", reduced), sn_h=sn("w_h", channels),
        )

    @property
    def channels(self) -> int:
        return self.w_h.shape[0]

    def named_parameters(self):
        return [(t.name, t) for t in (self.w_f, self.w_g, self.w_h, self.alpha)]

    def spectral_states(self):
        return {self.w_f.name: self.sn_f, self.w_g.name: self.sn_g, self.w_h.name: self.sn_h}


@dataclass
class AttentionIntermediates:
    """Per-batch snapshots (plain arrays) of the block's internal maps.

    Shapes: eta and beta (B, N, N); o and y (B, C, N).
    """

    eta: np.ndarray
    beta: np.ndarray
    o: np.ndarray
    y: np.ndarray
    height: int
    width: int


def _projections(x: Tensor, p: AttentionBlockParams, update_sn: bool):
    b, c, h, w = x.shape
    if c != p.channels:
        raise ValueError(f"attention: input has {c} channels, block built for {p.channels}")
    n = h * w
    wf = spectral_normalize(p.w_f, p.sn_f, update=update_sn)
    wg = spectral_normalize(p.w_g, p.sn_g, update=update_sn)
    wh = spectral_normalize(p.w_h, p.sn_h, update=update_sn)
    f = T.reshape(conv2d(x, wf), (b, wf.shape[0], n))
    g = T.reshape(conv2d(x, wg), (b, wg.shape[0], n))
    hx = T.reshape(conv2d(x, wh), (b, c, n))
    return f, g, hx


def attention_scores(f: Tensor, g: Tensor) -> Tensor:
    """eta[b, i, j] = f[b, :, i] . g[b, :, j] from (B, C', N) projections."""
    return T.matmul(T.transpose(f, (0, 2, 1)), g)


def attention_map(eta: Tensor, softmax_axis: str = "i") -> Tensor:
    """Softmax of the scores.

    ``"i"`` normalises each column over the first index (every beta[:, j]
    sums to 1); ``"j"`` normalises each row instead.
    """
    if softmax_axis not in SOFTMAX_AXES:
        raise ValueError(f"softmax_axis must be one of {SOFTMAX_AXES}, got {softmax_axis!r}")
    return T.softmax(eta, axis=1 if softmax_axis == "i" else 2)


def attention_output(beta: Tensor, hx: Tensor) -> Tensor:
    """o[b, :, j] = sum_i beta[b, i, j] * hx[b, :, i]."""
    return T.matmul(hx, beta)


def attention_forward(x: Tensor, p: AttentionBlockParams, softmax_axis: str = "i",
                      update_sn: bool = False, keep_intermediates: bool = False):
    """Return ``(y, intermediates)``; intermediates is None unless requested."""
    b, c, h, w = x.shape
    f, g, hx = _projections(x, p, update_sn)
    eta = attention_scores(f, g)
    beta = attention_map(eta, softmax_axis)
    o = attention_output(beta, hx)
    o_map = T.reshape(o, (b, c, h, w))
    y = T.add(T.mul(p.alpha, o_map), x)
    inter = None
    if keep_intermediates:
        inter = AttentionIntermediates(
            eta=eta.data.copy(), beta=beta.data.copy(), o=o.data.copy(),
            y=y.data.reshape(b, c, h * w).copy(), height=h, width=w)
    return y, inter


def export_attention(beta: np.ndarray, location: int, height: int, width: int) -> np.ndarray:
    """Column ``location`` of a (N, N) map as an (H, W) image min-max scaled to [0, 1].

    A constant column has no range and maps to all zeros.
    """
    beta = np.asarray(beta)
    n = height * width
    if beta.shape != (n, n):
        raise ValueError(f"attention map shape {beta.shape} does not match {height}x{width}")
    if not 0 <= location < n:
        raise IndexError(f"query location {location} outside 0..{n - 1}")
    col = beta[:, location].reshape(height, width).astype(np.float64)
    lo, hi = col.min(), col.max()
    if hi == lo:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)
