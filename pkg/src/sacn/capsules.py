"""Primary capsules, squashing, and routing-by-agreement to class capsules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import InitSpec, conv2d, conv_output_size, fan_in_spec, init_params
from .tensor import Rng, Tensor


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / |s| along ``axis``; v = 0 where s = 0."""
    sd = s.data
    n2 = np.sum(sd * sd, axis=axis, keepdims=True)
    n = np.sqrt(n2)
    k = n / (1 + n2)  # |v| / |s|
    value = sd * k

    def back(g):
        # dv/ds = k I + (k'(n) / n) s s^T,  k'(n) = (1 - n^2) / (1 + n^2)^2
        safe = np.where(n > 0, n, 1)
        coef = np.where(n > 0, (1 - n2) / ((1 + n2) ** 2 * safe), 0)
        dot = np.sum(sd * g, axis=axis, keepdims=True)
        return ((k * g + coef * dot * sd).astype(s.dtype),)

    return Tensor.from_op(value.astype(s.dtype), (s,), back)


@dataclass
class PrimaryCapsConfig:
    kernel: int = 5
    n_capsule_types: int = 8
    capsule_dim: int = 8
    stride: int = 2

    def grid(self, height: int, width: int) -> tuple[int, int]:
        return (conv_output_size(height, self.kernel, self.stride, 0),
                conv_output_size(width, self.kernel, self.stride, 0))

    def num_capsules(self, height: int, width: int) -> int:
        gh, gw = self.grid(height, width)
        return self.n_capsule_types * gh * gw


def primary_capsules(y: Tensor, weight: Tensor, bias: Tensor, cfg: PrimaryCapsConfig) -> Tensor:
    """Conv the attended features into (B, num_caps, capsule_dim) squashed poses.

    Capsule index runs type-major: caps = type * (gh * gw) + location.
    """
    out = conv2d(y, weight, bias, stride=cfg.stride)
    b, _, gh, gw = out.shape
    t, d = cfg.n_capsule_types, cfg.capsule_dim
    poses = T.reshape(out, (b, t, d, gh * gw))
    poses = T.transpose(poses, (0, 1, 3, 2))
    poses = T.reshape(poses, (b, t * gh * gw, d))
    return squash(poses, axis=-1)


def predictions(u: Tensor, w: Tensor) -> Tensor:
    """u_hat[b, i, j] = W[i, j] @ u[b, i].

    u: (B, I, Din); W: (I, J, Dout, Din); result (B, I, J, Dout).
    """
    if u.ndim != 3 or w.ndim != 4 or u.shape[1] != w.shape[0] or u.shape[2] != w.shape[3]:
        raise ValueError(f"predictions: capsule poses {u.shape} incompatible with transform {w.shape}")
    b, i_caps, din = u.shape
    _, j_caps, dout, _ = w.shape
    wm = w.data.reshape(i_caps, j_caps * dout, din)
    ui = np.ascontiguousarray(u.data.transpose(1, 0, 2))  # (I, B, Din)
    value = np.matmul(ui, wm.transpose(0, 2, 1))  # (I, B, J*Dout)
    value = np.ascontiguousarray(value.transpose(1, 0, 2)).reshape(b, i_caps, j_caps, dout)

    def back(g):
        gi = np.ascontiguousarray(g.reshape(b, i_caps, j_caps * dout).transpose(1, 0, 2))
        gu = gw = None
        if u.requires_grad:
            gu = np.ascontiguousarray(np.matmul(gi, wm).transpose(1, 0, 2))
        if w.requires_grad:
            gw = _predictions_weight_grad(gi, ui).reshape(w.shape)
        return gu, gw

    return Tensor.from_op(value, (u, w), back)


def _predictions_weight_grad(gi: np.ndarray, ui: np.ndarray) -> np.ndarray:
    # (I, J*Dout, B) @ (I, B, Din)
    return np.matmul(gi.transpose(0, 2, 1), ui)


@dataclass
class RoutingState:
    """Final-iteration routing quantities as plain arrays.

    b, c: (B, I, J); s, v: (B, J, D).
    """

    b: np.ndarray
    c: np.ndarray
    s: np.ndarray
    v: np.ndarray
    n_iters: int


def route(u_hat: Tensor, n_iters: int = 1) -> tuple[Tensor, RoutingState]:
    """Routing-by-agreement over predictions u_hat of shape (B, I, J, D).

    Logits start at zero; each iteration takes c = softmax over classes,
    s_j = sum_i c_ij u_hat_ij, v_j = squash(s_j), and (except after the last
    iteration) adds the agreement u_hat_ij . v_j to the logits.  The loop is
    unrolled on the tape, so gradients flow through the couplings.
    """
    if n_iters < 1:
        raise ValueError(f"routing needs at least one iteration, got {n_iters}")
    b, i_caps, j_caps, d = u_hat.shape
    logits = Tensor(np.zeros((b, i_caps, j_caps), dtype=u_hat.dtype))
    u_jdi = T.transpose(u_hat, (0, 2, 3, 1))  # (B, J, D, I)
    u_jid = T.transpose(u_hat, (0, 2, 1, 3))  # (B, J, I, D)
    for it in range(n_iters):
        c = T.softmax(logits, axis=2)
        c_col = T.reshape(T.transpose(c, (0, 2, 1)), (b, j_caps, i_caps, 1))
        s = T.reshape(T.matmul(u_jdi, c_col), (b, j_caps, d))
        v = squash(s, axis=-1)
        if it < n_iters - 1:
            agree = T.matmul(u_jid, T.reshape(v, (b, j_caps, d, 1)))  # (B, J, I, 1)
            logits = T.add(logits, T.transpose(T.reshape(agree, (b, j_caps, i_caps)), (0, 2, 1)))
    state = RoutingState(b=logits.data, c=c.data, s=s.data, v=v.data, n_iters=n_iters)
    return v, state


def capsule_lengths(v: Tensor) -> Tensor:
    return T.l2norm(v, axis=-1)


def classify(lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class and per-class probability (the capsule length).

    Works on a single (J,) vector or a (B, J) batch; ties go to the lowest
    class index.
    """
    lengths = np.asarray(lengths)
    if lengths.shape[-1] < 1:
        raise ValueError("classify needs at least one class")
    return np.argmax(lengths, axis=-1), lengths


@dataclass
class CapsuleLayerParams:
    primary_w: Tensor
    primary_b: Tensor
    transform: Tensor  # (I, J, Dout, Din)

    @classmethod
    def create(cls, in_channels: int, height: int, width: int, n_classes: int, out_dim: int,
               cfg: PrimaryCapsConfig, init: InitSpec, rng: Rng) -> "CapsuleLayerParams":
        n_out = cfg.n_capsule_types * cfg.capsule_dim
        fan_in = in_channels * cfg.kernel * cfg.kernel
        pw = init_params(fan_in_spec(fan_in), rng.child("primary.w"),
                         (n_out, in_channels, cfg.kernel, cfg.kernel))
        pb = np.zeros((n_out,), dtype=pw.dtype)
        n_caps = cfg.num_capsules(height, width)
        w = init_params(init, rng.child("caps.w"), (n_caps, n_classes, out_dim, cfg.capsule_dim))
        return cls(Tensor(pw, requires_grad=True, name="primary.w"),
                   Tensor(pb, requires_grad=True, name="primary.b"),
                   Tensor(w, requires_grad=True, name="caps.w"))

    def named_parameters(self):
        return [(t.name, t) for t in (self.primary_w, self.primary_b, self.transform)]
