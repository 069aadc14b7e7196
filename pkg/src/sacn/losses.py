"""Margin loss, reconstruction decoder and loss, and the combined objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import fan_in_spec, fully_connected, init_params
from .tensor import Rng, Tensor

RECON_WEIGHT = 0.0005  # per input value
SELECTION_RULES = ("longest-vector", "highest-coupling")


@dataclass(frozen=True)
class MarginConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")


def one_hot(labels, n_classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype or T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1
    return out


def margin_loss(lengths: Tensor, labels, cfg: MarginConfig = MarginConfig()) -> Tensor:
    """Per-sample margin loss for (B, J) capsule lengths and integer labels; shape (B,)."""
    data = lengths.data
    tol = 1e-6
    if np.any(data < -tol) or np.any(data > 1 + tol):
        raise ValueError("capsule lengths must lie in [0, 1]")
    t = one_hot(labels, lengths.shape[-1], dtype=lengths.dtype)
    present = T.square(T.relu(T.add(T.scale(lengths, -1.0), cfg.m_plus)))
    absent = T.square(T.relu(T.add(lengths, -cfg.m_minus)))
    weighted_absent = T.mul(absent, Tensor(cfg.lam * (1 - t), dtype=lengths.dtype))
    per_class = T.add(T.mul(present, Tensor(t)), weighted_absent)
    return T.sum_(per_class, axis=1)


def reconstruction_loss(image: Tensor | np.ndarray, recon: Tensor) -> Tensor:
    """Summed squared error per sample; image (B, ...) vs recon (B, D)."""
    target = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=recon.dtype))
    if target.size != recon.size or target.shape[0] != recon.shape[0]:
        raise ValueError(f"reconstruction_loss: shape mismatch {target.shape} vs {recon.shape}")
    target = T.reshape(target, recon.shape)
    return T.sum_(T.square(T.add(target, T.scale(recon, -1.0))), axis=1)


def total_loss(l_m, l_r, input_size: int, xi: float = RECON_WEIGHT):
    """L_T = L_M + xi * input_size * L_R; accepts floats or tensors."""
    if isinstance(l_m, Tensor) or isinstance(l_r, Tensor):
        return T.add(l_m, T.scale(l_r, xi * input_size))
    return l_m + xi * input_size * l_r


@dataclass
class LossBreakdown:
    l_m: float
    l_r: float
    l_t: float
    input_size: int
    xi: float = RECON_WEIGHT


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderParams:
    layers: list  # [(weight, bias), ...], last layer has sigmoid output

    @classmethod
    def create(cls, in_dim: int, hidden: tuple[int, int], out_dim: int, rng: Rng) -> "DecoderParams":
        sizes = [in_dim, *hidden, out_dim]
        layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            w = init_params(fan_in_spec(a), rng.child(f"decoder.fc{k}.w"), (a, b))
            layers.append((Tensor(w, requires_grad=True, name=f"decoder.fc{k}.w"),
                           Tensor(np.zeros((b,), dtype=w.dtype), requires_grad=True,
                                  name=f"decoder.fc{k}.b")))
        return cls(layers)

    @property
    def output_size(self) -> int:
        return self.layers[-1][0].shape[1]

    def named_parameters(self):
        return [(t.name, t) for pair in self.layers for t in pair]


def select_capsules(v: np.ndarray, couplings: np.ndarray | None, labels=None,
                    rule: str = "longest-vector") -> np.ndarray:
    """Class index whose capsule feeds the decoder, per sample.

    Training passes ``labels`` (the true class is always used).  Otherwise
    ``longest-vector`` takes the longest class capsule and
    ``highest-coupling`` the class with the largest total coupling
    sum_i c_ij; ties resolve to the lowest index.
    """
    if labels is not None:
        return np.asarray(labels, dtype=np.int64)
    if rule == "longest-vector":
        return np.argmax(np.linalg.norm(v, axis=-1), axis=-1)
    if rule == "highest-coupling":
        if couplings is None:
            raise ValueError("highest-coupling selection needs routing couplings")
        return np.argmax(couplings.sum(axis=1), axis=-1)
    raise ValueError(f"unknown selection rule {rule!r}; expected one of {SELECTION_RULES}")


def reconstruct(v: Tensor, selected: np.ndarray, decoder: DecoderParams) -> Tensor:
    """Zero every class capsule except ``selected`` and decode to (B, I_size) in (0, 1)."""
    b, j_caps, d = v.shape
    mask = np.zeros((b, j_caps, d), dtype=v.dtype)
    mask[np.arange(b), selected] = 1
    h = T.reshape(T.mul(v, Tensor(mask)), (b, j_caps * d))
    last = len(decoder.layers) - 1
    for k, (w, bias) in enumerate(decoder.layers):
        h = fully_connected(h, w, bias)
        h = T.sigmoid(h) if k == last else T.relu(h)
    return h
