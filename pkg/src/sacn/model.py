"""The assembled network: feature conv -> attention (sacn mode only) -> capsules -> decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionBlockParams, AttentionIntermediates, attention_forward
from .capsules import (CapsuleLayerParams, PrimaryCapsConfig, RoutingState, capsule_lengths,
                       predictions, primary_capsules, route)
from .config import RunConfig
from .losses import (DecoderParams, LossBreakdown, MarginConfig, margin_loss, reconstruct,
                     reconstruction_loss, select_capsules, total_loss)
from .nn import InitSpec, conv2d, conv_output_size, fan_in_spec, init_params, power_iteration
from .tensor import Rng, Tensor


@dataclass
class ForwardResult:
    lengths: np.ndarray            # (B, J) class probabilities
    recon: np.ndarray              # (B, I_size)
    attention: AttentionIntermediates | None
    routing: RoutingState
    loss: Tensor | None = None     # batch-mean L_T, on the tape
    breakdown: LossBreakdown | None = None
    v: Tensor | None = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.lengths, axis=1)


class SacnModel:
    """Parameters plus forward pass for one :class:`RunConfig`.

    Every parameter draws from its own seed stream (derived from the run
    seed and the parameter's name), so the baseline and sacn variants of a
    config share identical values for every layer they have in common.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        m = config.model
        dtype = np.float64 if config.train.precision == "float64" else np.float32
        self.dtype = dtype
        rng = Rng(config.seed).child("init")
        with T.precision(dtype):
            k = m.feature_kernel
            fw = init_params(fan_in_spec(m.in_channels * k * k), rng.child("feature.w"),
                             (m.feature_channels, m.in_channels, k, k))
            self.feature_w = Tensor(fw, requires_grad=True, name="feature.w")
            self.feature_b = Tensor(np.zeros(m.feature_channels, dtype=dtype),
                                    requires_grad=True, name="feature.b")
            self.fh = conv_output_size(m.height, k, 1, 0)
            self.fw = conv_output_size(m.width, k, 1, 0)
            self.attention = None
            if m.mode == "sacn":
                self.attention = AttentionBlockParams.create(
                    m.feature_channels, rng, n_power_iters=m.spectral_iters)
                for w, state in self._spectral_pairs():
                    power_iteration(w.data, state)
            self.primary_cfg = PrimaryCapsConfig(kernel=m.primary_kernel,
                                                 n_capsule_types=m.primary_types,
                                                 capsule_dim=m.primary_dim,
                                                 stride=m.primary_stride)
            self.capsules = CapsuleLayerParams.create(
                m.feature_channels, self.fh, self.fw, m.n_classes, m.class_dim,
                self.primary_cfg, InitSpec(m.init_variance), rng)
            self.decoder = DecoderParams.create(
                m.n_classes * m.class_dim, (m.decoder_hidden1, m.decoder_hidden2),
                m.input_size, rng)
        self.margin = MarginConfig(config.loss.m_plus, config.loss.m_minus, config.loss.lam)

    # parameters -----------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("feature.w", self.feature_w), ("feature.b", self.feature_b)]
        if self.attention is not None:
            out += self.attention.named_parameters()
        out += self.capsules.named_parameters()
        out += self.decoder.named_parameters()
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def spectral_states(self) -> dict:
        return {} if self.attention is None else self.attention.spectral_states()

    def _spectral_pairs(self):
        a = self.attention
        return [(a.w_f, a.sn_f), (a.w_g, a.sn_g), (a.w_h, a.sn_h)]

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    # forward --------------------------------------------------------------
    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        m = self.config.model
        x = np.asarray(x)
        if x.ndim == 3 and m.in_channels == 1:
            x = x[:, None]
        expected = (m.in_channels, m.height, m.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"input layer: batch shape {x.shape} does not match (B, {expected})")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, labels=None, training: bool = False,
                keep_intermediates: bool = False) -> ForwardResult:
        """Run the network on a (B, C, H, W) batch.

        With ``labels`` the loss is computed and the decoder reconstructs the
        true class; otherwise the decoder input follows
        ``loss.recon_selection``.  ``training`` advances the spectral-norm
        power iteration before the weights are used.
        """
        cfg = self.config
        x = self._check_batch(x)
        with T.precision(self.dtype):
            xt = Tensor(x)
            feat = T.relu(conv2d(xt, self.feature_w, self.feature_b))
            inter = None
            if self.attention is not None:
                feat, inter = attention_forward(feat, self.attention, cfg.attention.softmax_axis,
                                                update_sn=training,
                                                keep_intermediates=keep_intermediates)
            u = primary_capsules(feat, self.capsules.primary_w, self.capsules.primary_b,
                                 self.primary_cfg)
            u_hat = predictions(u, self.capsules.transform)
            v, routing = route(u_hat, cfg.model.routing_iters)
            lengths = capsule_lengths(v)
            selected = select_capsules(v.data, routing.c, labels, cfg.loss.recon_selection)
            recon = reconstruct(v, selected, self.decoder)
            result = ForwardResult(lengths=lengths.data, recon=recon.data, attention=inter,
                                   routing=routing, v=v)
            if labels is not None:
                l_m = margin_loss(lengths, labels, self.margin)
                l_r = reconstruction_loss(xt, recon)
                l_t = total_loss(l_m, l_r, cfg.model.input_size, cfg.loss.xi)
                result.loss = T.mean(l_t)
                result.breakdown = LossBreakdown(
                    l_m=float(np.mean(l_m.data)), l_r=float(np.mean(l_r.data)),
                    l_t=float(np.mean(l_t.data)), input_size=cfg.model.input_size,
                    xi=cfg.loss.xi)
        return result

    def predict_lengths(self, x, batch_size: int = 256) -> np.ndarray:
        x = self._check_batch(x)
        out = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start:start + batch_size]).lengths)
        return np.concatenate(out, axis=0)

    # bookkeeping ----------------------------------------------------------
    def parameter_census(self) -> list[tuple[str, tuple, int]]:
        return [(name, t.shape, int(t.size)) for name, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(c for _, _, c in self.parameter_census())


def format_census(census) -> str:
    width = max(len(n) for n, _, _ in census)
    lines = [f"{name:<{width}}  {str(tuple(shape)):<20} {count:>10}" for name, shape, count in census]
    lines.append(f"{'total':<{width}}  {'':<20} {sum(c for _, _, c in census):>10}")
    return "\n".join(lines)
