"""Recurrent cell blocks for recurrence-in-recurrence video deblurring.

A frame step runs a base recurrent encoder (plain, GRU or LSTM) that emits
a feature ``f_t`` and hidden state ``h_t``. Two optional blocks supplement
them:

* the inner-recurrence module (IRM) runs a second recurrence over the
  sequence of hidden states, carrying a long-range memory ``h~_t``;
* temporal blending mixes ``f_t`` with the previous blended feature
  ``f~_{t-1}`` under per-pixel attention. Adaptive blending (ATB) uses two
  independent non-negative maps; dynamic blending (DTB) uses ``w`` and
  ``1 - w``.

The reconstructor concatenates the enabled streams and predicts a residual
that is added to the blurry input.

All forward functions take ``p``, a mapping from parameter name to
:class:`~rirn.tensor.Tensor`; see :func:`layer_specs` for the names.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .optim import Param
from .seeding import generator
from .tensor import ShapeError, Tensor

__all__ = [
    "VARIANTS",
    "BASE_CELLS",
    "CellConfig",
    "CellState",
    "LayerSpec",
    "layer_specs",
    "init_params",
    "weights",
    "encoder_forward",
    "irm_forward",
    "atb_forward",
    "dtb_forward",
    "reconstructor_forward",
    "conv_gru_step",
    "conv_lstm_step",
    "rirn_cell_step",
    "state_nbytes",
    "FeatureCache",
]

LRELU_ALPHA = 0.1

VARIANTS = {
    "baseline": dict(use_irm=False, use_atb=False, use_dtb=False),
    "irm": dict(use_irm=True, use_atb=False, use_dtb=False),
    "atb": dict(use_irm=False, use_atb=True, use_dtb=False),
    "dtb": dict(use_irm=False, use_atb=False, use_dtb=True),
    "rirn": dict(use_irm=True, use_atb=True, use_dtb=False),
}
BASE_CELLS = ("plain", "gru", "lstm")


@dataclass(frozen=True)
class CellConfig:
    in_channels: int = 3
    feat_channels: int = 16
    hidden_channels: int = 16
    use_irm: bool = True
    use_atb: bool = True
    use_dtb: bool = False
    base_cell: str = "plain"

    def __post_init__(self):
        if self.in_channels < 1 or self.feat_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.use_atb and self.use_dtb:
            raise ValueError("use_atb and use_dtb are mutually exclusive")
        if self.base_cell not in BASE_CELLS:
            raise ValueError(f"base_cell must be one of {BASE_CELLS}, got {self.base_cell!r}")

    @classmethod
    def from_variant(cls, variant, **kwargs):
        try:
            flags = VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(**flags, **kwargs)

    @property
    def variant(self):
        for name, flags in VARIANTS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "custom"

    @property
    def uses_blending(self):
        return self.use_atb or self.use_dtb

    @property
    def blend_channels(self):
        return max(1, self.feat_channels // 2)

    @property
    def recon_in_channels(self):
        c, ch = self.feat_channels, self.hidden_channels
        return c + ch + (c if self.uses_blending else 0) + (ch if self.use_irm else 0)

    def with_variant(self, variant):
        return replace(self, **VARIANTS[variant])


@dataclass
class CellState:
    """Recurrent carry between frames of one clip."""

    h: Tensor
    h_tilde: Tensor
    f_tilde: Tensor
    lstm_c: Tensor | None = None

    def tensors(self):
        out = [self.h, self.h_tilde, self.f_tilde]
        if self.lstm_c is not None:
            out.append(self.lstm_c)
        return out


@dataclass(frozen=True)
class LayerSpec:
    name: str
    out_channels: int
    in_channels: int
    kernel: int
    gain: float = 1.0
    zero_init: bool = False


_LRELU_GAIN = float(np.sqrt(2.0 / (1.0 + LRELU_ALPHA**2)))


def layer_specs(config):
    """Convolution layers of the model described by ``config``, in forward order."""
    c, ch, cin = config.feat_channels, config.hidden_channels, config.in_channels
    g = _LRELU_GAIN
    specs = []
    if config.base_cell == "plain":
        specs += [
            LayerSpec("enc.conv1", c, cin + ch, 5, g),
            LayerSpec("enc.conv2", c, c, 3, g),
            LayerSpec("enc.feat", c, c, 3),
            LayerSpec("enc.hidden", ch, c, 3),
        ]
    elif config.base_cell == "gru":
        specs += [
            LayerSpec("gru.embed", c, cin, 5, g),
            LayerSpec("gru.gates", 2 * ch, c + ch, 3),
            LayerSpec("gru.cand", ch, c + ch, 3),
            LayerSpec("gru.readout", c, ch, 3),
        ]
    else:
        specs += [
            LayerSpec("lstm.embed", c, cin, 5, g),
            LayerSpec("lstm.gates", 4 * ch, c + ch, 3),
            LayerSpec("lstm.readout", c, ch, 3),
        ]
    if config.use_irm:
        specs += [
            LayerSpec("irm.conv1", ch, 2 * ch, 3, g),
            LayerSpec("irm.conv2", ch, ch, 3),
        ]
    if config.uses_blending:
        cb = config.blend_channels
        specs += [
            LayerSpec("blend.conv1", cb, 2 * c, 3, g),
            LayerSpec("blend.conv2", 2, cb, 3, zero_init=True),
        ]
    specs += [
        LayerSpec("recon.conv1", c, config.recon_in_channels, 3, g),
        LayerSpec("recon.conv2", c, c, 3, g),
        LayerSpec("recon.out", cin, c, 3, zero_init=True),
    ]
    return specs


def init_params(config, seed=0, dtype=np.float32, scale=1.0, zero_heads=True):
    """Fan-in scaled normal weights and zero biases, keyed by parameter name.

    Every layer draws from its own stream keyed by its name, so layers
    shared between two variants start from identical values under the same
    seed. With ``zero_heads`` the attention head and the reconstructor's
    output layer start at zero, making a fresh model the identity on frames
    with blending weights at their neutral values. ``zero_heads=False`` and
    a larger ``scale`` give the generic points used for gradient checks.
    """
    params = {}
    for spec in layer_specs(config):
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        rng = generator(seed, "init:" + spec.name)
        if spec.zero_init and zero_heads:
            w = np.zeros(shape)
            b = np.zeros(spec.out_channels)
        else:
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            w = rng.standard_normal(shape) * (scale * spec.gain / np.sqrt(fan_in))
            b = np.zeros(spec.out_channels) if zero_heads else rng.standard_normal(spec.out_channels) * 0.1 * scale
        params[spec.name + ".weight"] = Param(spec.name + ".weight", w.astype(dtype))
        params[spec.name + ".bias"] = Param(spec.name + ".bias", b.reshape(1, -1, 1, 1).astype(dtype))
    return params


def weights(params):
    """Name -> tensor view of a ``{name: Param}`` mapping."""
    return {name: prm.value for name, prm in params.items()}


def _conv(p, name, x):
    w = p[name + ".weight"]
    return T.conv2d(x, w, p[name + ".bias"], stride=1, padding=w.shape[2] // 2)


def _lrelu(x):
    return T.leaky_relu(x, LRELU_ALPHA)


def _expect_channels(x, channels, what):
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected c={channels} channels, got c={x.shape[1]}")


def _expect_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# base recurrent cells


def encoder_forward(frame, h_prev, p):
    """Plain recurrent encoder: ``(B_t, h_{t-1}) -> (f_t, h_t)``."""
    x = T.concat_channels([frame, h_prev])
    x = _lrelu(_conv(p, "enc.conv1", x))
    x = _lrelu(_conv(p, "enc.conv2", x))
    f = _conv(p, "enc.feat", x)
    h = T.tanh(_conv(p, "enc.hidden", x))
    return f, h


def conv_gru_step(frame, h_prev, p):
    """Convolutional GRU; returns ``(f_t, h_t)`` with ``f_t`` read out of ``h_t``."""
    ch = h_prev.shape[1]
    x = _lrelu(_conv(p, "gru.embed", frame))
    gates = T.sigmoid(_conv(p, "gru.gates", T.concat_channels([x, h_prev])))
    reset = T.slice_channels(gates, 0, ch)
    update = T.slice_channels(gates, ch, 2 * ch)
    cand = T.tanh(_conv(p, "gru.cand", T.concat_channels([x, T.mul(reset, h_prev)])))
    h = T.add(T.mul(T.one_minus(update), h_prev), T.mul(update, cand))
    f = _conv(p, "gru.readout", h)
    return f, h


def conv_lstm_step(frame, h_prev, c_prev, p):
    """Convolutional LSTM; returns ``(f_t, h_t, c_t)``."""
    ch = h_prev.shape[1]
    _expect_same(h_prev, c_prev, "conv_lstm_step")
    x = _lrelu(_conv(p, "lstm.embed", frame))
    z = _conv(p, "lstm.gates", T.concat_channels([x, h_prev]))
    i = T.sigmoid(T.slice_channels(z, 0, ch))
    fg = T.sigmoid(T.slice_channels(z, ch, 2 * ch))
    o = T.sigmoid(T.slice_channels(z, 2 * ch, 3 * ch))
    g = T.tanh(T.slice_channels(z, 3 * ch, 4 * ch))
    c = T.add(T.mul(fg, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    f = _conv(p, "lstm.readout", h)
    return f, h, c


# ---------------------------------------------------------------------------
# supplementary blocks


def irm_forward(h, h_tilde_prev, p):
    """Inner recurrence over hidden states: ``(h_t, h~_{t-1}) -> h~_t``.

    The carry is a single tensor shaped like ``h_t``; no history is kept.
    """
    _expect_same(h, h_tilde_prev, "irm_forward")
    x = _lrelu(_conv(p, "irm.conv1", T.concat_channels([h, h_tilde_prev])))
    return T.tanh(_conv(p, "irm.conv2", x))


def _blend_logits(f, f_tilde_prev, p):
    _expect_same(f, f_tilde_prev, "blending")
    x = _lrelu(_conv(p, "blend.conv1", T.concat_channels([f, f_tilde_prev])))
    return _conv(p, "blend.conv2", x)


def atb_forward(f, f_tilde_prev, p):
    """Adaptive temporal blending.

    ``f~_t = w~ * f~_{t-1} + w * f_t`` where both single-channel maps are
    softplus outputs: non-negative, and free to sum to more or less than 1.
    Returns ``(f~_t, w, w~)``.
    """
    logits = _blend_logits(f, f_tilde_prev, p)
    w = T.softplus(T.slice_channels(logits, 0, 1))
    w_tilde = T.softplus(T.slice_channels(logits, 1, 2))
    out = T.add(T.broadcast_mul(w_tilde, f_tilde_prev), T.broadcast_mul(w, f))
    return out, w, w_tilde


def dtb_forward(f, f_tilde_prev, p):
    """Sum-to-one blending: ``w = sigmoid(.)``, ``w~ = 1 - w``. Returns ``(f~_t, w, w~)``."""
    logits = _blend_logits(f, f_tilde_prev, p)
    w = T.sigmoid(T.slice_channels(logits, 0, 1))
    w_tilde = T.one_minus(w)
    out = T.add(T.broadcast_mul(w, f), T.broadcast_mul(w_tilde, f_tilde_prev))
    return out, w, w_tilde


def reconstructor_forward(f, h, f_tilde, h_tilde, frame, p):
    """Predict ``L_t = B_t + R(concat of enabled streams)``.

    Pass ``None`` for streams of blocks that are switched off. The output is
    not clamped.
    """
    streams = [t for t in (f, h, f_tilde, h_tilde) if t is not None]
    x = T.concat_channels(streams)
    expected = p["recon.conv1.weight"].shape[1]
    if x.shape[1] != expected:
        raise ShapeError(f"reconstructor_forward: concatenated c={x.shape[1]} but recon.conv1 expects c={expected}")
    x = _lrelu(_conv(p, "recon.conv1", x))
    x = _lrelu(_conv(p, "recon.conv2", x))
    residual = _conv(p, "recon.out", x)
    _expect_same(residual, frame, "reconstructor_forward")
    return T.add(frame, residual)


# ---------------------------------------------------------------------------
# full step


def rirn_cell_step(frame, state, config, p, return_maps=False):
    """One frame of the composed cell.

    Runs the base cell, then IRM on ``(h_t, h~_{t-1})`` and ATB/DTB on
    ``(f_t, f~_{t-1})`` when enabled, then the reconstructor. Returns
    ``(L_t, new_state)``, plus ``(w, w~)`` (or ``None``) when
    ``return_maps`` is set.
    """
    _expect_channels(frame, config.in_channels, "rirn_cell_step frame")
    if frame.shape[2:] != state.h.shape[2:] or frame.shape[0] != state.h.shape[0]:
        raise ShapeError(f"rirn_cell_step: frame {frame.shape} does not match state {state.h.shape}")
    c_new = None
    if config.base_cell == "plain":
        f, h = encoder_forward(frame, state.h, p)
    elif config.base_cell == "gru":
        f, h = conv_gru_step(frame, state.h, p)
    else:
        f, h, c_new = conv_lstm_step(frame, state.h, state.lstm_c, p)

    h_tilde = irm_forward(h, state.h_tilde, p) if config.use_irm else None

    maps = None
    f_tilde = None
    if config.use_atb:
        f_tilde, w, w_tilde = atb_forward(f, state.f_tilde, p)
        maps = (w, w_tilde)
    elif config.use_dtb:
        f_tilde, w, w_tilde = dtb_forward(f, state.f_tilde, p)
        maps = (w, w_tilde)

    out = reconstructor_forward(f, h, f_tilde, h_tilde, frame, p)
    new_state = CellState(
        h=h,
        h_tilde=h_tilde if h_tilde is not None else state.h_tilde,
        f_tilde=f_tilde if f_tilde is not None else state.f_tilde,
        lstm_c=c_new,
    )
    if return_maps:
        return out, new_state, maps
    return out, new_state


# ---------------------------------------------------------------------------
# memory accounting


def state_nbytes(state):
    """Bytes held by the recurrent carry."""
    return sum(t.nbytes for t in state.tensors())


@dataclass
class FeatureCache:
    """Reference stand-in for attention over a cache of past features.

    Holds the most recent ``k`` features, which is what such a scheme must
    retain between frames. Only the retained-memory footprint is modelled.
    """

    k: int
    _items: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("cache size k must be >= 1")
        self._items = deque(maxlen=self.k)

    def push(self, feat):
        self._items.append(feat)

    def __len__(self):
        return len(self._items)

    @property
    def nbytes(self):
        return sum(t.nbytes for t in self._items)
