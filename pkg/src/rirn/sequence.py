"""Unrolling the cell over a clip and one full-BPTT training step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import CellState, rirn_cell_step, weights
from .optim import l1_loss
from .tensor import Tensor

__all__ = ["UnrollConfig", "SequenceOutput", "init_states", "run_sequence", "sequence_loss", "train_step"]


@dataclass(frozen=True)
class UnrollConfig:
    unroll_len: int = 8
    batch: int = 4
    detach_between_clips: bool = True

    def __post_init__(self):
        if self.unroll_len < 2:
            raise ValueError("unroll_len must be >= 2")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.detach_between_clips:
            raise ValueError("state never carries across clips")


@dataclass
class SequenceOutput:
    outputs: list
    final_state: CellState
    maps: list  # per frame: (w, w~) or None


def init_states(batch, spatial, config, dtype=np.float32):
    """All-zero carry for ``batch`` sequences at ``spatial = (h, w)``."""
    h, w = spatial
    if batch < 1 or h < 1 or w < 1:
        raise ValueError(f"init_states: dimensions must be >= 1, got batch={batch}, spatial={spatial}")
    ch, c = config.hidden_channels, config.feat_channels
    return CellState(
        h=Tensor(np.zeros((batch, ch, h, w), dtype)),
        h_tilde=Tensor(np.zeros((batch, ch, h, w), dtype)),
        f_tilde=Tensor(np.zeros((batch, c, h, w), dtype)),
        lstm_c=Tensor(np.zeros((batch, ch, h, w), dtype)) if config.base_cell == "lstm" else None,
    )


def _as_tensor(frame, dtype):
    if isinstance(frame, Tensor):
        return frame if frame.dtype == dtype else Tensor(frame.data.astype(dtype))
    arr = np.asarray(frame, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def run_sequence(frames, config, p, state=None, dtype=None):
    """Apply :func:`~rirn.cells.rirn_cell_step` causally over ``frames``.

    ``frames`` is a list of ``(n, c, h, w)`` tensors or arrays. ``p`` may
    be a ``{name: Param}`` or ``{name: Tensor}`` mapping.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("run_sequence: need at least one frame")
    p = _tensor_map(p)
    if dtype is None:
        dtype = next(iter(p.values())).dtype
    frames = [_as_tensor(f, dtype) for f in frames]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise T.ShapeError(f"run_sequence: frame {i} has shape {f.shape}, expected {shape}")
    if state is None:
        state = init_states(shape[0], shape[2:], config, dtype)
    outputs, maps = [], []
    for f in frames:
        out, state, m = rirn_cell_step(f, state, config, p, return_maps=True)
        outputs.append(out)
        maps.append(m)
    return SequenceOutput(outputs, state, maps)


def _tensor_map(p):
    first = next(iter(p.values()))
    return p if isinstance(first, Tensor) else weights(p)


def sequence_loss(blurry, sharp, config, p):
    """Mean over frames of the per-frame L1 loss, as a scalar tensor."""
    p = _tensor_map(p)
    dtype = next(iter(p.values())).dtype
    res = run_sequence(blurry, config, p, dtype=dtype)
    total = None
    for out, target in zip(res.outputs, sharp):
        term = l1_loss(out, _as_tensor(target, dtype))
        total = term if total is None else T.add(total, term)
    n = len(res.outputs)
    scale = Tensor(np.full((1, 1, 1, 1), 1.0 / n, dtype=dtype))
    return T.mul(total, scale)


def train_step(clip, config, params, optimizer, lr):
    """Forward unroll, one backward through the whole window, one ADAM step.

    ``clip`` is a :class:`~rirn.data.SequenceSample` (or anything with
    equal-length ``blurry`` and ``sharp`` lists of ``(n, 3, h, w)``
    frames). Returns the loss before the update.
    """
    blurry, sharp = clip.blurry, clip.sharp
    if len(blurry) != len(sharp):
        raise ValueError("train_step: blurry and sharp lengths differ")
    optimizer.zero_grad()
    loss = sequence_loss(blurry, sharp, config, params)
    T.backward(loss)
    optimizer.step(lr)
    optimizer.zero_grad()
    return float(loss.data.reshape(()))
