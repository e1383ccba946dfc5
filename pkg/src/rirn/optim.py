"""Training loss, ADAM and step-wise learning-rate annealing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _check_same_shape, _note_kink

__all__ = ["Param", "Adam", "LrSchedule", "l1_loss", "adam_step", "lr_at"]


class Param:
    """A named trainable tensor together with its ADAM moment buffers."""

    __slots__ = ("name", "value", "m", "v", "step_count")

    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, step={self.step_count})"


def l1_loss(pred, target):
    """Mean absolute error as a ``(1, 1, 1, 1)`` tensor.

    The subgradient at ``pred == target`` is taken as 0.
    """
    _check_same_shape(pred, target, "l1_loss")
    diff = pred.data - target.data
    _note_kink(diff)
    count = diff.size
    out = (np.sum(np.abs(diff), dtype=np.float64) / count).astype(pred.dtype).reshape(1, 1, 1, 1)
    sign = np.sign(diff)

    def _backward(g):
        scaled = sign * (g.reshape(()) / count)
        return scaled, -scaled

    return Tensor._result(out, (pred, target), _backward, "l1_loss")


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update applied in place.

    Gradients are left in place; clearing them is the caller's job.
    """
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise ValueError(f"adam_step: parameter {p.name!r} has no gradient")
    for p in params:
        g = p.value.grad
        p.step_count += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step_count)
        vhat = p.v / (1.0 - beta2 ** p.step_count)
        p.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)


@dataclass
class Adam:
    """Thin stateful wrapper so training code can hold one optimizer object."""

    params: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, lr):
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    milestones: tuple = field(default=())

    def __post_init__(self):
        ms = tuple((int(e), float(m)) for e, m in self.milestones)
        epochs = [e for e, _ in ms]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"milestone epochs must be strictly increasing, got {epochs}")
        for e, m in ms:
            if e < 0:
                raise ValueError(f"milestone epoch must be >= 0, got {e}")
            if not 0.0 < m <= 1.0:
                raise ValueError(f"milestone multiplier must lie in (0, 1], got {m}")
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch):
        return lr_at(self, epoch)


def lr_at(schedule, epoch):
    """Learning rate in effect during ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = schedule.initial_lr
    for e, mult in schedule.milestones:
        if e <= epoch:
            lr *= mult
    return lr
