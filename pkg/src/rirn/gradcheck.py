"""Finite-difference verification of backpropagated gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import CellConfig, init_params, weights
from .seeding import generator
from .sequence import sequence_loss

__all__ = ["GradResult", "NoSmoothPointError", "relative_error", "check_gradients", "cell_gradcheck"]


@dataclass(frozen=True)
class GradResult:
    name: str
    size: int
    rel_error: float
    max_abs_diff: float
    tol: float

    @property
    def ok(self):
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tol)

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        return f"{status:4} {self.name:<24} n={self.size:<6} rel={self.rel_error:.3e} max_abs={self.max_abs_diff:.3e}"


def relative_error(analytic, numeric, floor=1e-12):
    """``||a - n|| / max(||a||, ||n||)`` over all entries of a parameter."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_gradients(loss_fn, tensors, eps=1e-4, tol=1e-4):
    """Compare :func:`~rirn.tensor.backward` against central differences.

    ``loss_fn()`` must rebuild the graph from the current values of
    ``tensors`` (a ``{name: Tensor}`` mapping) and return a scalar tensor.
    """
    for t in tensors.values():
        t.grad = None
    T.backward(loss_fn())
    results = []
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = T.finite_diff_grad(loss_fn, t, eps)
        results.append(
            GradResult(name, t.data.size, relative_error(analytic, numeric), float(np.max(np.abs(analytic - numeric))), tol)
        )
        t.grad = None
    return results


class NoSmoothPointError(RuntimeError):
    pass


def _draw_point(config, seed, attempt, frames, size):
    params = init_params(config, seed=seed + 7919 * attempt, dtype=np.float64, scale=1.5, zero_heads=False)
    rng = generator(seed, "gradcheck-data", attempt)
    shape = (1, config.in_channels, size, size)
    blurry = [rng.random(shape) for _ in range(frames)]
    sharp = [rng.random(shape) for _ in range(frames)]
    return weights(params), blurry, sharp


def cell_gradcheck(base_cell="plain", variant="rirn", seed=0, frames=3, size=6, channels=4, eps=1e-4, tol=1e-4,
                   margin=None, max_attempts=200):
    """Check every parameter of one cell through a ``frames``-step unroll.

    Runs in float64 at a random point with every head randomly initialized.
    Points where some leaky-relu input or L1 residual lies within
    ``margin`` (default ``10 * eps``) of its kink are redrawn, since central
    differences straddling a kink do not estimate the derivative.
    """
    config = CellConfig.from_variant(variant, feat_channels=channels, hidden_channels=channels, base_cell=base_cell)
    margin = 10 * eps if margin is None else margin
    for attempt in range(max_attempts):
        p, blurry, sharp = _draw_point(config, seed, attempt, frames, size)
        with T.no_grad(), T.track_kinks() as kinks:
            sequence_loss(blurry, sharp, config, p)
        if min(kinks, default=np.inf) > margin:
            break
    else:
        raise NoSmoothPointError(f"no point with kink margin > {margin:g} in {max_attempts} draws")

    def loss_fn():
        return sequence_loss(blurry, sharp, config, p)

    return check_gradients(loss_fn, p, eps, tol)
