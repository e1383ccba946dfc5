"""Dense NCHW tensors with a small reverse-mode autodiff engine.

Every op here returns a new :class:`Tensor` whose ``_parents`` and
``_backward`` fields record how to push an upstream gradient back to its
inputs. :func:`backward` orders the recorded graph topologically and
visits each node once, summing the contributions of all consumers.

Only the operations needed by the recurrent deblurring cells exist. Data
stays in whatever float dtype the inputs carry, so gradient checks run in
float64 while training runs in float32.
"""

from __future__ import annotations

import contextlib
import os
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "apply_activation",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softplus",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "elementwise",
    "broadcast_mul",
    "one_minus",
    "total_sum",
    "backward",
    "finite_diff_grad",
    "track_kinks",
]

DEBUG = os.environ.get("RIRN_DEBUG", "") not in ("", "0")

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes disagree; the message names the dimension."""


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def track_kinks():
    """Record how close piecewise-linear ops come to their kinks.

    Yields a list that receives, per recorded op, the smallest absolute
    distance of its input from the non-differentiable point.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = record = []
    try:
        yield record
    finally:
        _state.kinks = prev


def _note_kink(values):
    record = getattr(_state, "kinks", None)
    if record is not None and values.size:
        record.append(float(np.min(np.abs(values))))


class Tensor:
    """A 4-D ``(n, c, h, w)`` array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values. Must be 4-D; use ``reshape(1, 1, 1, 1)`` for scalars.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    name : str, optional
        Label used in error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor{_label(name)} must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @classmethod
    def _result(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        if DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self):
        return self.data.nbytes

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def _label(name):
    return f" {name!r}" if name else ""


def _check_same_shape(a, b, op):
    if a.shape == b.shape:
        return
    dims = ("n", "c", "h", "w")
    for dim, sa, sb in zip(dims, a.shape, b.shape):
        if sa != sb:
            raise ShapeError(f"{op}: dimension {dim} mismatch ({sa} vs {sb}); shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, kh, kw) -> (n, c*kh*kw, ho*wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``x`` is ``(n, ci, h, w)``, ``weight`` is ``(co, ci, kh, kw)`` and
    ``bias`` is ``(co,)`` or any tensor with ``co`` elements. Output is
    ``(n, co, (h + 2p - kh) // s + 1, (w + 2p - kw) // s + 1)``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    wdata = weight.data
    if wdata.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (co, ci, kh, kw), got {wdata.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = wdata.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channel dimension c={c} does not match weight ci={ci}")
    if bias is not None and bias.data.size != co:
        raise ShapeError(f"conv2d: bias has {bias.data.size} entries, expected co={co}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wdata.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(co, 1)
    out = out.reshape(n, co, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)
    hp, wp = xp.shape[2:]

    def _backward(g):
        g = np.ascontiguousarray(g).reshape(n, co, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            # per-sample GEMMs; tensordot would copy a transposed cols
            gw = g[0] @ cols[0].T
            for k in range(1, n):
                gw += g[k] @ cols[k].T
            gw = gw.reshape(wdata.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2)).reshape(bias.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out, parents, _backward, "conv2d")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def leaky_relu(x, alpha=0.1):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu: alpha must lie in (0, 1), got {alpha}")
    _note_kink(x.data)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * alpha).astype(x.dtype, copy=False)

    def _backward(g):
        return (np.where(pos, g, g * alpha),)

    return Tensor._result(out, (x,), _backward, "leaky_relu")


def tanh(x):
    out = np.tanh(x.data)

    def _backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (x,), _backward, "tanh")


def sigmoid(x):
    out = _sigmoid_np(x.data)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), _backward, "sigmoid")


def softplus(x):
    """``ln(1 + e^x)`` evaluated as ``max(x, 0) + log1p(exp(-|x|))``."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def _backward(g):
        return (g * _sigmoid_np(d),)

    return Tensor._result(out, (x,), _backward, "softplus")


_ACTIVATIONS = {"leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus}


def apply_activation(x, kind, alpha=0.1):
    """Dispatch by name: ``leaky_relu``, ``tanh``, ``sigmoid`` or ``softplus``."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    if kind == "leaky_relu":
        return fn(x, alpha)
    return fn(x)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels: need at least one tensor")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        for dim, idx in (("n", 0), ("h", 2), ("w", 3)):
            if t.shape[idx] != ref[idx]:
                raise ShapeError(
                    f"concat_channels: dimension {dim} mismatch ({ref[idx]} vs {t.shape[idx]}); shapes {ref} and {t.shape}"
                )
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def _backward(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(inputs)))

    return Tensor._result(out, inputs, _backward, "concat_channels")


def slice_channels(x, start, stop):
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: range [{start}, {stop}) outside channel dimension c={x.shape[1]}")
    out = x.data[:, start:stop]

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor._result(out, (x,), _backward, "slice_channels")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    _check_same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def elementwise(a, b, kind):
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def broadcast_mul(amap, feat):
    """Multiply a single-channel map ``(n, 1, h, w)`` into every channel of ``feat``."""
    if amap.shape[1] != 1:
        raise ShapeError(f"broadcast_mul: map must have c=1, got c={amap.shape[1]}")
    for dim, idx in (("n", 0), ("h", 2), ("w", 3)):
        if amap.shape[idx] != feat.shape[idx]:
            raise ShapeError(f"broadcast_mul: dimension {dim} mismatch ({amap.shape[idx]} vs {feat.shape[idx]})")
    md, fd = amap.data, feat.data

    def _backward(g):
        return (np.sum(g * fd, axis=1, keepdims=True), g * md)

    return Tensor._result(md * fd, (amap, feat), _backward, "broadcast_mul")


def one_minus(x):
    return Tensor._result(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


def total_sum(x):
    """Sum of all entries as a ``(1, 1, 1, 1)`` tensor."""
    shape = x.shape
    out = np.sum(x.data, dtype=x.dtype).reshape(1, 1, 1, 1)
    return Tensor._result(out, (x,), lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),), "sum")


# ---------------------------------------------------------------------------
# gradients


def _topological(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate ``d loss / d leaf`` into every leaf that requires a gradient.

    ``loss`` must be a ``(1, 1, 1, 1)`` tensor. Gradients add onto any value
    already held in ``leaf.grad``.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward: loss must have shape (1, 1, 1, 1), got {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.array(g, dtype=node.dtype, copy=True) if node.grad is None else node.grad + g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(fn, param, eps=1e-4):
    """Central-difference gradient of a scalar-valued ``fn`` w.r.t. ``param``.

    ``param`` is a :class:`Tensor` (or anything with a ``.value`` tensor).
    Its buffer is perturbed in place one entry at a time and restored.
    ``fn`` takes no arguments and returns a float or a scalar tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = getattr(param, "value", param)
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)

    def _eval():
        r = fn()
        return float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval()
            flat[i] = orig - eps
            fm = _eval()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)
