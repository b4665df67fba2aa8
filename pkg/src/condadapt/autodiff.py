"""Reverse-mode automatic differentiation over dense numpy arrays.

Design notes:

* ``Tensor`` wraps a float32 array (float64 is accepted for shadow evaluation
  in numerical test harnesses; ops preserve the input dtype).
* Ops are free functions. When a ``Tape`` is active on the current thread and
  an input participates in differentiation, the op appends a node with a
  backward closure. The tape's node list is in execution order, which is a
  topological order by construction, so the backward pass is a single reverse
  sweep that visits each node exactly once.
* ``conv2d`` implements cross-correlation (no kernel flip).
* Every op output passes a NaN/Inf guard implemented as one reduction
  (a non-finite element always propagates to the sum at the value scales this
  engine is used at).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional real array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _guard_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not math.isfinite(float(arr.sum())):
        raise NumericalError(f"{op} produced a non-finite value")
    return arr


class Tape:
    """Execution-ordered record of ops; supports one-sweep reverse accumulation."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _wants(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._tracked.add(id(out))
        self._nodes.append((out, inputs, backward))

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. ``params``.

        Leaves that do not participate in the recorded graph get zeros.
        """
        if loss.data.shape != ():
            raise ContractError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, backward(g)):
                if gt is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], make_backward) -> Tensor:
    """Wrap an op result; record a node when a tape wants any input."""
    out = Tensor(_guard_finite(out_data, op))
    tape = _active_tape()
    if tape is not None:
        needs = tuple(tape._wants(t) for t in inputs)
        if any(needs):
            tape._record(out, inputs, make_backward(needs))
    return out


# ---------------------------------------------------------------------------
# convolution kernels (shared by conv2d / conv_transpose2d and their grads)
# ---------------------------------------------------------------------------

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix in (n, c*kh*kw, oh*ow) layout via one strided gather."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(xp, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, s * sh, s * sw))
    return view.reshape(n, c * kh * kw, oh * ow)


def _conv_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, s: int, p: int, return_cols: bool = False):
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    oh, ow = _conv_out_size(h, kh, s, p), _conv_out_size(wd, kw, s, p)
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        cols = x.reshape(n, c, h * wd)
    else:
        cols = _im2col(_pad2d(x, p), kh, kw, s, oh, ow)
    y = np.matmul(w.reshape(o, c * kh * kw)[None], cols).reshape(n, o, oh, ow)
    return (y, cols) if return_cols else y


def _grad_w_from_cols(cols: np.ndarray, gy: np.ndarray, w_shape: tuple) -> np.ndarray:
    n, o = gy.shape[0], gy.shape[1]
    gw = np.matmul(gy.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def _conv2d_grad_w(x: np.ndarray, gy: np.ndarray, s: int, p: int, kh: int, kw: int) -> np.ndarray:
    n, c = x.shape[:2]
    oh, ow = gy.shape[2], gy.shape[3]
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        cols = x.reshape(n, c, oh * ow)
    else:
        cols = _im2col(_pad2d(x, p), kh, kw, s, oh, ow)
    return _grad_w_from_cols(cols, gy, (gy.shape[1], c, kh, kw))


def _conv2d_grad_x(gy: np.ndarray, w: np.ndarray, s: int, p: int, xh: int, xw: int) -> np.ndarray:
    n = gy.shape[0]
    o, c, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    # g_cols in the same (n, c*kh*kw, oh*ow) layout the forward uses
    g_cols = np.matmul(w.reshape(o, c * kh * kw).T[None], gy.reshape(n, o, oh * ow))
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        return g_cols.reshape(n, c, xh, xw)
    g_cols = g_cols.reshape(n, c, kh, kw, oh, ow)
    gx = np.zeros((n, c, xh + 2 * p, xw + 2 * p), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u : u + s * (oh - 1) + 1 : s, v : v + s * (ow - 1) + 1 : s] += g_cols[:, :, u, v]
    if p:
        return gx[:, :, p:-p, p:-p]
    return gx


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    y, cols = _conv2d_fwd(x.data, w.data, stride, padding, return_cols=True)

    def make_backward(needs):
        # keep the forward patch matrix only when the kernel gradient is needed
        kept = cols if needs[1] else None

        def backward(gy):
            gx = _conv2d_grad_x(gy, w.data, stride, padding, x.shape[2], x.shape[3]) if needs[0] else None
            gw = _grad_w_from_cols(kept, gy, w.data.shape) if needs[1] else None
            return gx, gw

        return backward

    return _emit("conv2d", y, (x, w), make_backward)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (gradient-of-conv2d semantics).

    Kernel layout is (in_channels, out_channels, kH, kW); the output spatial
    size is (H - 1) * stride - 2 * padding + kH.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects NCHW input and IOHW kernel")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[0]}")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    oh = (x.shape[2] - 1) * stride - 2 * padding + w.shape[2]
    ow = (x.shape[3] - 1) * stride - 2 * padding + w.shape[3]
    # forward of the transpose is the input-gradient kernel of conv2d
    y = _conv2d_grad_x(x.data, w.data, stride, padding, oh, ow)

    def make_backward(needs):
        def backward(gy):
            gx = _conv2d_fwd(gy, w.data, stride, padding) if needs[0] else None
            gw = _conv2d_grad_w(gy, x.data, stride, padding, w.shape[2], w.shape[3]) if needs[1] else None
            return gx, gw

        return backward

    return _emit("conv_transpose2d", y, (x, w), make_backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d expects NCHW input")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def make_backward(needs):
        def backward(gy):
            g = np.broadcast_to(
                gy[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k)
            ).reshape(n, c, h, w)
            return (g.astype(gy.dtype),)

        return backward

    return _emit("avg_pool2d", y, (x,), make_backward)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add per-channel bias to an NCHW tensor."""
    if x.data.ndim != 4 or b.data.shape != (x.shape[1],):
        raise ShapeError("channel_bias expects NCHW input and a (C,) bias")
    y = x.data + b.data[None, :, None, None]

    def make_backward(needs):
        def backward(gy):
            return (gy if needs[0] else None, gy.sum(axis=(0, 2, 3)) if needs[1] else None)

        return backward

    return _emit("channel_bias", y, (x, b), make_backward)


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize each (n, c) plane to zero mean / unit variance, then affine."""
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects NCHW input")
    c = x.shape[1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError("gain and bias must have shape (C,)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(epsilon, dtype=x.data.dtype))
    xhat = xc * inv
    y = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def make_backward(needs):
        def backward(gy):
            ggain = (gy * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            gbias = gy.sum(axis=(0, 2, 3)) if needs[2] else None
            gx = None
            if needs[0]:
                dxhat = gy * gain.data[None, :, None, None]
                m1 = dxhat.mean(axis=(2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
                gx = (dxhat - m1 - xhat * m2) * inv
            return gx, ggain, gbias

        return backward

    return _emit("instance_norm", y, (x, gain, bias), make_backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def make_backward(needs):
        def backward(gy):
            return ((gy * (x.data > 0)).astype(gy.dtype),)

        return backward

    return _emit("relu", y, (x,), make_backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    y = np.where(x.data > 0, x.data, x.data * np.asarray(slope, dtype=x.data.dtype))

    def make_backward(needs):
        def backward(gy):
            return (np.where(x.data > 0, gy, gy * np.asarray(slope, dtype=gy.dtype)),)

        return backward

    return _emit("leaky_relu", y, (x,), make_backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def make_backward(needs):
        def backward(gy):
            return (gy * (1.0 - y * y).astype(gy.dtype),)

        return backward

    return _emit("tanh", y, (x,), make_backward)


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)

    def make_backward(needs):
        def backward(gy):
            return (gy * (y * (1.0 - y)).astype(gy.dtype),)

        return backward

    return _emit("sigmoid", y, (x,), make_backward)


def bounded_logit(x: Tensor, margin: float = 0.02) -> Tensor:
    """log(x / (1 - x)) with x clipped into [margin, 1 - margin].

    Inverse of sigmoid on the clipped range; lets a sigmoid-headed network
    pass its input through by default. Gradient is zero on the clipped tails.
    """
    if not 0.0 < margin < 0.5:
        raise ContractError("margin must lie in (0, 0.5)")
    lo = np.asarray(margin, dtype=x.data.dtype)
    hi = np.asarray(1.0 - margin, dtype=x.data.dtype)
    xc = np.clip(x.data, lo, hi)
    y = np.log(xc) - np.log1p(-xc)

    def make_backward(needs):
        def backward(gy):
            inside = (x.data > lo) & (x.data < hi)
            return ((gy * inside / (xc * (1.0 - xc))).astype(gy.dtype),)

        return backward

    return _emit("bounded_logit", y, (x,), make_backward)


_ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity; kind in {relu, leaky_relu, tanh, sigmoid}."""
    if kind not in _ACTIVATIONS:
        raise ContractError(f"unknown activation kind {kind!r}")
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    return _ACTIVATIONS[kind](x)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of an (N, F) batch by (F, G) weights plus (G,) bias."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes incompatible: {x.shape} x {w.shape}")
    if b.data.shape != (w.shape[1],):
        raise ShapeError("bias must have shape (G,)")
    y = x.data @ w.data + b.data

    def make_backward(needs):
        def backward(gy):
            gx = gy @ w.data.T if needs[0] else None
            gw = x.data.T @ gy if needs[1] else None
            gb = gy.sum(axis=0) if needs[2] else None
            return gx, gw, gb

        return backward

    return _emit("linear", y, (x, w, b), make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def make_backward(needs):
        def backward(gy):
            return (gy if needs[0] else None, gy if needs[1] else None)

        return backward

    return _emit("add", y, (a, b), make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def make_backward(needs):
        def backward(gy):
            ga = gy * b.data if needs[0] else None
            gb = gy * a.data if needs[1] else None
            return ga, gb

        return backward

    return _emit("mul", y, (a, b), make_backward)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """y = x * scale + shift with constant scale and shift."""
    k = np.asarray(scale, dtype=x.data.dtype)
    y = x.data * k + np.asarray(shift, dtype=x.data.dtype)

    def make_backward(needs):
        def backward(gy):
            return (gy * k,)

        return backward

    return _emit("affine", y, (x,), make_backward)


def coord_channels(n: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Constant (n, 2, h, w) grid of y/x coordinates in [-1, 1].

    Concatenated to network inputs where position-dependent output matters;
    a plain conv stack is translation-equivariant and cannot express it.
    """
    ys = np.linspace(-1.0, 1.0, h, dtype=dtype)[:, None]
    xs = np.linspace(-1.0, 1.0, w, dtype=dtype)[None, :]
    grid = np.stack([np.broadcast_to(ys, (h, w)), np.broadcast_to(xs, (h, w))])
    return np.broadcast_to(grid, (n, 2, h, w)).copy()


def with_coords(x: Tensor) -> Tensor:
    """Append coordinate channels to an NCHW tensor."""
    n, _, h, w = x.shape
    return concat_channels(x, Tensor(coord_channels(n, h, w, x.data.dtype)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat shapes incompatible: {a.shape} vs {b.shape}")
    y = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def make_backward(needs):
        def backward(gy):
            return (gy[:, :ca] if needs[0] else None, gy[:, ca:] if needs[1] else None)

        return backward

    return _emit("concat_channels", y, (a, b), make_backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    y = x.data.reshape(shape)
    orig = x.data.shape

    def make_backward(needs):
        def backward(gy):
            return (gy.reshape(orig),)

        return backward

    return _emit("reshape", y, (x,), make_backward)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    y = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def make_backward(needs):
        def backward(gy):
            return (np.ascontiguousarray(gy.transpose(inverse)),)

        return backward

    return _emit("transpose", y, (x,), make_backward)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def make_backward(needs):
        def backward(gy):
            return (np.full_like(x.data, gy),)

        return backward

    return _emit("sum_all", y, (x,), make_backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(x * weights) against a constant weight array."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise ShapeError(f"weights shape {w.shape} does not match input {x.shape}")
    y = np.asarray((x.data * w).sum(), dtype=x.data.dtype)

    def make_backward(needs):
        def backward(gy):
            return (w * gy,)

        return backward

    return _emit("weighted_sum", y, (x,), make_backward)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shapes differ: {a.shape} vs {b.shape}")
    d = a.data - b.data
    y = np.asarray(np.abs(d).mean(), dtype=a.data.dtype)
    n = d.size

    def make_backward(needs):
        def backward(gy):
            g = (np.sign(d) * (gy / n)).astype(a.data.dtype)
            return (g if needs[0] else None, -g if needs[1] else None)

        return backward

    return _emit("l1_loss", y, (a, b), make_backward)


def squared_error(x: Tensor, target: float) -> Tensor:
    """Mean of (x - target)^2 against a constant target."""
    d = x.data - np.asarray(target, dtype=x.data.dtype)
    y = np.asarray((d * d).mean(), dtype=x.data.dtype)
    n = d.size

    def make_backward(needs):
        def backward(gy):
            return ((2.0 * d * (gy / n)).astype(x.data.dtype),)

        return backward

    return _emit("squared_error", y, (x,), make_backward)


def squared_l2(a: Tensor, b: Tensor) -> Tensor:
    """Mean over batch rows of the squared L2 distance between a and b."""
    if a.shape != b.shape:
        raise ShapeError(f"squared_l2 shapes differ: {a.shape} vs {b.shape}")
    d = a.data - b.data
    nb = d.shape[0] if d.ndim > 0 else 1
    y = np.asarray((d * d).sum() / nb, dtype=a.data.dtype)

    def make_backward(needs):
        def backward(gy):
            g = (2.0 * d * (gy / nb)).astype(a.data.dtype)
            return (g if needs[0] else None, -g if needs[1] else None)

        return backward

    return _emit("squared_l2", y, (a, b), make_backward)


def l2_normalize(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Scale each row of an (N, F) batch to unit L2 norm."""
    if x.data.ndim != 2:
        raise ShapeError("l2_normalize expects an (N, F) batch")
    r = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + np.asarray(epsilon, dtype=x.data.dtype)
    y = x.data / r

    def make_backward(needs):
        def backward(gy):
            dot = (gy * y).sum(axis=1, keepdims=True)
            return ((gy - y * dot) / r,)

        return backward

    return _emit("l2_normalize", y, (x,), make_backward)


def _validate_one_hot(target: np.ndarray) -> None:
    ok = np.all((target == 0.0) | (target == 1.0)) and np.all(target.sum(axis=1) == 1.0)
    if not ok:
        raise ContractError("target must be one-hot rows (exactly one 1.0, rest 0.0)")


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot target rows.

    Computed in log-sum-exp form so saturated logits stay finite.
    """
    if logits.data.ndim != 2 or logits.shape != target.data.shape:
        raise ShapeError(f"logits/target shapes incompatible: {logits.shape} vs {target.data.shape}")
    _validate_one_hot(target.data)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    picked = (z * target.data).sum(axis=1, keepdims=True)
    y = np.asarray((lse - picked).mean(), dtype=z.dtype)
    n = z.shape[0]

    def make_backward(needs):
        def backward(gy):
            p = np.exp(z - lse)
            g = ((p - target.data) * (gy / n)).astype(z.dtype)
            return (g if needs[0] else None, None)

        return backward

    return _emit("softmax_cross_entropy", y, (logits, target), make_backward)


# ---------------------------------------------------------------------------
# non-recorded numeric helpers
# ---------------------------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a plain array (inference only)."""
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(ids: np.ndarray, num_classes: int) -> np.ndarray:
    """Float32 one-hot rows for integer class ids."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise ContractError("class id out of range")
    out = np.zeros((ids.size, num_classes), dtype=np.float32)
    out[np.arange(ids.size), ids] = 1.0
    return out
