"""Reverse-mode automatic differentiation over dense float64 arrays.

Only the operations needed by the separation pipeline are provided. All
convolutions use the correlation convention ``y[k, n] = sum_t x[n + t] * F[k, t]``
(no filter flip), so learned filters read directly as basis functions.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "as_tensor",
    "make_node",
    "conv1d",
    "conv_transpose1d",
    "depthwise_conv1d",
    "dense",
    "softplus",
    "abs_elem",
    "maxpool1d",
    "unpool_zero_insert",
    "mul_elem",
    "div_elem",
    "reshape",
    "transpose",
    "reduce",
    "sum_all",
    "mean_all",
    "dot",
    "linear_map",
    "numerical_gradient",
    "gradcheck",
]

DIV_EPS = 1e-8


class Tensor:
    """A node in the computation graph.

    ``data`` is treated as immutable once the node is created. ``grad`` is
    allocated lazily during :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every node reachable from this scalar root."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if g.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {g.shape} does not match node shape {parent.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g

    # arithmetic with same-shape tensors or scalars
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return mul_elem(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _true_div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _true_div(as_tensor(other), self)

    def __pow__(self, p: float):
        base = self.data
        return make_node(base ** p, (self,), lambda g: (g * p * base ** (p - 1),))


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _true_div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    av, bv = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / bv**2, b.shape)

    return make_node(av / bv, (a, b), backward)


# ----------------------------------------------------------------------------
# convolution kernels on raw arrays
# ----------------------------------------------------------------------------

def _same_padding(length: int, width: int, stride: int) -> tuple[int, int]:
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    left = total // 2 if stride > 1 else (width - 1) // 2
    left = min(left, total)
    return left, total - left


def _padding_amounts(length: int, width: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        return _same_padding(length, width, stride)
    raise ValueError(f"unknown padding mode {padding!r}")


def _corr(xp: np.ndarray, filters: np.ndarray, stride: int) -> np.ndarray:
    """(C, Lp) x (K, C, W) -> (K, T')."""
    win = sliding_window_view(xp, filters.shape[2], axis=1)[:, ::stride, :]
    return np.tensordot(filters, win, axes=([1, 2], [0, 2]))


def _corr_weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, width: int) -> np.ndarray:
    win = sliding_window_view(xp, width, axis=1)[:, ::stride, :][:, : g.shape[1], :]
    return np.tensordot(g, win, axes=([1], [1]))


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    out = np.zeros(g.shape[:-1] + ((g.shape[-1] - 1) * stride + 1,))
    out[..., ::stride] = g
    return out


def _corr_adjoint(g: np.ndarray, filters: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Adjoint of :func:`_corr`: (K, T') -> (C, length)."""
    width = filters.shape[2]
    n = g.shape[1]
    cols = np.tensordot(filters, g, axes=([0], [0]))  # (C, W, T')
    span = (n - 1) * stride + width
    out = np.zeros((filters.shape[1], max(span, length)))
    for w in range(width):
        out[:, w:w + (n - 1) * stride + 1:stride] += cols[:, w, :]
    return out[:, :length]


def _dw_corr(xp: np.ndarray, filters: np.ndarray, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, filters.shape[1], axis=1)[:, ::stride, :]
    return np.einsum("cnw,cw->cn", win, filters)


def _dw_weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, width: int) -> np.ndarray:
    win = sliding_window_view(xp, width, axis=1)[:, ::stride, :][:, : g.shape[1], :]
    return np.einsum("cn,cnw->cw", g, win)


def _dw_adjoint(g: np.ndarray, filters: np.ndarray, stride: int, length: int) -> np.ndarray:
    width = filters.shape[1]
    gp = np.pad(_dilate(g, stride), ((0, 0), (width - 1, width - 1)))
    win = sliding_window_view(gp, width, axis=1)
    out = np.einsum("cjw,cw->cj", win, filters[:, ::-1])
    if out.shape[1] >= length:
        return out[:, :length]
    return np.pad(out, ((0, 0), (0, length - out.shape[1])))


def _check_conv_args(length: int, width: int, stride: int, pads: tuple[int, int]) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if width > length + sum(pads):
        raise ValueError(f"filter width {width} exceeds padded signal length {length + sum(pads)}")


# ----------------------------------------------------------------------------
# differentiable ops
# ----------------------------------------------------------------------------

def conv1d(signal: Tensor, filters: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Multi-channel cross-correlation: (C_in, T) x (C_out, C_in, W) -> (C_out, T')."""
    x, f = signal.data, filters.data
    if x.ndim != 2 or f.ndim != 3:
        raise ValueError(f"conv1d expects (C, T) signal and (K, C, W) filters, got {x.shape}, {f.shape}")
    if f.shape[1] != x.shape[0]:
        raise ValueError(f"filters expect {f.shape[1]} input channels, signal has {x.shape[0]}")
    length, width = x.shape[1], f.shape[2]
    left, right = _padding_amounts(length, width, stride, padding)
    _check_conv_args(length, width, stride, (left, right))
    xp = np.pad(x, ((0, 0), (left, right)))
    out = _corr(xp, f, stride)

    def backward(g):
        gx = _corr_adjoint(g, f, stride, xp.shape[1])[:, left:left + length]
        gf = _corr_weight_grad(xp, g, stride, width)
        return gx, gf

    return make_node(out, (signal, filters), backward)


def conv_transpose1d(
    coeffs: Tensor, filters: Tensor, out_length: int, stride: int = 1, padding: str = "same"
) -> Tensor:
    """Adjoint of :func:`conv1d`: each coefficient adds its filter, scaled, at its position.

    ``coeffs`` is (K, T'), ``filters`` is (K, C, W); the result is (C, out_length).
    """
    z, f = coeffs.data, filters.data
    if z.ndim != 2 or f.ndim != 3 or f.shape[0] != z.shape[0]:
        raise ValueError(f"conv_transpose1d shape mismatch: coeffs {z.shape}, filters {f.shape}")
    width = f.shape[2]
    left, right = _padding_amounts(out_length, width, stride, padding)
    _check_conv_args(out_length, width, stride, (left, right))
    padded = out_length + left + right
    expected = (padded - width) // stride + 1
    if z.shape[1] != expected:
        raise ValueError(f"coefficients have {z.shape[1]} frames, geometry needs {expected}")
    out = _corr_adjoint(z, f, stride, padded)[:, left:left + out_length]

    def backward(g):
        gp = np.pad(g, ((0, 0), (left, right)))
        return _corr(gp, f, stride), _corr_weight_grad(gp, z, stride, width)

    return make_node(out, (coeffs, filters), backward)


def depthwise_conv1d(
    signal: Tensor,
    filters: Tensor,
    stride: int = 1,
    padding: str = "valid",
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Per-channel cross-correlation: (C, T) x (C, W) -> (C, T'), optional per-channel bias."""
    x, f = signal.data, filters.data
    if x.ndim != 2 or f.ndim != 2 or f.shape[0] != x.shape[0]:
        raise ValueError(f"depthwise_conv1d shape mismatch: signal {x.shape}, filters {f.shape}")
    length, width = x.shape[1], f.shape[1]
    left, right = _padding_amounts(length, width, stride, padding)
    _check_conv_args(length, width, stride, (left, right))
    xp = np.pad(x, ((0, 0), (left, right)))
    out = _dw_corr(xp, f, stride)
    parents: tuple = (signal, filters)
    if bias is not None:
        if bias.shape != (x.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {x.shape[0]} channels")
        out = out + bias.data[:, None]
        parents = parents + (bias,)

    def backward(g):
        gx = _dw_adjoint(g, f, stride, xp.shape[1])[:, left:left + length]
        grads = (gx, _dw_weight_grad(xp, g, stride, width))
        if bias is not None:
            grads = grads + (g.sum(axis=1),)
        return grads

    return make_node(out, parents, backward)


def dense(inputs: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``inputs @ weight + bias`` with the bias broadcast over rows."""
    x, w, b = inputs.data, weight.data, bias.data
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: {x.shape} @ {w.shape} + {b.shape}")

    def backward(g):
        return g @ w.T, x.T @ g, g.sum(axis=0)

    return make_node(x @ w + b, (inputs, weight, bias), backward)


def softplus(inputs: Tensor) -> Tensor:
    v = inputs.data
    # max(v, 0) + log1p(exp(-|v|)) never overflows and equals v + log1p(exp(-v)) for large v
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return make_node(out, (inputs,), lambda g: (g * expit(v),))


def abs_elem(inputs: Tensor) -> Tensor:
    v = inputs.data
    # np.sign gives 0 at 0, the chosen subgradient
    return make_node(np.abs(v), (inputs,), lambda g: (g * np.sign(v),))


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    av, bv = a.data, b.data
    return make_node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div_elem(a: Tensor, b: Tensor, eps: float = DIV_EPS) -> Tensor:
    """Elementwise ``a / b`` with ``|b|`` clamped from below at ``eps``.

    The clamp is locally constant: no gradient flows to ``b`` where it is active.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    live = np.abs(bv) > eps
    denom = np.where(live, bv, np.where(bv < 0, -eps, eps))

    def backward(g):
        return g / denom, np.where(live, -g * av / denom**2, 0.0)

    return make_node(av / denom, (a, b), backward)


def maxpool1d(inputs: Tensor, pool: int) -> tuple[Tensor, np.ndarray]:
    """Max over non-overlapping windows of ``pool`` frames along time.

    Returns the pooled tensor (C, ceil(T/pool)) and the absolute argmax index per
    (channel, window); ties go to the smallest index. The last window may be partial.
    """
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    x = inputs.data
    channels, length = x.shape
    n_out = -(-length // pool)
    padded = np.full((channels, n_out * pool), -np.inf)
    padded[:, :length] = x
    windows = padded.reshape(channels, n_out, pool)
    local = windows.argmax(axis=2)
    indices = local + np.arange(n_out)[None, :] * pool
    values = np.take_along_axis(x, indices, axis=1)

    def backward(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, indices, g, axis=1)
        return (gx,)

    return make_node(values, (inputs,), backward), indices


def unpool_zero_insert(
    pooled: Tensor,
    pool: int,
    target_length: int,
    placement: str = "window_start",
    indices: Optional[np.ndarray] = None,
) -> Tensor:
    """Upsample by zero insertion: one nonzero per window of ``pool`` frames.

    ``window_start`` puts each value at the first frame of its window;
    ``recorded_indices`` puts it back where :func:`maxpool1d` found the maximum.
    """
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    p = pooled.data
    channels, n = p.shape
    if n * pool < target_length - pool + 1:
        raise ValueError(f"{n} pooled frames cannot cover {target_length} samples at pool {pool}")
    if placement == "window_start":
        positions = np.broadcast_to(np.arange(n) * pool, (channels, n))
    elif placement == "recorded_indices":
        if indices is None:
            raise ValueError("recorded_indices placement requires pooling indices")
        positions = np.asarray(indices)
        if positions.shape != p.shape:
            raise ValueError(f"indices shape {positions.shape} does not match pooled {p.shape}")
    else:
        raise ValueError(f"unknown placement {placement!r}")
    if positions.size and positions.max() >= target_length:
        raise ValueError(f"unpool position {positions.max()} beyond target length {target_length}")
    positions = np.ascontiguousarray(positions)
    out = np.zeros((channels, target_length))
    np.put_along_axis(out, positions, p, axis=1)

    def backward(g):
        return (np.take_along_axis(g, positions, axis=1),)

    return make_node(out, (pooled,), backward)


def reshape(inputs: Tensor, shape: tuple) -> Tensor:
    old = inputs.shape
    return make_node(inputs.data.reshape(shape), (inputs,), lambda g: (g.reshape(old),))


def transpose(inputs: Tensor) -> Tensor:
    return make_node(inputs.data.T, (inputs,), lambda g: (g.T,))


def sum_all(inputs: Tensor) -> Tensor:
    shape = inputs.shape
    return make_node(np.asarray(inputs.data.sum()), (inputs,), lambda g: (np.full(shape, g),))


def mean_all(inputs: Tensor) -> Tensor:
    n = inputs.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    shape = inputs.shape
    return make_node(np.asarray(inputs.data.mean()), (inputs,), lambda g: (np.full(shape, g / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"dot shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    return make_node(np.asarray(np.vdot(av, bv)), (a, b), lambda g: (g * bv, g * av))


def reduce(inputs: Tensor, kind: str = "sum", other: Optional[Tensor] = None) -> Tensor:
    if kind == "sum":
        return sum_all(inputs)
    if kind == "mean":
        return mean_all(inputs)
    if kind == "dot":
        if other is None:
            raise ValueError("dot reduction needs a second tensor")
        return dot(inputs, other)
    raise ValueError(f"unknown reduction {kind!r}")


def linear_map(
    inputs: Sequence[Tensor],
    forward: Callable[..., np.ndarray],
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray]],
) -> Tensor:
    """Wrap a fixed linear operator given by its forward map and its adjoint."""
    inputs = tuple(inputs)
    out = forward(*(t.data for t in inputs))
    return make_node(out, inputs, lambda g: tuple(adjoint(g)))


# ----------------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], float], param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param``, perturbed in place."""
    grad = np.zeros_like(param)
    flat, gflat = param.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def gradcheck(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> dict[int, float]:
    """Max-norm relative error between analytic and numerical gradients, per parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    """
    for p in params:
        p.requires_grad = True
    root = loss_fn()
    root.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = {}
    for i, p in enumerate(params):
        numeric = numerical_gradient(lambda: float(loss_fn().data), p.data, step)
        scale = max(np.abs(analytic[i]).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        errors[i] = float(np.abs(analytic[i] - numeric).max(initial=0.0) / scale)
    return errors
