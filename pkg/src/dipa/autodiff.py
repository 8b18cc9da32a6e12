"""Minimal reverse-mode autodiff over float32 numpy arrays.

Every tensor in the pipeline is a :class:`Value`. Ops build an acyclic
graph of closures; :func:`backward` walks it once in topological order
and accumulates vector-Jacobian products into ``.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value",
    "ShapeError",
    "no_grad",
    "conv2d",
    "adaptive_avg_pool2d",
    "pairwise_sqdist",
    "softmax_cross_entropy",
    "max_with_argmax",
    "backward",
    "sgd_step",
    "zero_grads",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / push)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operands with incompatible shapes; names the op and both shapes."""

    def __init__(self, op: str, a_shape, b_shape):
        super().__init__(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


def _as_f32(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    return a


class Value:
    """A float32 array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents: tuple = (), _vjp: Callable | None = None):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        if _grad_enabled:
            self._parents = _parents
            self._vjp = _vjp
        else:
            self._parents = ()
            self._vjp = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Value(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- elementwise binary ops ----------------------------------------
    # Broadcasting is restricted to scalars and leading-dim batch
    # broadcast (b.shape is a suffix of a.shape). Anything else raises.
    def _coerce(self, other) -> "Value":
        if isinstance(other, Value):
            return other
        return Value(np.asarray(other, dtype=np.float32))

    @staticmethod
    def _check_broadcast(op: str, sa, sb):
        if sa == sb:
            return
        if len(sa) == 0 or len(sb) == 0:
            return
        small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
        if big[len(big) - len(small):] != small:
            raise ShapeError(op, sa, sb)

    def _binary(self, other, op: str, fwd, dfa, dfb) -> "Value":
        other = self._coerce(other)
        self._check_broadcast(op, self.shape, other.shape)
        out_data = fwd(self.data, other.data)
        a, b = self, other

        def vjp(g):
            return (
                (a, _unbroadcast(dfa(g, a.data, b.data, out_data), a.shape)),
                (b, _unbroadcast(dfb(g, a.data, b.data, out_data), b.shape)),
            )

        return Value(out_data, (a, b), vjp)

    def __add__(self, other):
        return self._binary(other, "add", lambda a, b: a + b,
                            lambda g, a, b, o: g, lambda g, a, b, o: g)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self._binary(other, "sub", lambda a, b: a - b,
                            lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, "mul", lambda a, b: a * b,
                            lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self._binary(other, "div", lambda a, b: a / b,
                            lambda g, a, b, o: g / b,
                            lambda g, a, b, o: -g * a / (b * b))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return self * np.float32(-1.0)

    # -- matmul --------------------------------------------------------
    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError("matmul", self.shape, other.shape)
        a, b = self, other
        out = Value(a.data @ b.data, (a, b),
                    lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))
        return out

    matmul = __matmul__

    # -- elementwise unary ops -----------------------------------------
    def _unary(self, fwd, df) -> "Value":
        out_data = fwd(self.data)
        a = self
        return Value(out_data, (a,), lambda g: ((a, df(g, a.data, out_data)),))

    def relu(self):
        return self._unary(lambda x: np.maximum(x, 0),
                           lambda g, x, o: g * (x > 0))

    def sigmoid(self):
        def fwd(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._unary(fwd, lambda g, x, o: g * o * (1.0 - o))

    def log(self):
        return self._unary(np.log, lambda g, x, o: g / x)

    def exp(self):
        return self._unary(np.exp, lambda g, x, o: g * o)

    def square(self):
        return self._unary(np.square, lambda g, x, o: g * 2.0 * x)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None):
        a = self
        out_data = a.data.sum(axis=axis, dtype=np.float32)

        def vjp(g):
            if axis is None:
                return ((a, np.broadcast_to(g, a.shape).astype(np.float32)),)
            gx = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(gx, a.shape).astype(np.float32)),)

        return Value(out_data, (a,), vjp)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * np.float32(1.0 / n)

    # -- structural ops --------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Value(a.data.reshape(shape), (a,),
                     lambda g: ((a, g.reshape(a.shape)),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))
        return Value(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: ((a, g.transpose(inv)),))

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]

        def vjp(g):
            ga = np.zeros_like(a.data)
            ga[idx] = g
            return ((a, ga),)

        return Value(np.ascontiguousarray(out_data), (a,), vjp)

    def broadcast(self, n: int):
        """Expand along a new leading batch axis of length n."""
        a = self
        out = np.broadcast_to(a.data[None], (n,) + a.shape)
        return Value(np.ascontiguousarray(out), (a,),
                     lambda g: ((a, g.sum(axis=0)),))

    def detach(self) -> "Value":
        """Same data, cut from the graph (stop-gradient)."""
        return Value(self.data)


def max_with_argmax(x: Value, axis: int) -> tuple[Value, np.ndarray]:
    """Max along one axis; gradient flows only to the argmax element.

    Ties route to the lowest index along the axis (np.argmax convention),
    which is the lowest flat index once leading axes are fixed.
    """
    a = x
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return ((a, ga),)

    return Value(out_data, (a,), vjp), idx


def conv2d(x: Value, w: Value, b: Value | None = None, stride: int = 1, padding: int = 0) -> Value:
    """2D convolution, NCHW layout, zero padding, stride 1 or 2."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError("conv2d", x.shape, w.shape)
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # B,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    cols = np.ascontiguousarray(cols)
    wmat = w.data.reshape(Cout, C * kh * kw)
    out = cols @ wmat.T                                        # BHoWo,Cout
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        if b.shape != (Cout,):
            raise ShapeError("conv2d-bias", out.shape, b.shape)
        out += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gmat = np.ascontiguousarray(gmat)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = gmat @ wmat                                    # BHoWo,Ckhkw
        gcols = gcols.reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, Hp, Wp), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [(x, np.ascontiguousarray(gx)), (w, gw)]
        if b is not None:
            grads.append((b, gmat.sum(axis=0)))
        return tuple(grads)

    return Value(out, parents, vjp)


def pairwise_sqdist(a: Value, b: Value, coincidence_escape: bool = False) -> Value:
    """Squared L2 distances between row vectors: out[m, n] = ||a_m - b_n||^2.

    The expansion |a|^2 + |b|^2 - 2ab cancels catastrophically near zero
    distance in float32, so the forward runs in float64 and casts back.

    With coincidence_escape, bit-equal pairs that receive gradient are
    given a fixed sub-ulp offset direction; the true gradient 2(a-b)
    vanishes there and repulsion terms could never start otherwise.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_sqdist", a.shape, b.shape)
    D = a.shape[1]
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    aa = np.einsum("md,md->m", a64, a64)
    bb = np.einsum("nd,nd->n", b64, b64)
    d = aa[:, None] + bb[None, :] - 2.0 * (a64 @ b64.T)
    np.maximum(d, 0.0, out=d)
    d = d.astype(np.float32)
    va, vb = a, b

    def vjp(g):
        gs_a = g.sum(axis=1)
        gs_b = g.sum(axis=0)
        ga = 2.0 * (va.data * gs_a[:, None] - g @ vb.data)
        gb = 2.0 * (vb.data * gs_b[:, None] - g.T @ va.data)
        if coincidence_escape:
            rows, cols = np.nonzero((d == 0.0) & (g != 0.0))
            for m, n in zip(rows, cols):
                if np.array_equal(va.data[m], vb.data[n]):
                    e = np.zeros(D, dtype=np.float32)
                    e[(m + n) % D] = 1e-6
                    ga[m] += 2.0 * g[m, n] * e
                    gb[n] -= 2.0 * g[m, n] * e
        return ((va, ga.astype(np.float32, copy=False)),
                (vb, gb.astype(np.float32, copy=False)))

    return Value(d, (va, vb), vjp)


def adaptive_avg_pool2d(x: Value, out_hw: tuple[int, int]) -> Value:
    """Adaptive mean pooling over NCHW; window (i, j) spans rows
    [floor(i*H/Ho), ceil((i+1)*H/Ho)) and likewise for columns."""
    if x.ndim != 4:
        raise ShapeError("adaptive_avg_pool2d", x.shape, out_hw)
    B, C, H, W = x.shape
    Ho, Wo = out_hw
    if Ho > H or Wo > W:
        raise ShapeError("adaptive_avg_pool2d", x.shape, out_hw)
    if (Ho, Wo) == (H, W):
        return x
    rb = [(int(np.floor(i * H / Ho)), int(np.ceil((i + 1) * H / Ho))) for i in range(Ho)]
    cb = [(int(np.floor(j * W / Wo)), int(np.ceil((j + 1) * W / Wo))) for j in range(Wo)]
    out = np.empty((B, C, Ho, Wo), dtype=np.float32)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    a = x

    def vjp(g):
        ga = np.zeros_like(a.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                n = (r1 - r0) * (c1 - c0)
                ga[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / n
        return ((a, ga),)

    return Value(out, (a,), vjp)


def softmax_cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean softmax cross-entropy over a batch of logits (B, K)."""
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape, (len(labels),))
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    loss = -logp[np.arange(B), labels].mean(dtype=np.float32)
    a = logits

    def vjp(g):
        p = ez / sez
        p[np.arange(B), labels] -= 1.0
        return ((a, (g * p / B).astype(np.float32)),)

    return Value(np.float32(loss), (a,), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the pre-broadcast operand shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return np.ascontiguousarray(g, dtype=np.float32)


def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Accumulate dL/dnode into .grad for every node reachable from root."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g
        if node._vjp is not None:
            for parent, pg in node._vjp(g):
                acc = flow.get(id(parent))
                flow[id(parent)] = pg.copy() if acc is None else acc + pg


def sgd_step(params: Iterable[Value], lr: float) -> None:
    """Plain SGD update; gradients are left untouched for the caller."""
    for p in params:
        if p.grad is not None:
            p.data -= np.float32(lr) * p.grad


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None
