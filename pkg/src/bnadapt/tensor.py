"""Dense tensors with eager reverse-mode differentiation.

Every primitive builds its output eagerly and attaches a closure that maps
the output gradient back to its inputs. ``backward`` walks the recorded
nodes in reverse topological order, so each node is visited exactly once and
gradients reaching a tensor along several paths are summed.

Operands may differ in shape only when one of them is a scalar or a
per-channel vector matching the last axis of the other.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatible extents."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)


# -- broadcasting helpers ---------------------------------------------------


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.shape == (1,)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _is_scalar(a) or _is_scalar(b):
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(op, sa, sb)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    # per-channel operand: sum over every leading axis
    return grad.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


# -- elementwise primitives -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _node("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _node("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _node("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _reduce_to(ga, ad.shape), _reduce_to(-ga * out, bd.shape)

    return _node("div", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar that is not part of the graph."""
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _node("scale", a.data * c, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _node("sqrt", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _node("log", np.log(ad), (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node("exp", out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # np.sign(0) == 0, which is the subgradient used at the kink
    sgn = np.sign(a.data)

    def bw(g):
        return (g * sgn,)

    return _node("abs", np.abs(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _node("relu", np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), bw)


# -- reductions -------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, max(a.size, 1)

    def bw(g):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _node("mean", np.asarray(a.data.sum() / n, dtype=a.dtype), (a,), bw)


def channel_mean(a: Tensor) -> Tensor:
    """Mean over every axis except the last (channel) one."""
    a = as_tensor(a)
    if a.data.ndim < 1:
        raise ShapeError("channel_mean", a.shape, detail="need at least one axis")
    shape = a.shape
    flat = a.data.reshape(-1, shape[-1])
    n = flat.shape[0]
    if n == 0:
        raise ShapeError("channel_mean", shape, detail="empty reduction")

    def bw(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node("channel_mean", flat.sum(axis=0) / n, (a,), bw)


def channel_var(a: Tensor) -> Tensor:
    """Population variance over every axis except the last."""
    a = as_tensor(a)
    if a.data.ndim < 1:
        raise ShapeError("channel_var", a.shape, detail="need at least one axis")
    shape = a.shape
    flat = a.data.reshape(-1, shape[-1])
    n = flat.shape[0]
    if n == 0:
        raise ShapeError("channel_var", shape, detail="empty reduction")
    centered = flat - flat.sum(axis=0) / n
    var = (centered * centered).sum(axis=0) / n

    def bw(g):
        return ((centered * (2.0 / n) * g).reshape(shape),)

    return _node("channel_var", var, (a,), bw)


# -- spatial primitives (NHWC) ----------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution.

    ``x`` is (B, H, W, Cin), ``w`` is (k, k, Cin, Cout) with odd k and ``b``
    is (Cout,). Output is (B, ceil(H/stride), ceil(W/stride), Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape, detail="expected NHWC input and (k,k,Cin,Cout) kernel")
    kh, kw, cin, cout = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", w.shape, detail="kernel must be square and odd-sized")
    if x.shape[-1] != cin:
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias must have one entry per output channel")
    bsz, h, wd, _ = x.shape
    pad = kh // 2
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate(
        [xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] for i, j in taps],
        axis=-1,
    ).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh * kw, cin)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, t, :]
        gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node("conv2d", out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", x.shape, detail="expected NHWC input")
    bsz, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node("upsample2x", out, (x,), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node("softmax", out, (x,), bw)


# -- graph bookkeeping ------------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "sqrt": sqrt,
    "log": log,
    "exp": exp,
    "abs": absolute,
    "relu": relu,
    "sum": sum_all,
    "mean_all": mean_all,
    "channel_mean": channel_mean,
    "channel_var": channel_var,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "softmax": softmax_channels,
}


def record(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the primitive named ``op_kind`` to ``inputs``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Gradients are added onto whatever ``.grad`` already holds, so call
    ``zero_grad`` on parameters between steps. The graph is released
    afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node._parents = ()
        node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_or_zeros(t: Tensor) -> np.ndarray:
    return np.zeros_like(t.data) if t.grad is None else t.grad


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not step > 0:
        raise ValueError("step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    res = out.reshape(-1)

    def ev(arr):
        v = f(Tensor(arr.reshape(base.shape).copy()))
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise FloatingPointError("non-finite function value during finite differencing")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = ev(flat)
        flat[i] = orig - step
        fm = ev(flat)
        flat[i] = orig
        res[i] = (fp - fm) / (2 * step)
    return out
