"""Dense real tensors with define-by-run reverse-mode differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
operation records its parents and a backward closure, and ``backward()``
replays the closures in reverse creation order.  Only the operators the
training method actually needs are provided; binary ops require equal
shapes or a python scalar (explicit ``expand`` covers everything else).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float64

Scalar = Union[int, float]

_seq_counter = itertools.count()


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # single-pass reduction; NaN/Inf survive summation, and accumulator
    # overflow merely triggers the exact re-check below
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional real array with an optional gradient slot.

    ``data`` is immutable by convention once the tensor participates in a
    graph; ``grad`` is the only mutable slot and accumulates across
    ``backward()`` calls until reset to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Optional[Callable] = None,
                 _op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _ensure_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._seq = next(_seq_counter)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False, dtype=None) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def full(shape, value: Scalar, requires_grad: bool = False, dtype=None) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph machinery -------------------------------------------------------

    def _in_graph(self) -> bool:
        return self.requires_grad or self._backward is not None

    def backward(self) -> None:
        """Populate ``grad`` of every reachable requires_grad tensor.

        A leaf whose ``grad`` stays ``None`` received a zero adjoint (e.g. it
        is only reachable through a stop-gradient boundary).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._op == "leaf" and not self.requires_grad:
            raise ValueError("backward() on a detached tensor: nothing depends on it")

        # Reverse creation order is reverse execution order for a
        # define-by-run graph, so every op's closure runs exactly once with
        # its full adjoint.
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p._in_graph())
        nodes.sort(key=lambda t: t._seq, reverse=True)

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            _ensure_finite(g, f"backward:{node._op}")
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                node._backward(g, adjoint)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(full_like(self, other), self) if np.isscalar(other) else sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: Scalar):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def full_like(t: Tensor, value: Scalar) -> Tensor:
    return Tensor(np.full_like(t.data, value))


def make_tensor(shape: Sequence[int], values: Optional[Iterable[Scalar]] = None,
                fill: Optional[Scalar] = None, requires_grad: bool = False,
                dtype=None) -> Tensor:
    """Build a tensor from explicit values or a fill scalar.

    Exactly one of ``values``/``fill`` must be given; the value count must
    match ``product(shape)``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    n = int(np.prod(shape)) if shape else 1
    if (values is None) == (fill is None):
        raise ValueError("provide exactly one of values= or fill=")
    if values is not None:
        flat = np.asarray(list(values), dtype=dtype or DEFAULT_DTYPE)
        if flat.size != n:
            raise ValueError(f"shape {shape} expects {n} values, got {flat.size}")
        return Tensor(flat.reshape(shape), requires_grad)
    return Tensor.full(shape, fill, requires_grad, dtype=dtype)


# -- internals ------------------------------------------------------------------


def _accum(adjoint: dict, parent: Tensor, contribution: np.ndarray) -> None:
    if not parent._in_graph():
        return
    key = id(parent)
    if key in adjoint:
        adjoint[key] = adjoint[key] + contribution
    else:
        adjoint[key] = contribution


def _node(data: np.ndarray, parents: tuple, backward: Optional[Callable], op: str) -> Tensor:
    req = any(p._in_graph() for p in parents)
    return Tensor(data, requires_grad=False,
                  _parents=parents if req else (),
                  _backward=backward if req else None, _op=op)


def _as_operand(b, op: str):
    """Return (array-or-scalar, tensor-or-None) for a binary op's rhs."""
    if isinstance(b, Tensor):
        return b.data, b
    if np.isscalar(b):
        return float(b), None
    raise ValueError(f"'{op}' expects a Tensor or scalar, got {type(b).__name__}")


def _check_same_shape(a: Tensor, b_data, op: str) -> None:
    if isinstance(b_data, np.ndarray) and a.shape != b_data.shape:
        raise ValueError(f"'{op}' shape mismatch: {a.shape} vs {b_data.shape}")


# -- elementwise ops --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b_data, b_t = _as_operand(b, "add")
    _check_same_shape(a, b_data, "add")
    out = a.data + b_data

    def backward(g, adjoint):
        _accum(adjoint, a, g)
        if b_t is not None:
            _accum(adjoint, b_t, g)

    return _node(out, (a, b_t) if b_t is not None else (a,), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b_data, b_t = _as_operand(b, "sub")
    _check_same_shape(a, b_data, "sub")
    out = a.data - b_data

    def backward(g, adjoint):
        _accum(adjoint, a, g)
        if b_t is not None:
            _accum(adjoint, b_t, -g)

    return _node(out, (a, b_t) if b_t is not None else (a,), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b_data, b_t = _as_operand(b, "mul")
    _check_same_shape(a, b_data, "mul")
    out = a.data * b_data

    def backward(g, adjoint):
        _accum(adjoint, a, g * b_data)
        if b_t is not None:
            _accum(adjoint, b_t, g * a.data)

    return _node(out, (a, b_t) if b_t is not None else (a,), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b_data, b_t = _as_operand(b, "div")
    _check_same_shape(a, b_data, "div")
    if np.any(b_data == 0):
        raise ValueError("'div' by zero")
    out = a.data / b_data

    def backward(g, adjoint):
        _accum(adjoint, a, g / b_data)
        if b_t is not None:
            _accum(adjoint, b_t, -g * a.data / (b_data * b_data))

    return _node(out, (a, b_t) if b_t is not None else (a,), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g, adjoint):
        _accum(adjoint, a, -g)

    return _node(-a.data, (a,), backward, "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g, adjoint):
        _accum(adjoint, a, g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("'log' requires strictly positive inputs")
    out = np.log(a.data)

    def backward(g, adjoint):
        _accum(adjoint, a, g / a.data)

    return _node(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("'sqrt' requires non-negative inputs")
    out = np.sqrt(a.data)

    def backward(g, adjoint):
        _accum(adjoint, a, g * 0.5 / out)

    return _node(out, (a,), backward, "sqrt")


def power(a: Tensor, p: Scalar) -> Tensor:
    p = float(p)
    out = np.power(a.data, p)
    _ensure_finite(out, "pow")

    def backward(g, adjoint):
        _accum(adjoint, a, g * p * np.power(a.data, p - 1.0) if p != 0.0 else np.zeros_like(a.data))

    return _node(out, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    def backward(g, adjoint):
        _accum(adjoint, a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def backward(g, adjoint):
        _accum(adjoint, a, g * out * (1.0 - out))

    return _node(out, (a,), backward, "sigmoid")


def clamp(a: Tensor, lo: Scalar, hi: Scalar) -> Tensor:
    """Clip values to [lo, hi]; the gradient passes through unclipped entries."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g, adjoint):
        _accum(adjoint, a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward, "clamp")


# -- reductions and shape ops -------------------------------------------------------


def _norm_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not (-ndim <= ax < ndim):
            raise ValueError(f"axis {ax} invalid for ndim {ndim}")
    normed = tuple(sorted(ax % ndim for ax in axes))
    if len(set(normed)) != len(normed):
        raise ValueError(f"duplicate axes in {axes}")
    return normed


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g, adjoint):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        _accum(adjoint, a, np.broadcast_to(gk, a.shape))

    return _node(out, (a,), backward, "sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("'mean' over an empty extent")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g, adjoint):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        _accum(adjoint, a, np.broadcast_to(gk, a.shape) / count)

    return _node(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g, adjoint):
        _accum(adjoint, a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"'transpose' expects a 2-D tensor, got {a.shape}")

    def backward(g, adjoint):
        _accum(adjoint, a, g.T)

    return _node(a.data.T.copy(), (a,), backward, "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast singleton axes of ``a`` up to ``shape`` (same rank)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.ndim:
        raise ValueError(f"'expand' rank mismatch: {a.shape} -> {shape}")
    bcast = tuple(i for i, (s0, s1) in enumerate(zip(a.shape, shape)) if s0 != s1)
    for i in bcast:
        if a.shape[i] != 1:
            raise ValueError(f"'expand' only broadcasts singleton axes: {a.shape} -> {shape}")

    def backward(g, adjoint):
        _accum(adjoint, a, g.sum(axis=bcast, keepdims=True) if bcast else g)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), backward, "expand")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g, adjoint):
        da = np.zeros_like(a.data)
        np.add.at(da, (slice(None),) * axis + (idx,), g)
        _accum(adjoint, a, da)

    return _node(out, (a,), backward, "take")


def stop_gradient(a: Tensor) -> Tensor:
    """Value passthrough that contributes a zero adjoint to its input."""
    return Tensor(a.data, requires_grad=False, _op="stop_gradient")


# -- linear algebra -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise ValueError("'matmul' expects two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"'matmul' expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"'matmul' inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g, adjoint):
        _accum(adjoint, a, g @ b.data.T)
        _accum(adjoint, b, a.data.T @ g)

    return _node(out, (a, b), backward, "matmul")


# -- convolution and pooling ------------------------------------------------------------


def _im2col_matrix(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a [B*Ho*Wo, C*kh*kw] matrix so the conv becomes one GEMM."""
    b, c = xp.shape[:2]
    cols = np.empty((b, ho, wo, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                        j:j + stride * wo:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, padding_mode: str = "zeros") -> Tensor:
    """Batched 2-D cross-correlation (no kernel flip).

    ``x``: [B,C,H,W]; ``weight``: [O,C,kh,kw]; optional ``bias``: [O].
    Output extent (H + 2*padding - kh) must divide ``stride`` exactly.
    ``padding_mode`` "replicate" repeats edge pixels instead of zero-filling,
    which keeps the conv equivariant to global affine intensity maps.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"'conv2d' expects 4-D input/kernel, got {x.shape} and {weight.shape}")
    if padding_mode not in ("zeros", "replicate"):
        raise ValueError("padding_mode must be 'zeros' or 'replicate'")
    b, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise ValueError(f"'conv2d' channel mismatch: input {c} vs kernel {ck}")
    if stride < 1:
        raise ValueError("'conv2d' stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"'conv2d' kernel {kh}x{kw} exceeds padded extent {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError("'conv2d' output extent is not integral for this stride")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"'conv2d' bias shape {bias.shape} != ({o},)")

    if padding:
        pad_spec = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        xp = np.pad(x.data, pad_spec,
                    mode="edge" if padding_mode == "replicate" else "constant")
    else:
        xp = x.data
    cols = _im2col_matrix(xp, kh, kw, stride, ho, wo)  # [B*Ho*Wo, C*kh*kw]
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g, adjoint):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        if weight._in_graph():
            _accum(adjoint, weight, (g2.T @ cols).reshape(o, c, kh, kw))
        if bias is not None:
            _accum(adjoint, bias, g.sum(axis=(0, 2, 3)))
        if x._in_graph():
            dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if not padding:
                dx = dxp
            elif padding_mode == "zeros":
                dx = dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                # replicated border gradients fold back onto their edge sources
                iy = np.clip(np.arange(hp) - padding, 0, h - 1)
                ix = np.clip(np.arange(wp) - padding, 0, w - 1)
                dx = np.zeros_like(x.data)
                np.add.at(dx, (slice(None), slice(None), iy[:, None], ix[None, :]), dxp)
            _accum(adjoint, x, dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    if x.ndim != 4:
        raise ValueError(f"'global_avg_pool' expects [B,C,H,W], got {x.shape}")
    _, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("'global_avg_pool' on an empty spatial extent")
    out = x.data.mean(axis=(2, 3))

    def backward(g, adjoint):
        _accum(adjoint, x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return _node(out, (x,), backward, "global_avg_pool")


def avg_pool2(x: Tensor) -> Tensor:
    """2x spatial downsampling by non-overlapping 2x2 averaging."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"'avg_pool2' needs even spatial extents, got {h}x{w}")
    r = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return reduce_mean(r, axes=(3, 5))


def instance_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-instance, per-channel spatial standardization (x - mu) / sqrt(var + eps).

    Fused op: one node instead of the seven-op composition, with the closed
    form adjoint (1/sigma) * (g - mean(g) - y * mean(g*y)).
    """
    if x.ndim != 4:
        raise ValueError(f"'instance_normalize' expects [B,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError("empty spatial extent")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(x.data.var(axis=(2, 3), keepdims=True) + eps)
    y = (x.data - mu) / sigma

    def backward(g, adjoint):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        _accum(adjoint, x, (g - gm - y * gym) / sigma)

    return _node(y, (x,), backward, "instance_normalize")


# -- finite-difference verification ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    ok: bool
    worst_coord: Optional[tuple] = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    Relative error per coordinate is |a - n| / max(1, |a|, |n|).  ``x`` is
    restored on exit; double precision inputs are assumed.
    """
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    was_requires_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y._in_graph():
        y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.requires_grad = was_requires_grad
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        y_hi = f(x).item()
        flat[i] = orig - h
        y_lo = f(x).item()
        flat[i] = orig
        nflat[i] = (y_hi - y_lo) / (2.0 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite values encountered during grad_check")

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel.reshape(-1)[worst]),
        ok=bool(rel.reshape(-1)[worst] < tol),
        worst_coord=tuple(int(v) for v in np.unravel_index(worst, x.shape)) if x.shape else (),
    )
