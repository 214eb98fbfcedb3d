"""Dense tensors with reverse-mode automatic differentiation.

Every operation the image branch, the text branch, and the fusion head need
is implemented here with an explicit backward rule. Arrays are numpy-backed;
internal arithmetic always runs in float64 even when a tensor stores float32,
so finite-difference checks stay meaningful at narrow precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_SWITCH_SINK: Optional[list] = None


@contextmanager
def capture_switch_signature():
    """Record the discrete choices (ReLU masks, pooling argmax/argmin picks)
    of every op that runs inside the context.

    Two forward passes with equal signatures lie in the same smooth region of
    the piecewise-differentiable network, which is the precondition for
    finite-difference gradient comparison. Verification aid; not thread safe.
    """
    global _SWITCH_SINK
    prev = _SWITCH_SINK
    sink: list[bytes] = []
    _SWITCH_SINK = sink
    try:
        yield sink
    finally:
        _SWITCH_SINK = prev


def _record_switch(payload: np.ndarray) -> None:
    if _SWITCH_SINK is not None:
        _SWITCH_SINK.append(payload.tobytes())


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def _coerce_values(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(np.float64)


class Tensor:
    """N-dimensional array plus an optional gradient buffer.

    ``values`` is row-major and its shape is fixed at creation. Tensors
    produced by operations are treated as immutable; parameters (leaves)
    may be updated in place by an optimizer between backward passes.
    ``grad`` matches ``values`` in shape and dtype once populated.
    """

    __slots__ = ("values", "requires_grad", "grad", "_op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.values = _coerce_values(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[str] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def numel(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def backward(self) -> None:
        backward(self)

    # -- composition helpers -------------------------------------------------

    def sum(self) -> "Tensor":
        return _sum(self)

    def mean(self) -> "Tensor":
        return _mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def flatten(self) -> "Tensor":
        return _reshape(self, (-1,))

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.values.dtype}"
        if self._op:
            head += f", op={self._op}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"


def _make_node(values: np.ndarray, op: str, parents: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
               out_dtype=None) -> Tensor:
    """Wrap an op result; the backward context is kept only when needed."""
    if out_dtype is None:
        out_dtype = np.result_type(*(p.values.dtype for p in parents))
    out = Tensor(values.astype(out_dtype, copy=False))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


class ComputeGraph:
    """Topologically ordered view of the nodes reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # leaves first, root last

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # Iterative post-order DFS; graphs can be deep for long training chains.
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from ``loss``.

    ``loss`` must hold a single element. Gradients accumulate across calls;
    use ``zero_grads`` (or ``Tensor.zero_grad``) to reset between steps.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph.from_root(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            contribution = g.astype(node.values.dtype, copy=False)
            if node.grad is None:
                node.grad = contribution.copy()
            else:
                node.grad = node.grad + contribution
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# -- elementwise and structural ops -----------------------------------------


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "add")
    vals = _f64(a.values) + _f64(b.values)

    def back(g):
        return (_unreduce(g, a.shape), _unreduce(g, b.shape))

    return _make_node(vals, "add", (a, b), back)


def _sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "sub")
    vals = _f64(a.values) - _f64(b.values)

    def back(g):
        return (_unreduce(g, a.shape), _unreduce(-g, b.shape))

    return _make_node(vals, "sub", (a, b), back)


def _mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "mul")
    av, bv = _f64(a.values), _f64(b.values)
    vals = av * bv

    def back(g):
        return (_unreduce(g * bv, a.shape), _unreduce(g * av, b.shape))

    return _make_node(vals, "mul", (a, b), back)


def _unreduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-vs-array mixing is supported, so a full sum suffices.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else np.broadcast_to(g, shape).copy()


def _sum(t: Tensor) -> Tensor:
    vals = np.asarray(_f64(t.values).sum())

    def back(g):
        return (np.full(t.shape, float(g), dtype=np.float64),)

    return _make_node(vals, "sum", (t,), back)


def _mean(t: Tensor) -> Tensor:
    n = t.values.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    vals = np.asarray(_f64(t.values).mean())

    def back(g):
        return (np.full(t.shape, float(g) / n, dtype=np.float64),)

    return _make_node(vals, "mean", (t,), back)


def _reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    vals = t.values.reshape(shape)
    in_shape = t.shape

    def back(g):
        return (g.reshape(in_shape),)

    return _make_node(vals, "reshape", (t,), back)


def relu(t: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = t.values > 0
    _record_switch(np.packbits(mask.reshape(-1)))
    vals = np.where(mask, _f64(t.values), 0.0)

    def back(g):
        return (g * mask,)

    return _make_node(vals, "relu", (t,), back)


def tanh_op(t: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent."""
    y = np.tanh(_f64(t.values))

    def back(g):
        return (g * (1.0 - y * y),)

    return _make_node(y, "tanh", (t,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` (m, k) with a 2-D ``b`` (k, n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    av, bv = _f64(a.values), _f64(b.values)
    vals = av @ bv

    def back(g):
        return (g @ bv.T, av.T @ g)

    return _make_node(vals, "matmul", (a, b), back)


def bias_add(mat: Tensor, vec: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an (m, n) matrix."""
    if mat.ndim != 2 or vec.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {mat.shape} and {vec.shape}")
    vals = _f64(mat.values) + _f64(vec.values)[None, :]

    def back(g):
        return (g, g.sum(axis=0))

    return _make_node(vals, "bias_add", (mat, vec), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient back."""
    if len(parts) == 0:
        raise ShapeError("concat of an empty list")
    ndim = parts[0].ndim
    if ndim == 0:
        raise ShapeError("concat needs at least 1-D tensors")
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for {ndim}-D parts")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        other = list(p.shape)
        if ref[:axis] != other[:axis] or ref[axis + 1:] != other[axis + 1:]:
            raise ShapeError(f"concat: non-axis extents differ, {parts[0].shape} vs {p.shape}")
    vals = np.concatenate([_f64(p.values) for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return outs

    return _make_node(vals, "concat", tuple(parts), back)


# -- convolution stack ops ---------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate a (C_in, H, W) input with (C_out, C_in, kh, kw) kernels.

    Output spatial extents follow floor((H + 2*pad - kh) / stride) + 1. The
    forward lowers to an im2col matrix product; backward produces gradients
    for the input, the kernels, and the per-output-channel bias.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be (C_out, C_in, kh, kw), got {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernels expect {kc}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be nonnegative, got {pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel ({kh}, {kw}) exceeds padded input ({h + 2 * pad}, {w + 2 * pad})")

    xp = _f64(x.values)
    if pad:
        xp = np.pad(xp, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    kmat = _f64(kernels.values).reshape(c_out, -1)
    out = cols @ kmat.T + _f64(bias.values)[None, :]
    vals = out.T.reshape(c_out, ho, wo)
    cols = np.ascontiguousarray(cols)

    def back(g):
        gmat = g.transpose(1, 2, 0).reshape(ho * wo, c_out)
        dk = (gmat.T @ cols).reshape(c_out, c_in, kh, kw)
        db = gmat.sum(axis=0)
        dcols = (gmat @ kmat).reshape(ho, wo, c_in, kh, kw)
        dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        for i in range(kh):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            for j in range(kw):
                cols_sl = slice(j, j + stride * (wo - 1) + 1, stride)
                dxp[:, rows, cols_sl] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        return (dx, dk, db)

    return _make_node(vals, "conv2d", (x, kernels, bias), back)


def maxpool2d(t: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum over a (C, H, W) tensor.

    Gradient routes to the first (row-major) argmax inside each window, which
    keeps backward deterministic under ties.
    """
    if t.ndim != 3:
        raise ShapeError(f"maxpool2d input must be (C, H, W), got {t.shape}")
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: window and stride must be positive, got {window}, {stride}")
    c, h, w = t.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: window {window} exceeds input ({h}, {w})")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    v = _f64(t.values)
    win = sliding_window_view(v, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=3)
    _record_switch(arg.astype(np.int32))
    vals = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def back(g):
        dx = np.zeros((c, h, w))
        ci = np.arange(c)[:, None, None]
        ri = np.arange(ho)[None, :, None] * stride + arg // window
        cj = np.arange(wo)[None, None, :] * stride + arg % window
        np.add.at(dx, (np.broadcast_to(ci, arg.shape), ri, cj), g)
        return (dx,)

    return _make_node(vals, "maxpool2d", (t,), back)


def lrn(t: Tensor, depth_radius: int = 2, k: float = 2.0,
        alpha: float = 1e-4, beta: float = 0.75) -> Tensor:
    """Local response normalization across channels of a (C, H, W) tensor.

    b_c = a_c / (k + alpha * sum_{c' in [c-r, c+r]} a_{c'}^2) ** beta, with the
    channel window clipped at the tensor edges.
    """
    if t.ndim != 3:
        raise ShapeError(f"lrn input must be (C, H, W), got {t.shape}")
    if k <= 0:
        raise ValueError(f"lrn: k must be positive to keep the denominator bounded, got {k}")
    if depth_radius < 0:
        raise ValueError(f"lrn: depth_radius must be nonnegative, got {depth_radius}")
    v = _f64(t.values)
    c = v.shape[0]
    sq = v * v
    denom = np.full_like(v, float(k))
    for off in range(-depth_radius, depth_radius + 1):
        lo, hi = max(0, -off), min(c, c - off)
        denom[lo:hi] += alpha * sq[lo + off:hi + off]
    scale = denom ** (-beta)
    vals = v * scale

    def back(g):
        inner = g * v * denom ** (-beta - 1.0)
        acc = np.zeros_like(v)
        for off in range(-depth_radius, depth_radius + 1):
            lo, hi = max(0, -off), min(c, c - off)
            acc[lo:hi] += inner[lo + off:hi + off]
        return (g * scale - 2.0 * alpha * beta * v * acc,)

    return _make_node(vals, "lrn", (t,), back)


# -- pooling over feature maps and the loss ----------------------------------


def triple_pool(c: Tensor) -> Tensor:
    """Pool a 1-D feature map into [max, mean, min]."""
    if c.ndim != 1:
        raise ShapeError(f"triple_pool needs a 1-D feature map, got {c.shape}")
    return triple_pool_columns(c.reshape(-1, 1)).reshape(3)


def triple_pool_columns(t: Tensor) -> Tensor:
    """Pool each column of an (L, F) matrix into a row [max, mean, min].

    Returns an (F, 3) tensor; max and min gradients route to the first
    occurrence along the column, mean spreads uniformly.
    """
    if t.ndim != 2:
        raise ShapeError(f"triple_pool_columns needs an (L, F) matrix, got {t.shape}")
    ln, f = t.shape
    if ln == 0:
        raise ShapeError("triple_pool of an empty feature map")
    v = _f64(t.values)
    amax = v.argmax(axis=0)
    amin = v.argmin(axis=0)
    _record_switch(np.stack([amax, amin]).astype(np.int32))
    mx = v.max(axis=0)
    mn = v.min(axis=0)
    # constant columns pool to the shared value exactly; sum/L would round
    mean = np.where(mx == mn, mx, v.mean(axis=0))
    vals = np.stack([mx, mean, mn], axis=1)

    def back(g):
        d = np.zeros((ln, f))
        cols = np.arange(f)
        np.add.at(d, (amax, cols), g[:, 0])
        d += g[:, 1][None, :] / ln
        np.add.at(d, (amin, cols), g[:, 2])
        return (d,)

    return _make_node(vals, "triple_pool", (t,), back)


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax of a 1-D array computed with max subtraction, in float64."""
    z = _f64(np.asarray(logits))
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of a 1-D logit vector against an integer class label.

    Computed as logsumexp(logits) - logits[label] after max subtraction;
    backward yields softmax(logits) minus the one-hot label vector.
    """
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy needs 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    z = _f64(logits.values)
    m = z.max()
    shifted = z - m
    lse = np.log(np.exp(shifted).sum())
    vals = np.asarray(lse - shifted[label])

    def back(g):
        p = np.exp(shifted - lse)
        p[label] -= 1.0
        return (float(g) * p,)

    return _make_node(vals, "softmax_cross_entropy", (logits,), back)
