"""Minimal N-d tensor with reverse-mode automatic differentiation.

Backed by numpy arrays in row-major layout. The op set is deliberately
small: exactly what the scan kernels, the network and the losses need.
Binary ops require equal shapes (scalars are the only exception); use
``expand`` to materialize a broadcast explicitly.

Gradients accumulate additively into ``.grad``; callers zero them
between optimizer steps. Graph construction can be switched off with
the ``no_grad`` context (thread-local, safe for parallel inference).
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NumericalError",
    "no_grad",
    "grad_enabled",
    "from_op",
    "concat",
    "save_ltns",
    "load_ltns",
]


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf; the computation is invalid."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by '{op}'")


def _is_scalar_like(x) -> bool:
    return np.isscalar(x) or (isinstance(x, np.ndarray) and x.size == 1)


class Tensor:
    """N-d array of reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- autograd core ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Populates ``.grad`` on every reachable tensor that requires
        gradients, exactly once per call (additively across calls).
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def from_op(data: np.ndarray, parents, backward, op: str = "op") -> Tensor:
    """Wrap an op result into the graph.

    ``backward(grad_out)`` must accumulate into each tracked parent via
    ``parent._accumulate``. This is the extension point used by the
    fused kernels outside this module.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and not (a.size == 1 or b.size == 1):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand of a binary op collects the full gradient sum
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape != () else np.asarray(np.sum(g))


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return from_op(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape))

    return from_op(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return from_op(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return from_op(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return from_op(-a.data, (a,), backward, "neg")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)  # overflow becomes inf, rejected by the finiteness check

    def backward(g):
        a._accumulate(g * data)

    return from_op(data, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return from_op(data, (a,), backward, "log")


def tabs(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return from_op(data, (a,), backward, "abs")


def sigmoid(a: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable for large |x|

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return from_op(data, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def backward(g):
        a._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return from_op(data, (a,), backward, "softplus")


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return from_op(data, (a,), backward, "gelu")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return from_op(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        a._accumulate(np.ascontiguousarray(np.transpose(g, inv)))

    return from_op(data, (a,), backward, "transpose")


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Materialize a broadcast of size-1 axes up to ``shape``."""
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise ValueError(f"expand: rank mismatch {a.shape} -> {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(a.shape, shape)):
        if s != t:
            if s != 1:
                raise ValueError(f"expand: axis {i} has size {s}, cannot expand to {t}")
            axes.append(i)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        a._accumulate(g.sum(axis=tuple(axes), keepdims=True))

    return from_op(data, (a,), backward, "expand")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return from_op(data, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return from_op(data, (a,), backward, "narrow")


def index_select(a: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Gather along the last axis: ``out[..., j] = a[..., idx[j]]``.

    ``unique=True`` promises ``idx`` has no repeated entries, enabling
    the fast scatter in the backward pass; with repeats leave it False
    so gradients are accumulated.
    """
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[..., idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        if unique:
            gx[..., idx] = g
        else:
            np.add.at(gx, (..., idx), g)
        a._accumulate(gx)

    return from_op(data, (a,), backward, "index_select")


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g2, a.shape).copy())

    return from_op(np.asarray(data), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return from_op(data, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return from_op(data, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalize ``axis`` to zero mean, unit variance, then scale and shift.

    ``gamma`` and ``beta`` are 1-d of length ``a.shape[axis]``.
    """
    c = a.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: affine params must have shape ({c},)")
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    gshape = [1] * a.ndim
    gshape[axis] = c
    data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward(g):
        red = tuple(i for i in range(a.ndim) if i != axis)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=red))
        if a.requires_grad:
            gx = g * gamma.data.reshape(gshape)
            m1 = gx.mean(axis=axis, keepdims=True)
            m2 = (gx * xhat).mean(axis=axis, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return from_op(data, (a, gamma, beta), backward, "layer_norm")


# -- spatial ops ---------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation on a [C, H, W] map with zero padding.

    ``weight`` is [Cout, Cin/groups, kh, kw]. Supports groups == 1 and
    the depthwise case groups == Cin == Cout.
    """
    ci, h, w = x.shape
    co, cig, kh, kw = weight.shape
    if ci % groups or co % groups or cig != ci // groups:
        raise ValueError(
            f"conv2d: inconsistent channels/groups (in={ci}, out={co}, groups={groups}, w={weight.shape})"
        )
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    depthwise = groups == ci == co
    out = np.zeros((co, ho, wo), dtype=x.dtype)
    wd = weight.data
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di : di + s * ho : s, dj : dj + s * wo : s]
            if depthwise:
                out += wd[:, 0, di, dj][:, None, None] * patch
            elif groups == 1:
                out += (wd[:, :, di, dj] @ patch.reshape(ci, -1)).reshape(co, ho, wo)
            else:
                pr = patch.reshape(groups, cig, -1)
                wg = wd[:, :, di, dj].reshape(groups, co // groups, cig)
                out += np.einsum("goc,gcp->gop", wg, pr).reshape(co, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gflat = g.reshape(co, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for di in range(kh):
            for dj in range(kw):
                sl = np.s_[:, di : di + s * ho : s, dj : dj + s * wo : s]
                patch = xp[sl]
                if depthwise:
                    if gw is not None:
                        gw[:, 0, di, dj] = (g * patch).sum(axis=(1, 2))
                    if gxp is not None:
                        gxp[sl] += wd[:, 0, di, dj][:, None, None] * g
                elif groups == 1:
                    if gw is not None:
                        gw[:, :, di, dj] = gflat @ patch.reshape(ci, -1).T
                    if gxp is not None:
                        gxp[sl] += (wd[:, :, di, dj].T @ gflat).reshape(ci, ho, wo)
                else:
                    pr = patch.reshape(groups, cig, -1)
                    gr = g.reshape(groups, co // groups, -1)
                    wg = wd[:, :, di, dj].reshape(groups, co // groups, cig)
                    if gw is not None:
                        gw[:, :, di, dj] = np.einsum("gop,gcp->goc", gr, pr).reshape(co, cig)
                    if gxp is not None:
                        gxp[sl] += np.einsum("goc,gop->gcp", wg, gr).reshape(ci, ho, wo)
        if gw is not None:
            weight._accumulate(gw)
        if gxp is not None:
            x._accumulate(gxp[:, p : p + h, p : p + w] if p else gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping mean pooling over the trailing two axes."""
    kh, kw = kernel
    h, w = x.shape[-2], x.shape[-1]
    if h % kh or w % kw:
        raise ValueError(f"avg_pool2d: dims ({h}, {w}) not divisible by kernel ({kh}, {kw})")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // kh, kh, w // kw, kw)
    data = blocks.mean(axis=(-3, -1))

    def backward(g):
        ge = g[..., :, None, :, None] / (kh * kw)
        a = np.broadcast_to(ge, (*lead, h // kh, kh, w // kw, kw))
        x._accumulate(a.reshape(x.shape).copy())

    return from_op(data, (x,), backward, "avg_pool2d")


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Repeat each pixel along the trailing two axes; ``factor`` is an int
    or an (fh, fw) pair."""
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    data = np.repeat(np.repeat(x.data, fh, axis=-2), fw, axis=-1)

    def backward(g):
        lead = x.shape[:-2]
        h, w = x.shape[-2], x.shape[-1]
        gr = g.reshape(*lead, h, fh, w, fw).sum(axis=(-3, -1))
        x._accumulate(gr)

    return from_op(data, (x,), backward, "upsample_nearest")


def roll2d(x: Tensor, dh: int, dw: int) -> Tensor:
    """Cyclic shift of the trailing two axes by (dh, dw)."""
    data = np.roll(x.data, (dh, dw), axis=(-2, -1))

    def backward(g):
        x._accumulate(np.roll(g, (-dh, -dw), axis=(-2, -1)))

    return from_op(data, (x,), backward, "roll2d")


def reflect_pad2d(x: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Reflect-pad the trailing two axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pad
    h, w = x.shape[-2], x.shape[-1]
    ri = np.pad(np.arange(h), (pt, pb), mode="reflect")
    ci = np.pad(np.arange(w), (pl, pr), mode="reflect")
    data = x.data[..., ri[:, None], ci[None, :]]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (..., ri[:, None], ci[None, :]), g)
        x._accumulate(gx)

    return from_op(data, (x,), backward, "reflect_pad2d")


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    data = np.ascontiguousarray(x.data[..., top : top + h, left : left + w])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., top : top + h, left : left + w] = g
        x._accumulate(gx)

    return from_op(data, (x,), backward, "crop2d")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the hard values, route gradients to the soft surrogate."""
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through: shape mismatch {hard.shape} vs {soft.shape}")

    def backward(g):
        soft._accumulate(g)

    return from_op(np.asarray(hard, dtype=soft.dtype), (soft,), backward, "straight_through")


# -- portable tensor file format ----------------------------------------------

_LTNS_MAGIC = b"LTNS"
_LTNS_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save_ltns(path, tensor) -> None:
    """Write the LTNS format: magic, version, rank, dims, dtype tag, payload.

    All header fields are little-endian u32; the payload is raw
    little-endian floats, so files are bit-exact across platforms.
    """
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype == np.float32:
        tag, payload = 1, arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        tag, payload = 2, arr.astype("<f8", copy=False)
    else:
        raise ValueError(f"save_ltns: unsupported dtype {arr.dtype} (use f32 or f64)")
    with open(path, "wb") as f:
        f.write(_LTNS_MAGIC)
        f.write(struct.pack("<II", _LTNS_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<I", tag))
        f.write(np.ascontiguousarray(payload).tobytes())


def load_ltns(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()

    def need(n: int, off: int, what: str) -> None:
        if len(blob) < off + n:
            raise ValueError(f"load_ltns: truncated file, needed {what} at byte offset {off}")

    need(4, 0, "magic")
    if blob[:4] != _LTNS_MAGIC:
        raise ValueError(f"load_ltns: bad magic {blob[:4]!r} at byte offset 0")
    need(8, 4, "version/rank")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _LTNS_VERSION:
        raise ValueError(f"load_ltns: unsupported version {version}")
    need(4 * rank, 12, "dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    off = 12 + 4 * rank
    need(4, off, "dtype tag")
    (tag,) = struct.unpack_from("<I", blob, off)
    off += 4
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"load_ltns: unknown dtype tag {tag} at byte offset {off - 4}")
    dt = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if dims else 1
    need(count * dt.itemsize, off, "payload")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(dims)
    return np.ascontiguousarray(arr).astype(dt.newbyteorder("="))
