"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping
the output gradient to per-parent gradients. Nodes receive increasing
``node_id`` values at creation, so parents always carry smaller ids than
their children; ``backward`` walks the reachable nodes in descending id
order, which is a valid reverse topological order without an explicit sort
of the graph structure.

Convolutions are cross-correlations (no kernel flip). Binary ops require
equal shapes; the only broadcast is multiplication or shift by a Python
scalar.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, FormatError, NumericsError, ShapeError

_node_ids = itertools.count()
_DEBUG = os.environ.get("MODDROP_DEBUG", "") not in ("", "0")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericsError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Accumulation is additive; callers zero gradients between steps.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.is_leaf:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a non-negative base (any base if exponent is integral)."""
    e = float(exponent)
    if not e.is_integer() and np.any(a.data < 0):
        raise DomainError("power: negative base with non-integer exponent")

    def grad(g):
        if e == 0.0:
            return (np.zeros_like(a.data),)
        return (g * e * a.data ** (e - 1.0),)

    return _result(a.data**e, (a,), grad, "power")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


ELEMENTWISE_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "log": log,
    "neg": neg,
}
ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes a Python scalar as ``b``."""
    if kind in ELEMENTWISE_UNARY:
        return ELEMENTWISE_UNARY[kind](a)
    if kind in ELEMENTWISE_BINARY:
        return ELEMENTWISE_BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions & shape


def sum_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("sum of empty tensor")
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    n = a.size
    return _result(
        np.array(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean"
    )


def reduce(a: Tensor, kind: str = "mean") -> Tensor:
    if kind == "mean":
        return mean_all(a)
    if kind == "sum":
        return sum_all(a)
    raise ConfigError(f"unknown reduction {kind!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), grad, "getitem")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {p.shape} incompatible")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _result(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        if len(p.shape) != 4:
            raise ShapeError(f"concat_channels expects [N,C,H,W], got {p.shape}")
    return concat(parts, axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D or 2-D @ 1-D."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad, "matmul")


def scale_kernels(weight: Tensor, scales: Tensor) -> Tensor:
    """Multiply kernel ``weight[o, i]`` by the scalar ``scales[i, o]``."""
    v, u = weight.shape[:2]
    if weight.data.ndim != 4 or scales.shape != (u, v):
        raise ShapeError(f"scale_kernels: weight {weight.shape} vs scales {scales.shape}")
    factor = scales.data.T[:, :, None, None]

    def grad(g):
        return g * factor, (g * weight.data).sum(axis=(2, 3)).T

    return _result(weight.data * factor, (weight, scales), grad, "scale_kernels")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,p,q], zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, c_w, p, q = weight.shape
    if c != c_w:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_w}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    if p > h + 2 * padding or q > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {p}x{q} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, p, stride, padding)
    wo = conv_output_size(w, q, stride, padding)

    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wk = weight.data

    def window(arr, a, b):
        return arr[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]

    acc = np.zeros((o, n, ho, wo))
    for a in range(p):
        for b in range(q):
            acc += np.tensordot(wk[:, :, a, b], window(xc, a, b), axes=(1, 0))
    if bias is not None:
        acc += bias.data[:, None, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def grad(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gx = np.zeros_like(xc) if x.requires_grad else None
        gw = np.empty_like(wk) if weight.requires_grad else None
        for a in range(p):
            for b in range(q):
                if gx is not None:
                    window(gx, a, b)[...] += np.tensordot(wk[:, :, a, b].T, gc, axes=(1, 0))
                if gw is not None:
                    gw[:, :, a, b] = np.tensordot(gc, window(xc, a, b), axes=([1, 2, 3], [1, 2, 3]))
        if gx is not None:
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        gb = gc.sum(axis=(1, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad if bias is not None else (lambda g: grad(g)[:2]), "conv2d")


def gaussian_kernel_1d(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _reflect_filter_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Matrix applying a 1-D kernel with reflection padding (edge not repeated)."""
    r = len(kernel) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for t, k in enumerate(kernel):
            j = i + t - r
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            mat[i, j] += k
    return mat


def gaussian_window_filter(x: Tensor, window: int, sigma: float) -> Tensor:
    """Per-channel normalized Gaussian smoothing with reflection padding.

    The 2-D kernel is the outer product of a normalized 1-D kernel, applied
    as two matrix products along H and W.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"gaussian window must be a positive odd integer, got {window}")
    if sigma <= 0:
        raise ConfigError("gaussian sigma must be positive")
    if x.data.ndim != 4:
        raise ShapeError(f"gaussian_window_filter expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    r = window // 2
    if r > h - 1 or r > w - 1:
        raise ConfigError(f"window {window} too large for reflection padding of {h}x{w}")
    k = gaussian_kernel_1d(window, sigma)
    ah = _reflect_filter_matrix(h, k)
    aw = _reflect_filter_matrix(w, k)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,), "gaussian_filter")


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    analytic: list[np.ndarray] = field(repr=False, default_factory=list)
    numeric: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds the graph from the current leaf values on each call. The
    per-leaf error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. relative to that leaf's gradient scale.
    """
    if h <= 0:
        raise ConfigError("grad_check step h must be positive")
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: non-finite loss")
    backward(loss)

    report = GradCheckReport(errors=[], tol=tol)
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericsError(f"grad_check: non-finite loss at element {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        if not np.all(np.isfinite(analytic)):
            raise NumericsError("grad_check: non-finite analytic gradient")
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic - numeric).max(initial=0.0)
        report.errors.append(0.0 if denom == 0.0 else diff / denom)
        report.analytic.append(analytic.copy())
        report.numeric.append(numeric)
    return report


# ---------------------------------------------------------------- MDT1 binary format

MDT1_MAGIC = b"MDT1"


def encode_mdt1(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise ShapeError("MDT1 supports rank <= 255")
    head = MDT1_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_mdt1(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one MDT1 payload starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MDT1_MAGIC:
        raise FormatError("bad MDT1 magic", offset)
    pos = offset + 4
    if pos + 1 > len(buf):
        raise FormatError("truncated MDT1 header", pos)
    rank = buf[pos]
    pos += 1
    if pos + 4 * rank > len(buf):
        raise FormatError("truncated MDT1 extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated MDT1 data: need {4 * count} bytes", pos)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
    return data.reshape(shape), end


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mdt1(array.data if isinstance(array, Tensor) else array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_mdt1(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after MDT1 payload in {path}", end)
    return arr


def to_float32_precision(array: np.ndarray) -> np.ndarray:
    """Round float64 values to what survives an MDT1 save/load cycle."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)

