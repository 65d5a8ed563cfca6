"""A small dense reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives the Bellman-Ford network needs are provided. Binary
elementwise ops accept equal shapes or leading-dimension expansion (the
smaller shape must be a suffix of the larger one); anything else is a
:class:`ShapeError`. Use :func:`broadcast` for other expansions.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, CorruptionError, FormatError, NumericError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference and finite differences)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed",
                 "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return constant(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(data) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = None
    t._consumed = False
    return t


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(data, parents: Sequence[Tensor], backward_fn, op) -> Tensor:
    out = constant(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_expand(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-dimension expansion)")


def _unexpand(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unexpand(g, a.shape), _unexpand(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unexpand(g, a.shape), _unexpand(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unexpand(g * b.data, a.shape), _unexpand(g * a.data, b.shape)),
                   "mul")


elementwise_mul = mul


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    active = a.data > 0
    return _result(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a, low=None, high=None) -> Tensor:
    """Clip values; the gradient is passed only where the input was not clipped."""
    a = _as_tensor(a)
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def dropout(a, mask, p: float) -> Tensor:
    """Inverted dropout with a caller-supplied boolean keep-mask."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {a.shape}")
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout: p must lie in [0, 1), got {p}")
    scale = mask / (1.0 - p)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "dropout")


# reductions and shape ops ------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),),
                   "transpose")


def broadcast(a, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None

    def back(g):
        lead = len(shape) - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=keep, keepdims=True) if keep else g,)

    return _result(out, (a,), back, "broadcast")


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tensors, back, "concat")


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; for integer row lookup use :func:`gather`."""
    a = _as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out), (a,), back, "slice")


class SegmentIndex:
    """Integer ids plus cached structures for segment reductions and gathers."""

    def __init__(self, ids, num_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError("segment ids must be one-dimensional")
        if len(ids) and (ids.min() < 0 or ids.max() >= num_segments):
            raise ArgumentError(f"segment id out of range [0, {num_segments})")
        self.ids = ids
        self.num_segments = int(num_segments)
        self._matrix = None
        self._counts = None
        self._sorted = None

    def __len__(self):
        return len(self.ids)

    @property
    def matrix(self):
        if self._matrix is None:
            n = len(self.ids)
            self._matrix = sp.csr_matrix(
                (np.ones(n), (self.ids, np.arange(n))), shape=(self.num_segments, n))
        return self._matrix

    @property
    def counts(self):
        if self._counts is None:
            self._counts = np.bincount(self.ids, minlength=self.num_segments).astype(np.float64)
        return self._counts

    @property
    def sorted(self):
        if self._sorted is None:
            order = np.argsort(self.ids, kind="stable")
            sorted_ids = self.ids[order]
            nonempty = np.flatnonzero(self.counts > 0)
            starts = np.searchsorted(sorted_ids, nonempty)
            self._sorted = (order, sorted_ids, nonempty, starts)
        return self._sorted

    def scatter_sum(self, values):
        return np.asarray(self.matrix @ values)


def _segments(ids, num_segments):
    return ids if isinstance(ids, SegmentIndex) else SegmentIndex(ids, num_segments)


def gather(a, index) -> Tensor:
    """Rows ``a[index]``; ``index`` may be a :class:`SegmentIndex` to reuse its cache."""
    a = _as_tensor(a)
    seg = _segments(index, a.shape[0])
    if seg.num_segments != a.shape[0]:
        raise ShapeError(f"gather: index built for {seg.num_segments} rows, input has {a.shape[0]}")
    rows = a.data[seg.ids]

    def back(g):
        flat = g.reshape(len(seg), int(np.prod(a.shape[1:], dtype=np.int64)))
        return (seg.scatter_sum(flat).reshape(a.shape),)

    return _result(rows, (a,), back, "gather")


def segment_reduce(messages, segment_ids, num_segments: int | None = None, kind="sum") -> Tensor:
    """Reduce rows of ``messages`` [M x d] into ``num_segments`` rows.

    Empty segments produce zeros. For ``max`` the gradient of each output
    coordinate goes to the lowest-index message attaining it.
    """
    messages = _as_tensor(messages)
    if num_segments is None:
        if not isinstance(segment_ids, SegmentIndex):
            raise ArgumentError("segment_reduce needs num_segments")
        num_segments = segment_ids.num_segments
    seg = _segments(segment_ids, num_segments)
    if seg.num_segments != num_segments:
        raise ArgumentError("segment index built for a different segment count")
    if messages.ndim != 2 or messages.shape[0] != len(seg):
        raise ShapeError(f"segment_reduce: messages {messages.shape} vs {len(seg)} segment ids")
    m = messages.data
    d = m.shape[1]

    if kind == "sum":
        return _result(seg.scatter_sum(m), (messages,), lambda g: (g[seg.ids],), "segment_sum")
    if kind == "mean":
        denom = np.maximum(seg.counts, 1.0)[:, None]
        return _result(seg.scatter_sum(m) / denom, (messages,),
                       lambda g: ((g / denom)[seg.ids],), "segment_mean")
    if kind == "max":
        out = np.zeros((num_segments, d))
        order, sorted_ids, nonempty, starts = seg.sorted
        if len(order) == 0:
            return _result(out, (messages,), lambda g: (np.zeros_like(m),), "segment_max")
        ordered = m[order]
        best = np.maximum.reduceat(ordered, starts, axis=0)
        out[nonempty] = best
        full = out[sorted_ids]
        position = np.where(ordered == full, np.arange(len(order))[:, None], len(order))
        first = np.minimum.reduceat(position, starts, axis=0)
        winner = order[first]  # [nonempty x d] message ids
        cols = np.broadcast_to(np.arange(d), winner.shape)

        def back(g):
            grad = np.zeros_like(m)
            grad[winner, cols] = g[nonempty]
            return (grad,)

        return _result(out, (messages,), back, "segment_max")
    raise ArgumentError(f"segment_reduce: unknown kind {kind!r}")


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalise the last dimension to zero mean / unit (population) variance."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last dimension must be >= 1")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(out, (x, gain, bias), back, "layer_norm")


def complex_rotate(h, theta) -> Tensor:
    """Multiply interleaved complex coordinates ``(re, im)`` of ``h`` by ``exp(i theta)``."""
    h, theta = _as_tensor(h), _as_tensor(theta)
    d = h.shape[-1] if h.ndim else 0
    if d % 2:
        raise ShapeError(f"complex_rotate: last dimension must be even, got {d}")
    expected = h.shape[:-1] + (d // 2,)
    if theta.shape != expected and theta.shape != expected[len(expected) - theta.ndim:]:
        raise ShapeError(f"complex_rotate: theta shape {theta.shape} incompatible with {h.shape}")
    re, im = h.data[..., 0::2], h.data[..., 1::2]
    c, s = np.cos(theta.data), np.sin(theta.data)
    out_re = re * c - im * s
    out_im = re * s + im * c
    out = np.empty(np.broadcast_shapes(h.shape, expected[:-1] + (d,)))
    out[..., 0::2] = out_re
    out[..., 1::2] = out_im

    def back(g):
        g_re, g_im = g[..., 0::2], g[..., 1::2]
        dh = np.empty_like(g)
        dh[..., 0::2] = g_re * c + g_im * s
        dh[..., 1::2] = -g_re * s + g_im * c
        dtheta = -g_re * out_im + g_im * out_re
        return _unexpand(dh, h.shape), _unexpand(dtheta, theta.shape)

    return _result(out, (h, theta), back, "complex_rotate")


# backward ---------------------------------------------------------------


def _topological(loss):
    order, state = [], {}
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle in recorded computation")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise RuntimeError("cycle in recorded computation")
                if pmark is None:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The recorded graph is released afterwards; calling again on the same
    loss raises :class:`ArgumentError`.
    """
    if not isinstance(loss, Tensor):
        raise ArgumentError("backward expects a Tensor")
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ArgumentError("backward already ran on this loss; re-run the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._consumed and node is not loss:
                raise ArgumentError("computation graph was already released by an earlier backward")
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-4) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over all parameter entries.

    ``fn`` must rebuild the scalar loss from ``params`` on every call.
    Numeric derivatives use central differences with step ``eps``.
    """
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                up = fn().item()
                flat[i] = saved - eps
                down = fn().item()
                flat[i] = saved
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"grad_check: non-finite loss while perturbing entry {i}")
                numeric = (up - down) / (2 * eps)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


# optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update of ``params`` (name -> Tensor), in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ArgumentError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.first[name], state.second[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# tensor payload ------------------------------------------------------------

MAGIC = b"NBF1"


def write_tensors(fout, named: Iterable[tuple[str, np.ndarray]]):
    """Write ``NBF1``, a tensor count, then (name, rank, dims, float64 LE data) records."""
    items = [(name, np.asarray(arr, dtype="<f8")) for name, arr in named]
    fout.write(MAGIC)
    fout.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        fout.write(struct.pack("<I", len(raw)))
        fout.write(raw)
        fout.write(struct.pack("<I", arr.ndim))
        fout.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fout.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fin, n):
    chunk = fin.read(n)
    if len(chunk) != n:
        raise CorruptionError(f"tensor payload truncated (wanted {n} bytes, got {len(chunk)})")
    return chunk


def read_tensors(fin) -> dict[str, np.ndarray]:
    magic = fin.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor payload magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(fin, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fin, 4))
        name = _read_exact(fin, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fin, 4))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fin, 8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(_read_exact(fin, 8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    return out
