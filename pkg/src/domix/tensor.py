"""Dense tensors and a reverse-mode gradient tape.

float32 is the working precision for training; float64 is available so
finite-difference checks stay trustworthy (ops preserve the dtype of their
inputs). Buffers are always row-major contiguous. Randomness comes from
numpy's Philox bit generator -- a 64-bit counter-based generator -- so a
single integer seed reproduces every stream within this implementation.

The tape is thread-local: tensors and the tape that recorded them belong to
one thread of execution, which is what makes independent training runs on
separate threads safe without any coordination.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based generator from a single integer seed."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent deterministic streams derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


class Tensor:
    """A dense float array plus optional gradient state.

    Invariants: ``data`` is C-contiguous; ``grad`` (when present) matches
    ``data`` in shape and dtype; a tensor with ``requires_grad=False`` never
    accumulates a grad buffer. Only leaf tensors (created directly rather
    than by an op) receive ``.grad`` during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: Array = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._tape: GradTape | None = None
        self._is_leaf = True

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

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_local = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable ops for one backward pass.

    Used as a context manager; ops executed inside record themselves when
    any input requires grad. ``backward`` replays the records in reverse
    recording order, visiting each exactly once, then clears the tape.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.closed = False

    def __enter__(self) -> "GradTape":
        if self.closed:
            raise ContractError("cannot re-enter a consumed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and not tape.closed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape.records.append((out, tuple(inputs), bwd))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    The tape that recorded ``loss`` is consumed: records are replayed once in
    reverse order and then cleared.
    """
    tape = loss._tape
    if tape is None or tape.closed:
        raise ContractError("backward: loss was not produced under an active tape")
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, bwd(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                held = grads.get(id(t))
                grads[id(t)] = gi if held is None else held + gi
    tape.records.clear()
    tape.closed = True


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. Backward accumulates g @ b^T and a^T @ g."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g: Array):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on stacks of matrices: [B,m,k] @ [B,k,n]."""
    _check_same_dtype(a, b, "bmm")
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g: Array):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w^T (+ b). ``x`` is [..., n], ``w`` is [m, n], ``b`` is [m]."""
    _check_same_dtype(x, w, "linear")
    n = w.shape[1]
    if x.shape[-1] != n:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    xd, wd = x.data, w.data

    def bwd(g: Array):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, n)
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# elementwise / reduction ops (numpy-style broadcasting; backward reduces
# over broadcast axes)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        out = Tensor(a.data + b.data)
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} + {b.shape}") from e
    sa, sb = a.shape, b.shape

    def bwd(g: Array):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    try:
        out = Tensor(a.data - b.data)
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} - {b.shape}") from e
    sa, sb = a.shape, b.shape

    def bwd(g: Array):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        out = Tensor(a.data * b.data)
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} * {b.shape}") from e
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bwd(g: Array):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)

    def bwd(g: Array):
        return (g * c,)

    return _record(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    shape = a.shape

    def bwd(g: Array):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _record(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
    shape, n = a.shape, a.size

    def bwd(g: Array):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, a.dtype.type(0)))

    def bwd(g: Array):
        return (g * mask,)

    return _record(out, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu (no erf needed, fully differentiable)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = Tensor((0.5 * x * (1.0 + t)).astype(a.dtype))

    def bwd(g: Array):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return (g * d.astype(g.dtype),)

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; output rows along ``axis`` sum to 1."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(a.dtype))
    yd = out.data

    def bwd(g: Array):
        inner = (g * yd).sum(axis=axis, keepdims=True)
        return (yd * (g - inner),)

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    _check_same_dtype(x, gain, "layer_norm")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor((xhat * gain.data + bias.data).astype(x.dtype))
    gd = gain.data

    def bwd(g: Array):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        flat_g = g.reshape(-1, g.shape[-1])
        flat_xhat = xhat.reshape(-1, xhat.shape[-1])
        ggain = (flat_g * flat_xhat).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        return gx.astype(g.dtype), ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) at train time.

    With p == 0 or train == False this is the identity and consumes no
    randomness, so disabling dropout leaves every other stream untouched.
    """
    if not train or p <= 0.0:
        return x
    if not (0.0 <= p < 1.0):
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout: an rng is required in train mode")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    inv = x.dtype.type(1.0 / (1.0 - p))
    out = Tensor(x.data * keep * inv)

    def bwd(g: Array):
        return (g * keep * inv,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# indexing / shaping


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row lookup: ids of any shape -> ids.shape + (dim,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])
    tshape = table.shape

    def bwd(g: Array):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _record(out, (table,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.reshape(shape)))
    orig = a.shape

    def bwd(g: Array):
        return (g.reshape(orig),)

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g: Array):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(out, (a,), bwd)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis``, dropping that axis."""
    out = Tensor(np.ascontiguousarray(np.take(a.data, index, axis=axis)))
    shape = a.shape

    def bwd(g: Array):
        ga = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _record(out, (a,), bwd)


def slice_rows(a: Tensor, length: int) -> Tensor:
    """First ``length`` rows of a 2-D tensor (used for positional tables)."""
    out = Tensor(np.ascontiguousarray(a.data[:length]))
    shape = a.shape

    def bwd(g: Array):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[:length] = g
        return (ga,)

    return _record(out, (a,), bwd)


def gather_rows(a: Tensor, rows: Array, cols: Array) -> Tensor:
    """Gather vectors a[rows[i], cols[i], :] from a 3-D tensor into [K, V]."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(np.ascontiguousarray(a.data[rows, cols]))
    shape = a.shape

    def bwd(g: Array):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), bwd)


def cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    ``logits`` is [N, C]; ``targets`` is [N] with every value in [0, C).
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"cross_entropy: class index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bwd(g: Array):
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    return _record(out, (logits,), bwd)


def softmax_np(v: Array, axis: int = -1) -> Array:
    """Plain-array softmax for analysis paths that never touch the tape."""
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
