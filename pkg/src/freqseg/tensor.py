"""Dense float64 tensors with tape-based reverse accumulation.

Values live in numpy arrays (row-major, float64). Every exported operation
computes its forward result and, when a :class:`Tape` is active and at least
one input needs a gradient, records a node holding the closure that maps the
output gradient back onto its inputs. ``Tape.backward`` replays the nodes in
reverse recording order, so the accumulation order is fixed and the result is
deterministic.
"""

from __future__ import annotations

import contextvars
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
# forward ops keep a wider input dtype instead of narrowing to float64; only
# the finite-difference side of grad_check uses this
WIDE_DTYPE = np.longdouble
_KEEP = (np.dtype(DTYPE), np.dtype(WIDE_DTYPE))

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "freqseg_active_tape", default=None
)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateStatisticsError(ValueError):
    """Raised when a normalization has too few entries to form statistics."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be evaluated (non-finite loss)."""


class Tensor:
    """Immutable-by-convention float64 array that may carry a tape identity."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype not in _KEEP:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return total(self)


class Param(Tensor):
    """Learnable value paired with an additive gradient accumulator."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Records operations executed inside ``with Tape():`` for reverse replay.

    A tape belongs to one forward/backward pass; do not share it across
    threads.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def gradients(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> dict[int, np.ndarray]:
        """Propagate from ``loss`` and return gradients keyed by ``id(tensor)``."""
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward from non-scalar tensor of shape {loss.shape} needs a seed")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            if not isinstance(node.output, Param):
                del grads[id(node.output)]
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return grads

    def backward(self, loss: Tensor, params: Optional[Iterable[Param]] = None) -> None:
        """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Param."""
        grads = self.gradients(loss)
        if params is None:
            params = _params_on_tape(self)
        for p in params:
            g = grads.get(id(p))
            if g is not None:
                p.grad += g


def _params_on_tape(tape: Tape) -> list[Param]:
    seen: dict[int, Param] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if isinstance(inp, Param):
                seen.setdefault(id(inp), inp)
    return list(seen.values())


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register its backward rule on the active tape."""
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out_data = np.asarray(out_data)
    dtype = out_data.dtype if out_data.dtype in _KEEP else DTYPE
    out = Tensor(np.asarray(out_data, dtype=dtype, order="C"), requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a plain float or array treated as a constant."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=DTYPE)
        return record(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul_const")
    out = a.data * b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); gradient sums the copies back."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    return record(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "expand")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return record(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def total(x: Tensor) -> Tensor:
    return record(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def sum_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), backward, "sum_axis")


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights."""
    w = np.asarray(weights, dtype=DTYPE)
    return record(np.array((x.data * w).sum()), (x,), lambda g: (float(g) * w,), "weighted_sum")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (..., M, K) by (..., K, P) with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g))

    return record(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), backward, "softmax")


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Pointwise channel mixing of a (B, Cin, H, W) map by a (Cout, Cin) weight."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1x1 channel mismatch: input {x.shape}, weight {weight.shape}")
    w = weight.data
    # one gemm over all pixels of the batch, so results do not depend on batch size
    out = np.moveaxis(np.tensordot(w, x.data, axes=(1, 1)), 0, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = np.moveaxis(np.tensordot(w, g, axes=(0, 1)), 0, 1)
        gw = np.tensordot(g, x.data, axes=((0, 2, 3), (0, 2, 3)))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, inputs, backward, "conv1x1")


def normalize_groups(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over axis 0 (the frequency groups), then apply ``gamma * z + beta``.

    Each index along the trailing axes is an independent sample, so an input of
    shape (n, 1, 1, 1) is one sample and (n, B) is a batch of B samples.
    """
    n = x.shape[0]
    if n < 2:
        raise DegenerateStatisticsError(f"normalize_groups needs at least 2 entries, got {n}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = xc * inv
    gm, bt = gamma.data.reshape(()), beta.data.reshape(())
    out = gm * z + bt

    def backward(g):
        gz = g * gm
        gx = inv * (gz - gz.mean(axis=0, keepdims=True) - z * (gz * z).mean(axis=0, keepdims=True))
        return (gx, np.reshape((g * z).sum(), gamma.shape), np.reshape(g.sum(), beta.shape))

    return record(out, (x, gamma, beta), backward, "normalize_groups")


# ----------------------------------------------------------------------------
# spatial resampling


def pool_matrix(size: int, bins: int) -> np.ndarray:
    """(bins, size) averaging matrix; bin i spans floor(i*size/bins)..ceil((i+1)*size/bins)-1."""
    m = np.zeros((bins, size), dtype=DTYPE)
    for i in range(bins):
        lo = (i * size) // bins
        hi = -((-(i + 1) * size) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix, half-pixel centers, clamped at the edges."""
    m = np.zeros((dst, src), dtype=DTYPE)
    scale = dst / src
    for d in range(dst):
        s = (d + 0.5) / scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        lo = int(math.floor(s))
        hi = min(lo + 1, src - 1)
        frac = s - lo
        m[d, lo] += 1.0 - frac
        m[d, hi] += frac
    return m


def separable_resample(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "resample") -> Tensor:
    """Apply ``rows @ X @ cols.T`` to the last two axes of ``x``."""
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return record(out, (x,), backward, op)


def adaptive_avg_pool(x: Tensor, n: int) -> Tensor:
    """Average-pool the last two axes of ``x`` (e.g. C x H x W) down to n x n."""
    h, w = x.shape[-2:]
    if n < 1 or h < 1 or w < 1:
        raise DimensionError(f"adaptive_avg_pool needs positive sizes, got {x.shape} -> {n}")
    return separable_resample(x, pool_matrix(h, n), pool_matrix(w, n), "adaptive_avg_pool")


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    return separable_resample(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "resize_bilinear")


# ----------------------------------------------------------------------------
# verification


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-6,
    extended: bool = True,
) -> float:
    """Max relative error between tape gradients and central differences.

    Per entry the error is ``|a - n| / max(1e-8, |a| + |n|)``. ``loss_fn`` must
    rebuild the scalar loss from the current parameter values on every call.
    Parameter gradients are zeroed before the analytic (float64) pass and are
    left holding the analytic gradient.

    With ``extended`` the perturbed losses are evaluated with parameters held
    in ``np.longdouble``. A float64 loss near 1 is only resolved to ~2e-16, so
    float64 central differences at eps=1e-6 carry ~1e-10 of noise, which
    swamps the relative error of any gradient entry below ~1e-5. Where
    longdouble is no wider than float64 this silently degrades to float64.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"non-finite loss {loss.data!r}")
    tape.backward(loss, params)

    def evaluate() -> float:
        val = np.asarray(loss_fn().data).reshape(())
        if not np.isfinite(val):
            raise GradCheckError(f"non-finite loss {val!r} during finite differences")
        return val

    originals = [p.data for p in params]
    if extended:
        for p in params:
            p.data = p.data.astype(WIDE_DTYPE)
    worst = 0.0
    try:
        for p in params:
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                f_plus = evaluate()
                flat[k] = orig - eps
                f_minus = evaluate()
                flat[k] = orig
                numeric = float((f_plus - f_minus) / (2 * flat.dtype.type(eps)))
                a = float(analytic[k])
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, rel)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst


# ----------------------------------------------------------------------------
# FDLT serialization

FDLT_MAGIC = b"FDLT"


class FormatError(ValueError):
    """Raised for malformed binary payloads."""


def dumps_fdlt(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = FDLT_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads_fdlt(buf: bytes) -> np.ndarray:
    if buf[:4] != FDLT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 5:
        raise FormatError("truncated header at offset 4")
    rank = buf[4]
    end = 5 + 8 * rank
    if len(buf) < end:
        raise FormatError(f"truncated dims at offset {len(buf)}")
    shape = struct.unpack(f"<{rank}Q", buf[5:end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != end + 8 * count:
        raise FormatError(f"payload size {len(buf) - end} != {8 * count} at offset {end}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(DTYPE).reshape(shape)


def save_fdlt(path, x) -> None:
    Path(path).write_bytes(dumps_fdlt(x))


def load_fdlt(path) -> Tensor:
    return Tensor(loads_fdlt(Path(path).read_bytes()))
