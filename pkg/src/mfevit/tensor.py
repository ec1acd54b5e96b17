"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive below computes its forward value with numpy and, when any
input requires a gradient, appends a :class:`TapeEntry` holding the inputs,
the output and a backward rule to the active :class:`Tape`. Calling
:func:`backward` on a scalar walks the tape in reverse and accumulates
gradients into the ``grad`` buffer of every leaf tensor.

Broadcasting is deliberately narrow: an operand may only be broadcast along
*leading* axes (``b.shape`` must be a suffix of ``a.shape``). That covers
per-row affine maps and leading batch axes; anything else is a
:class:`~mfevit.errors.DimensionError`.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, LabelError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "get_tape",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "slice_",
    "concat",
    "expand_leading",
    "sum_all",
    "mean_over_axis",
    "gelu",
    "softmax",
    "log_softmax",
    "layernorm",
    "cross_entropy",
    "dropout",
    "finite_difference_grad",
    "max_relative_error",
]


class Tensor:
    """A real-valued n-d array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float32 if arr.dtype == np.float32 else np.float64
        shape = arr.shape
        # ascontiguousarray may promote 0-d input to 1-d
        arr = np.ascontiguousarray(arr, dtype=dtype).reshape(shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # fast path for op outputs: data is already a fresh float array
        t = object.__new__(cls)
        t.data = data if data.ndim else data.reshape(())
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a Python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


# --------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)
        self._outputs.add(id(entry.output))

    def reset(self) -> None:
        self.entries.clear()
        self._outputs.clear()

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def is_topologically_ordered(self) -> bool:
        seen: set[int] = set()
        for entry in self.entries:
            for inp in entry.inputs:
                if id(inp) in self._outputs and id(inp) not in seen:
                    return False
            seen.add(id(entry.output))
        return True

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if not self.produced(loss):
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
                return
            raise ContractError("loss was not produced on the active tape")
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for entry in reversed(self.entries):
            g = pending.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ContractError(
                        f"{entry.name}: backward produced shape {gi.shape} for input {inp.shape}"
                    )
                if id(inp) in self._outputs:
                    prev = pending.get(id(inp))
                    pending[id(inp)] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)
        if not retain:
            self.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


_state = threading.local()


def get_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on."""
    get_tape().backward(loss, retain=retain)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data), needs)
    if needs:
        get_tape().record(TapeEntry(name, inputs, out, rule))
    return out


# --------------------------------------------------------------------------
# elementwise


def _suffix_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    small, big = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if not small or big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("add", a, b)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("sub", a, b)

    def rule(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("mul", a, b)

    def rule(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and ``b[k, n]`` or ``b[..., k, n]`` with equal batch."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {ad.shape} and {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {ad.shape} and {bd.shape}")

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 axes, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(axes.index(i) for i in range(len(axes)))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = np.array(a.data[index], copy=True)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _emit("slice", out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _emit("expand", out, (a,), lambda g: (g.sum(axis=0),))


# --------------------------------------------------------------------------
# reductions and nonlinearities


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean_over_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    out = a.data.sum(axis=ax, keepdims=keepdims) * (1.0 / n)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", out, (a,), rule)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = ndtr(x)

    def rule(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _emit("gelu", x * cdf, (a,), rule)


def _check_finite(op: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", a.data)
    if a.shape[axis] < 1:
        raise DimensionError("softmax: empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), rule)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match feature size {d}"
        )
    inv_d = 1.0 / d
    centered = x.data - x.data.sum(axis=-1, keepdims=True) * inv_d
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def rule(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.sum(axis=-1, keepdims=True) * inv_d
            - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _emit("layernorm", out, (x, gain, bias), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is ``[C]`` with an integer label or ``[B, C]`` with ``B`` labels.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [C] or [B, C], got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if lab.shape != (n,):
        raise DimensionError(f"cross_entropy: {lab.shape[0]} labels for {n} rows")
    bad = (lab < 0) | (lab >= c)
    if bad.any():
        raise LabelError(f"cross_entropy: label {int(lab[bad][0])} outside [0, {c})")
    _check_finite("cross_entropy", z)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, lab].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of ``df/dx``; ``x.data`` is restored afterwards."""
    if h <= 0:
        raise ValueError("finite_difference_grad: h must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise gap scaled by the larger of the two gradients' max magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    gap = np.abs(analytic - numeric).max(initial=0.0)
    if denom == 0.0:
        return 0.0 if gap == 0.0 else math.inf
    return float(gap / denom)
