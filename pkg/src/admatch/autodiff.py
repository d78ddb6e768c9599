"""Dense float64 tensors with taped reverse-mode gradients.

The op set is exactly what the matching model needs: matmul, broadcast
arithmetic, activations, row softmax, embedding gathers, column
concat/slice, reductions, row-wise cosine, and clipping. Every op
computes its value eagerly with numpy; while a Tape is active it also
records a closure that routes the output gradient back to its inputs.
With no active tape, ops are plain forward evaluation (inference mode).

All arithmetic is float64. Tapes are per-thread: distinct tapes may run
concurrently over shared read-only parameter values, but gradient
accumulation into one ParamStore must not be concurrent.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector reached an op that needs a direction."""


class DeterminismError(RuntimeError):
    """Two forward evaluations of the same function disagreed."""


_LOCAL = threading.local()


def active_tape() -> "Tape | None":
    """The tape ops currently record onto, or None outside a Tape block."""
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Backward-closure recorder for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward`` once on a scalar output. The tape is spent afterwards;
    build a new one for the next pass.
    """

    def __init__(self) -> None:
        self._records: list[Callable[[], None]] = []
        self._spent = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _LOCAL.tape = self._prev
        self._prev = None
        return False

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)=1 and run recorded closures newest-first.

        The record list is discarded afterwards; a second call raises.
        """
        if self._spent:
            raise RuntimeError("tape already consumed by a backward pass")
        if root.data.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        self._spent = True
        root._accumulate(np.ones_like(root.data))
        for fn in reversed(self._records):
            fn()
        self._records.clear()


class Tensor:
    """A float64 array plus a gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(out: Tensor, backward_fn: Callable[[], None]) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    _record(out, backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and a.requires_grad:
            a._accumulate(-g)

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    _record(out, backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul needs 2-d operands with matching inner dimension, "
            f"got {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    _record(out, backward)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    _record(out, backward)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g * (1.0 - y * y))

    _record(out, backward)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g * (x.data > 0))

    _record(out, backward)
    return out


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilized by a row-max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - inner))

    _record(out, backward)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g / x.data)

    _record(out, backward)
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclipped."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), requires_grad=x.requires_grad)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g * mask)

    _record(out, backward)
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape))

    _record(out, backward)
    return out


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = Tensor(x.data.mean(), requires_grad=x.requires_grad)
    inv = 1.0 / x.data.size

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(np.broadcast_to(g * inv, x.data.shape))

    _record(out, backward)
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is not None and x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    _record(out, backward)
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along axis 1."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    rows = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[0] != rows:
            raise ShapeError(
                f"concat_cols needs 2-d tensors with {rows} rows, got {t.data.shape}"
            )
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=1),
        requires_grad=any(t.requires_grad for t in tensors),
    )
    widths = [t.data.shape[1] for t in tensors]

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        offset = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                t._accumulate(g[:, offset : offset + w])
            offset += w

    _record(out, backward)
    return out


def take_cols(x, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_cols needs a 2-d tensor, got {x.data.shape}")
    out = Tensor(x.data[:, start:stop].copy(), requires_grad=x.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None or not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    _record(out, backward)
    return out


def _check_ids(ids: np.ndarray, rows: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"row id out of range [0, {rows}) in embedding gather")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows table[ids] for a 1-d integer id array; scatter-add backward."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-d ids, got shape {idx.shape}")
    _check_ids(idx, table.data.shape[0])
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None or not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    _record(out, backward)
    return out


def gather_sum(table: Tensor, id_lists: Sequence[Sequence[int]]) -> Tensor:
    """Per-row sums of table rows: out[r] = sum(table[i] for i in id_lists[r]).

    Empty lists yield a zero row, which is how all-pad multivalued
    features contribute nothing.
    """
    lengths = [len(lst) for lst in id_lists]
    flat = np.fromiter(
        (i for lst in id_lists for i in lst), dtype=np.intp, count=sum(lengths)
    )
    _check_ids(flat, table.data.shape[0])
    owners = np.repeat(np.arange(len(id_lists), dtype=np.intp), lengths)
    data = np.zeros((len(id_lists), table.data.shape[1]))
    np.add.at(data, owners, table.data[flat])
    out = Tensor(data, requires_grad=table.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None or not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, flat, g[owners])

    _record(out, backward)
    return out


def cosine_rows(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity of two [n x d] tensors, in [-1, 1]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.shape != v.data.shape or u.data.ndim != 2:
        raise ShapeError(
            f"cosine_rows needs equal 2-d shapes, got {u.data.shape} x {v.data.shape}"
        )
    nu = np.sqrt((u.data * u.data).sum(axis=1))
    nv = np.sqrt((v.data * v.data).sum(axis=1))
    if (nu == 0.0).any() or (nv == 0.0).any():
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    c = (u.data * v.data).sum(axis=1) / (nu * nv)
    out = Tensor(c, requires_grad=u.requires_grad or v.requires_grad)

    def backward() -> None:
        g = out.grad
        if g is None:
            return
        gcol = g[:, None]
        inv = (1.0 / (nu * nv))[:, None]
        if u.requires_grad:
            u._accumulate(gcol * (v.data * inv - (c / (nu * nu))[:, None] * u.data))
        if v.requires_grad:
            v._accumulate(gcol * (u.data * inv - (c / (nv * nv))[:, None] * v.data))

    _record(out, backward)
    return out


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two 1-d vectors as a scalar tensor."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ShapeError(
            f"cosine needs equal 1-d shapes, got {u.data.shape} x {v.data.shape}"
        )
    row = cosine_rows(reshape(u, (1, -1)), reshape(v, (1, -1)))
    return reshape(row, ())


@dataclass
class ParamEntry:
    """One named parameter: value tensor, trainability, frozen rows."""

    value: Tensor
    trainable: bool
    frozen_rows: tuple[int, ...]


class ParamStore:
    """Named parameter tensors with persistent gradient buffers.

    Gradient buffers always exist and match the value shape. Rows listed
    in ``frozen_rows`` are zeroed at registration and are kept at zero
    by the optimizer (reserved pad/OOV embedding rows).
    """

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def add(
        self,
        name: str,
        value,
        trainable: bool = True,
        frozen_rows: Sequence[int] = (),
    ) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        for r in frozen_rows:
            arr[r] = 0.0
        t = Tensor(arr, requires_grad=trainable)
        t.grad = np.zeros_like(arr)
        self._entries[name] = ParamEntry(t, bool(trainable), tuple(frozen_rows))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            grad = entry.value.grad
            if grad is None:
                entry.value.grad = np.zeros_like(entry.value.data)
            else:
                grad[...] = 0.0

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, keyed by name."""
        return {name: e.value.data.copy() for name, e in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place (tensor identities are preserved)."""
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, arr in arrays.items():
            dest = self._entries[name].value.data
            if dest.shape != np.shape(arr):
                raise ShapeError(
                    f"parameter {name!r}: stored shape {np.shape(arr)} "
                    f"!= expected {dest.shape}"
                )
            dest[...] = arr


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``f`` must be a deterministic scalar-valued function of the store.
    For each trainable entry the error is ||a - n|| / (||a|| + ||n||)
    over the flattened gradient; the worst entry's error is returned.
    The denominator is floored at 1e-8: gradients below that are not
    resolvable by central differences at the permitted epsilon range,
    so such entries score by absolute difference (0 when both vanish).
    """
    if not (1e-6 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-4]")
    v1 = f(store).item()
    v2 = f(store).item()
    if v1 != v2:
        raise DeterminismError(
            f"two forward evaluations disagree: {v1!r} vs {v2!r}"
        )

    store.zero_grads()
    with Tape() as tape:
        out = f(store)
        tape.backward(out)
    analytic = {
        name: e.value.grad.copy() for name, e in store.items() if e.trainable
    }

    worst = 0.0
    for name, entry in store.items():
        if not entry.trainable:
            continue
        arr = entry.value.data
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(store).item()
            flat[i] = orig - epsilon
            fm = f(store).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * epsilon)
        a = analytic[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(numeric), 1e-8)
        err = float(np.linalg.norm(a - numeric) / denom)
        worst = max(worst, err)
    return worst
