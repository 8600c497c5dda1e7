"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable computation in this package (LSTM steps, Sinkhorn
iterations, losses) is built from the primitives here.  Ops record a backward
rule on the active ``GradTape``; ``GradTape.backward`` replays the rules in
reverse order.  There is no implicit broadcasting: elementwise operands must
have identical shapes, and shape adaptation goes through explicit ``reshape``
and ``tile`` calls.
"""

from __future__ import annotations

import itertools
import struct
import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeMismatch",
    "DomainError",
    "TapeError",
    "concat",
    "finite_difference_check",
    "read_tensor_blob",
    "write_tensor_blob",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class DomainError(ValueError):
    """Input values outside the mathematical domain of the op."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, off-tape leaf, ...)."""


_STATE = threading.local()


def _active_tape():
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally participating in gradient tapes.

    ``trainable`` marks a leaf whose gradient ``GradTape.backward`` reports.
    The wrapped array must never be mutated while a tape that saw it is still
    alive; optimizers therefore replace ``data`` instead of updating in place.
    """

    __slots__ = ("data", "trainable", "uid")
    _uids = itertools.count()

    def __init__(self, data, trainable=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = bool(trainable)
        self.uid = next(Tensor._uids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch("item", self.shape)
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _sub(self, other)
        return _add(self, -float(other))

    def __rsub__(self, other):
        return _scale(self, -1.0, float(other))

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _div(self, other)
        return _mul(self, 1.0 / float(other))

    def __neg__(self):
        return _scale(self, -1.0, 0.0)

    def __matmul__(self, other):
        return _matmul(self, other)

    # -- nonlinearities ---------------------------------------------------

    def relu(self):
        x = self.data
        return _record("relu", (self,), np.maximum(x, 0.0),
                       lambda g: ((x > 0.0) * g,))

    def sigmoid(self):
        out = _sigmoid_values(self.data)
        return _record("sigmoid", (self,), out,
                       lambda g: (out * (1.0 - out) * g,))

    def tanh(self):
        out = np.tanh(self.data)
        return _record("tanh", (self,), out,
                       lambda g: ((1.0 - out * out) * g,))

    def exp(self):
        out = np.exp(self.data)
        return _record("exp", (self,), out, lambda g: (out * g,))

    def log(self):
        x = self.data
        if np.any(x <= 0.0):
            raise DomainError("log: input has non-positive entries")
        return _record("log", (self,), np.log(x), lambda g: (g / x,))

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims)

        def backward(g):
            return (_spread(g, shape, axis, keepdims),)

        return _record("sum", (self,), out, backward)

    def mean(self, axis=None, keepdims=False):
        shape = self.shape
        count = self.size if axis is None else shape[axis]
        out = np.mean(self.data, axis=axis, keepdims=keepdims)

        def backward(g):
            return (_spread(g, shape, axis, keepdims) / count,)

        return _record("mean", (self,), out, backward)

    def max(self, axis=None, keepdims=False):
        """Max over an axis; the gradient flows to the first maximal entry."""
        x = self.data
        if axis is None:
            out = np.max(x)
            flat_idx = int(np.argmax(x))

            def backward(g):
                grad = np.zeros_like(x)
                grad.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
                return (grad,)

        else:
            out = np.max(x, axis=axis, keepdims=keepdims)
            idx = np.expand_dims(np.argmax(x, axis=axis), axis)

            def backward(g):
                grad = np.zeros_like(x)
                gg = g if keepdims else np.expand_dims(g, axis)
                np.put_along_axis(grad, idx, gg, axis=axis)
                return (grad,)

        return _record("max", (self,), out, backward)

    def logsumexp(self, axis, keepdims=False):
        x = self.data
        m = np.max(x, axis=axis, keepdims=True)
        lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
        out = lse if keepdims else np.squeeze(lse, axis=axis)
        softmax = np.exp(x - lse)

        def backward(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (softmax * gg,)

        return _record("logsumexp", (self,), out, backward)

    # -- shape manipulation -----------------------------------------------

    def reshape(self, shape):
        old = self.shape
        if int(np.prod(shape, dtype=np.int64)) != self.size:
            raise ShapeMismatch("reshape", old, shape)
        return _record("reshape", (self,), self.data.reshape(shape),
                       lambda g: (g.reshape(old),))

    def transpose(self):
        """Swap the last two axes (plain transpose for matrices)."""
        if self.ndim < 2:
            raise ShapeMismatch("transpose", self.shape)
        return _record("transpose", (self,), np.swapaxes(self.data, -1, -2),
                       lambda g: (np.swapaxes(g, -1, -2),))

    @property
    def T(self):
        return self.transpose()

    def tile(self, reps):
        """Repeat the tensor ``reps[k]`` times along each axis k."""
        reps = tuple(int(r) for r in reps)
        if len(reps) != self.ndim:
            raise ShapeMismatch("tile", self.shape, reps)
        shape = self.shape

        def backward(g):
            # np.tile lays copies out in blocks: fold (r0,s0,r1,s1,...) and
            # sum over the repetition axes.
            interleaved = tuple(x for pair in zip(reps, shape) for x in pair)
            rep_axes = tuple(range(0, 2 * len(shape), 2))
            return (g.reshape(interleaved).sum(axis=rep_axes),)

        return _record("tile", (self,), np.tile(self.data, reps), backward)

    def slice(self, axis, start, stop):
        """Contiguous sub-tensor along one axis."""
        shape = self.shape
        if not (0 <= start <= stop <= shape[axis]):
            raise ShapeMismatch("slice", shape, (axis, start, stop))
        index = _axis_slice(len(shape), axis, start, stop)
        out = self.data[index].copy()

        def backward(g):
            grad = np.zeros(shape)
            grad[index] = g
            return (grad,)

        return _record("slice", (self,), out, backward)

    def permute_rows(self, perm):
        """Reorder rows by a permutation (per batch element for rank 3).

        ``perm`` is an index array of shape (n,) for a rank-2 tensor or
        (B, n) for rank-3; each row of it must be a permutation of 0..n-1.
        """
        perm = np.asarray(perm, dtype=np.int64)
        x = self.data
        if x.ndim == 2:
            if perm.shape != (x.shape[0],):
                raise ShapeMismatch("permute_rows", x.shape, perm.shape)
            inv = np.argsort(perm, kind="stable")
            return _record("permute_rows", (self,), x[perm],
                           lambda g: (g[inv],))
        if x.ndim == 3:
            if perm.shape != x.shape[:2]:
                raise ShapeMismatch("permute_rows", x.shape, perm.shape)
            inv = np.argsort(perm, axis=1, kind="stable")
            rows = np.arange(x.shape[0])[:, None]
            return _record("permute_rows", (self,), x[rows, perm],
                           lambda g: (g[rows, inv],))
        raise ShapeMismatch("permute_rows", x.shape)

    def gather_rows(self, idx):
        """Select rows (with repetition allowed) from a rank-2 tensor."""
        idx = np.asarray(idx, dtype=np.int64)
        x = self.data
        if x.ndim != 2 or idx.ndim != 1:
            raise ShapeMismatch("gather_rows", x.shape, idx.shape)

        def backward(g):
            grad = np.zeros_like(x)
            np.add.at(grad, idx, g)
            return (grad,)

        return _record("gather_rows", (self,), x[idx], backward)


def _axis_slice(rank, axis, start, stop):
    return tuple(
        slice(start, stop) if a == axis else slice(None) for a in range(rank)
    )


# ---------------------------------------------------------------------------
# op plumbing


def _record(name, inputs, out_data, backward):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(name, inputs, out, backward)
    return out


def _as_operand(op, other):
    if isinstance(other, Tensor):
        return other
    arr = np.asarray(other, dtype=np.float64)
    if arr.ndim != 0:
        raise ShapeMismatch(op, arr.shape)
    return float(arr)


def _add(a, b):
    b = _as_operand("add", b)
    if isinstance(b, float):
        return _record("add", (a,), a.data + b, lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def _sub(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch("sub", a.shape, b.shape)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def _scale(a, factor, offset):
    return _record("scale", (a,), a.data * factor + offset,
                   lambda g: (factor * g,))


def _mul(a, b):
    b = _as_operand("mul", b)
    if isinstance(b, float):
        return _scale(a, b, 0.0)
    if a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)
    da, db = a.data, b.data
    return _record("mul", (a, b), da * db, lambda g: (g * db, g * da))


def _div(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor has zero entries")
    da, db = a.data, b.data
    return _record("div", (a, b), da / db,
                   lambda g: (g / db, -g * da / (db * db)))


def _matmul(a, b):
    if not isinstance(b, Tensor):
        raise ShapeMismatch("matmul", a.shape, np.shape(b))
    da, db = a.data, b.data
    ok = (
        da.ndim == db.ndim
        and da.ndim in (2, 3)
        and da.shape[-1] == db.shape[-2]
        and da.shape[:-2] == db.shape[:-2]
    )
    if not ok:
        raise ShapeMismatch("matmul", da.shape, db.shape)

    def backward(g):
        return (g @ np.swapaxes(db, -1, -2), np.swapaxes(da, -1, -2) @ g)

    return _record("matmul", (a, b), da @ db, backward)


def concat(tensors, axis):
    """Concatenate tensors along an existing axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat", ())
    base = tensors[0].shape
    for t in tensors[1:]:
        s = t.shape
        if len(s) != len(base) or any(
            s[i] != base[i] for i in range(len(base)) if i != axis
        ):
            raise ShapeMismatch("concat", base, s)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record("concat", tensors,
                   np.concatenate([t.data for t in tensors], axis=axis), backward)


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _spread(g, shape, axis, keepdims):
    if axis is None:
        return np.full(shape, np.asarray(g).reshape(()))
    gg = g if keepdims else np.expand_dims(g, axis)
    return np.broadcast_to(gg, shape).copy()


# ---------------------------------------------------------------------------
# gradient tape


class _TapeOp:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of primitive ops; replayed in reverse by ``backward``.

    Used as a context manager::

        with GradTape() as tape:
            loss = model_loss(...)
        grads = tape.gradient(loss, params)

    One tape is single-owner: use it from one thread at a time.  Ops executed
    while no tape is active are value-only and record nothing.
    """

    def __init__(self):
        self._ops = []
        self._tensors = {}
        self._leaves = []

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tapes.pop()
        return False

    def _register(self, t):
        if t.uid not in self._tensors:
            self._tensors[t.uid] = t
            if t.trainable:
                self._leaves.append(t.uid)

    def _record(self, name, inputs, output, backward):
        for t in inputs:
            self._register(t)
        self._tensors[output.uid] = output
        self._ops.append(
            _TapeOp(name, tuple(t.uid for t in inputs), output.uid, backward)
        )

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every trainable leaf on the tape.

        Returns a dict mapping leaf uid -> gradient Tensor (zero for leaves
        the loss does not depend on).
        """
        grads = self._accumulate(loss)
        out = {}
        for uid in self._leaves:
            g = grads.get(uid)
            if g is None:
                g = np.zeros_like(self._tensors[uid].data)
            out[uid] = Tensor(g)
        return out

    def gradient(self, loss, sources):
        """Gradients of a scalar loss w.r.t. specific tensors on the tape."""
        grads = self._accumulate(loss)
        out = []
        for s in sources:
            if s.uid not in self._tensors:
                raise TapeError("gradient: source tensor is not on this tape")
            g = grads.get(s.uid)
            out.append(Tensor(g if g is not None else np.zeros_like(s.data)))
        return out

    def _accumulate(self, loss):
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError("backward: loss must be a scalar Tensor")
        if loss.uid not in self._tensors:
            raise TapeError("backward: loss was not computed on this tape")
        grads = {loss.uid: np.ones_like(loss.data)}
        for op in reversed(self._ops):
            g = grads.get(op.output)
            if g is None:
                continue
            contribs = op.backward(g)
            for uid, contrib in zip(op.inputs, contribs):
                if contrib is None:
                    continue
                have = grads.get(uid)
                grads[uid] = contrib if have is None else have + contrib
        return grads


# ---------------------------------------------------------------------------
# verification oracle


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between the tape gradient of ``f`` and central
    differences at ``x``.

    ``f`` maps the Tensor ``x`` to a scalar Tensor using taped ops only.  The
    reported error is max_k |g_k - ghat_k| / max(1e-8, |g_k| + |ghat_k|).
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    x.data = np.ascontiguousarray(x.data)  # the probe below writes via a flat view
    with GradTape() as tape:
        loss = f(x)
    if not np.isfinite(loss.data).all():
        raise DomainError("finite_difference_check: f returned non-finite value")
    analytic = tape.gradient(loss, [x])[0].data

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f(x).item()
        flat[k] = orig - h
        down = f(x).item()
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise DomainError("finite_difference_check: f returned non-finite value")
        fd[k] = (up - down) / (2.0 * h)
    fd = fd.reshape(x.shape)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))


# ---------------------------------------------------------------------------
# tensor blob serialization

_BLOB_MAGIC = b"SPTN"
_BLOB_VERSION = 1


class BlobFormatError(ValueError):
    """Malformed tensor blob."""


def write_tensor_blob(path, array):
    """Write a float64 array: magic 'SPTN', u32 version, u32 rank, u64
    extents, then row-major little-endian float64 payload."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<II", _BLOB_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _BLOB_MAGIC:
        raise BlobFormatError(f"{path}: bad magic")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _BLOB_VERSION:
        raise BlobFormatError(f"{path}: unsupported version {version}")
    header_end = 12 + 8 * rank
    if len(raw) < header_end:
        raise BlobFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[header_end:]
    if len(payload) != 8 * count:
        raise BlobFormatError(f"{path}: payload size mismatch")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return arr
