"""Reverse-mode autodiff core: Tensor, Tape, backward.

A Tensor wraps a float32 or float64 numpy array. While a Tape is active
(as a context manager), every op records its output, inputs and a backward
closure on the tape. backward() replays the records in exact reverse order
and accumulates fan-out gradients in that fixed order, so repeated calls
are bit-identical. Ops run fine with no active tape; they just don't record
(cheap inference mode).
"""

import weakref

import numpy as np

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))

# Active tape stack and live memory meters (module-level, single-threaded use).
_TAPES = []
_METERS = []

# Deterministic mode flag. The engine is deterministic by construction
# (fixed accumulation order, single-threaded kernels); the flag exists so
# callers can assert the mode and future nondeterministic fast paths stay
# opt-in. Reductions always run in recorded order regardless.
_DETERMINISTIC = True


def set_deterministic(flag):
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def deterministic():
    return _DETERMINISTIC


class Tensor:
    """A float32/float64 ndarray plus gradient metadata.

    `requires_grad` marks leaves (parameters). `_track` is true when a
    gradient can flow to or through this tensor; ops set it on outputs.
    `.grad` accumulates additively across backward() calls; set it to None
    to zero out.
    """

    __slots__ = ("data", "requires_grad", "grad", "_track", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor; use the ops")
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        elif isinstance(data, (np.ndarray, np.generic)):
            # numpy values keep their dtype; only float32/float64 are legal
            arr = np.asarray(data)
        else:
            # python scalars/lists default to the training dtype
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in _FLOATS:
            raise TypeError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._track = self.requires_grad
        if _METERS and arr.base is None:  # views don't own their bytes
            n = arr.nbytes
            for m in list(_METERS):
                m._alloc(n)
            weakref.finalize(self, _meter_free, list(_METERS), n)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def requires_grad_(self, flag=True):
        self.requires_grad = bool(flag)
        self._track = self._track or self.requires_grad
        return self

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # Arithmetic dunders are attached by ffsplat.numerics.ops at import time.


def _meter_free(meters, n):
    for m in meters:
        if m._running:
            m._free(n)


class MemoryMeter:
    """Tracks live bytes owned by Tensors created inside the context.

    Measures Tensor allocations only (not raw ndarray temporaries or grad
    buffers); good for like-for-like peak comparisons between model
    configurations.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._running = False

    def __enter__(self):
        self.live = 0
        self.peak = 0
        self._running = True
        _METERS.append(self)
        return self

    def __exit__(self, *exc):
        _METERS.remove(self)
        self._running = False
        return False

    def _alloc(self, n):
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, n):
        self.live -= n


class Tape:
    """Ordered op record. Entry: (out, inputs, backward_fn).

    backward_fn(grad_out, needs) returns one gradient array (or None) per
    input, aligned with `inputs`; `needs` flags which inputs want one.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def record(out_data, inputs, backward_fn):
    """Wrap an op result; register on the active tape when gradients can flow.

    `inputs` may mix Tensors and non-Tensor aux values; only Tensors take
    gradients. Returns the output Tensor.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t._track for t in inputs):
        out._track = True
        tape.records.append((out, inputs, backward_fn))
    return out


def _owned(g):
    # Gradients get accumulated in place; never hold a view of someone else's buffer.
    if g.base is not None or not g.flags.writeable:
        return g.copy()
    return g


def backward(tape, loss, params=None):
    """Reverse-replay `tape` from `loss` (a scalar Tensor).

    Accumulates into `.grad` of every requires_grad Tensor that appears as
    an op input on the tape, plus everything in `params` (an optional
    iterable); parameters the gradient never reaches get zeros. Fan-out adds
    in fixed reverse-record order, so two calls on the same tape produce
    bit-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if params is not None:
        for t in params:
            leaves.setdefault(id(t), t)
    for out, inputs, fn in reversed(tape.records):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        needs = tuple(isinstance(t, Tensor) and t._track for t in inputs)
        in_grads = fn(g_out, needs)
        for t, g, need in zip(inputs, in_grads, needs):
            if not need or g is None:
                continue
            if g.dtype != t.data.dtype or g.shape != t.data.shape:
                raise RuntimeError(
                    f"bad gradient: got {g.dtype}{g.shape} for input {t.data.dtype}{t.data.shape}"
                )
            if t.requires_grad:
                leaves.setdefault(id(t), t)
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = _owned(g)
            else:
                acc += g
    for out, inputs, fn in tape.records:
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                leaves.setdefault(id(t), t)
    for t in leaves.values():
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        if t.grad is None:
            t.grad = g
        else:
            t.grad = t.grad + g
