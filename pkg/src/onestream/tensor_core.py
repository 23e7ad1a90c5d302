"""Dense tensors with a reverse-mode gradient tape.

Everything the tracker computes goes through the functions in this module.
Arrays are numpy under the hood; what this module adds is the bookkeeping
for gradients:

* a :class:`Tensor` wraps an array and a ``requires_grad`` flag,
* while a :class:`Tape` is active, every op whose inputs require grad is
  recorded together with its backward rule,
* :func:`backward_pass` replays the tape in exact reverse order.

Storage is float32. ``precision(np.float64)`` switches every op created in
its scope to float64, which is only used to tighten gradient checks.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward_pass", "finite_difference_check", "precision",
    "default_dtype", "OptimState", "adamw_step", "step_decay_lr", "zero_grad",
    "BatchNormState", "save_weights", "load_weights", "WeightFormatError",
]

_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Run the enclosed code with ``dtype`` as the tensor dtype."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    """Immutable dense array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype())
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_scalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered log of differentiable ops.

    Use as a context manager; ops executed inside are appended in execution
    order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def record(self, name, inputs, output, backward):
        self.records.append(_Record(name, tuple(inputs), output, backward))

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False


def _current_tape() -> Tape | None:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def _emit(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{name} produced non-finite values")
    dtype = default_dtype()
    if out.dtype != dtype:
        out = out.astype(dtype)
    tape = _current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.record(name, inputs, result, backward)
    return result


def backward_pass(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor that ``loss`` reaches.

    Leaf gradients accumulate into any existing ``.grad`` (call
    :func:`zero_grad` between steps); intermediate tensors get their gradient
    assigned.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss is not on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    # whatever is left was never produced by a recorded op: leaves
    for key, g in grads.items():
        t = seen[key]
        t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _emit("div", out, (a, b), backward)


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _emit("pow", out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)  # non-finite results are reported by _emit
    return _emit("log", out, (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _emit("maximum", np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _emit("minimum", np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit("relu", x.data * pos, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit("gelu", out, (x,), backward)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: Tensor, key) -> Tensor:
    out = np.array(x.data[key])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", out, (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis -2: ``out[..., j, :] = x[..., index[..., j], :]``.

    ``index`` is (n,) for an unbatched (N, D) tensor or (B, n) for (B, N, D).
    Indices must be unique per batch row.
    """
    index = np.asarray(index)
    idx = index[..., None]
    out = np.take_along_axis(x.data, idx, axis=-2)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=-2)
        return (full,)

    return _emit("take_rows", out, (x,), backward)


def scatter_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Inverse of :func:`take_rows`: rows of ``x`` land at ``index``, zeros elsewhere."""
    index = np.asarray(index)
    idx = index[..., None]
    out = np.zeros(x.shape[:-2] + (n_rows, x.shape[-1]), dtype=x.data.dtype)
    np.put_along_axis(out, idx, x.data, axis=-2)
    return _emit("scatter_rows", out, (x,),
                 lambda g: (np.take_along_axis(g, idx, axis=-2),))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` with any leading dims."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("linear", out, inputs, backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable, True = blocked) acts like an additive -inf before
    normalisation; blocked entries come out exactly 0.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("gamma/beta must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gamma, beta), backward)


def _batched_image(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected C×H×W or B×C×H×W, got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3×3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    xb, single = _batched_image(x)
    B, C, H, W = xb.shape
    if w.shape[1:] != (C, 3, 3):
        raise ValueError(f"conv2d kernel {w.shape} does not fit {C} input channels")
    co = w.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)], axis=2)
    cols = cols.reshape(B, C * 9, H * W)
    wm = w.data.reshape(co, C * 9)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(B, co, H, W)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gb = g.reshape(B, co, H * W)
        gw = np.tensordot(gb, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = (wm.T @ gb).reshape(B, C, 3, 3, H, W)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy:dy + H, dx:dx + W] += gcols[:, :, dy, dx]
        gx = gxp[:, :, 1:-1, 1:-1]
        grads = [gx[0] if single else gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0, 2)))
        return grads

    return _emit("conv2d", out[0] if single else out, inputs, backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``w`` is (C_out, C_in)."""
    xb, single = _batched_image(x)
    B, C, H, W = xb.shape
    if w.shape[1] != C:
        raise ValueError(f"conv1x1 kernel {w.shape} does not fit {C} input channels")
    flat = xb.reshape(B, C, H * W)
    out = w.data @ flat
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(B, w.shape[0], H, W)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.reshape(B, w.shape[0], H * W)
        gx = (w.data.T @ gf).reshape(xb.shape)
        grads = [gx[0] if single else gx, np.tensordot(gf, flat, axes=([0, 2], [0, 2]))]
        if b is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return grads

    return _emit("conv1x1", out[0] if single else out, inputs, backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    ``None`` statistics mean the layer has never been initialised; eval mode
    refuses to run in that state.
    """

    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "eval") -> Tensor:
    """Per-channel normalisation of C×H×W or B×C×H×W input.

    ``train`` normalises with batch statistics and folds them into the
    running averages (unbiased variance, PyTorch convention); ``eval`` uses
    the running averages.
    """
    xb, single = _batched_image(x)
    C = xb.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("gamma/beta must have one entry per channel")
    axes = (0, 2, 3)
    shp = (1, C, 1, 1)
    if mode == "train":
        mu = xb.mean(axis=axes)
        var = xb.var(axis=axes)
        n = xb.size // C
        if state.running_mean is None:
            state.running_mean = np.zeros(C, np.float32)
            state.running_var = np.ones(C, np.float32)
        m = state.momentum
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
    elif mode == "eval":
        if state.running_mean is None or state.running_var is None:
            raise RuntimeError("batch_norm eval mode needs initialised running statistics")
        mu, var = state.running_mean, state.running_var
        n = None
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv = (1.0 / np.sqrt(var + state.eps)).reshape(shp)
    xhat = (xb - mu.reshape(shp)) * inv
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        gb = g[None] if single else g
        dxhat = gb * gamma.data.reshape(shp)
        if mode == "train":
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return (dx[0] if single else dx, (gb * xhat).sum(axis=axes), gb.sum(axis=axes))

    return _emit("batch_norm", out[0] if single else out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            h: float = 1e-3) -> float:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` takes no arguments and builds a scalar from ``params``. The tape
    gradient is computed at the current precision; the differences are always
    evaluated in float64 so the reference itself is not limited by float32
    rounding. Returns the max elementwise relative error
    ``|a - b| / max(|a|, |b|, 1e-6)``.
    """
    saved = [(p.grad, p.requires_grad) for p in params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward_pass(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    originals = [p.data for p in params]
    worst = 0.0
    try:
        with precision(np.float64):
            wide = [o.astype(np.float64) for o in originals]
            for p, w in zip(params, wide):
                p.data = w
            for p, w, a in zip(params, wide, analytic):
                flat = w.reshape(-1)
                for i in range(flat.size):
                    keep = flat[i]
                    flat[i] = keep + h
                    up = float(f().data)
                    flat[i] = keep - h
                    down = float(f().data)
                    flat[i] = keep
                    num = (up - down) / (2 * h)
                    ana = float(a.reshape(-1)[i])
                    err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
                    worst = max(worst, err)
    finally:
        for p, o, (g, rg) in zip(params, originals, saved):
            p.data = o
            p.grad = g
            p.requires_grad = rg
    return worst


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    """AdamW state for one parameter group."""

    lr: float = 4e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               opt: OptimState) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam update, applied in place to ``params``.

    Parameters without a gradient entry are skipped.
    """
    if opt.step < 0:
        raise ValueError("step counter must be non-negative")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        theta = p.data.astype(np.float64) * (1 - opt.lr * opt.weight_decay)
        theta = theta - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = theta.astype(p.data.dtype)
    return params


def step_decay_lr(base_lr: float, step: int, total_steps: int,
                  drop_at: float = 0.8, factor: float = 0.1) -> float:
    return base_lr * factor if step >= int(drop_at * total_steps) else base_lr


# ----------------------------------------------------------------------------
# weight files

MAGIC = b"OST1"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 in the OST1 layout."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise WeightFormatError("bad magic, not an OST1 weight file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise WeightFormatError("truncated weight file") from exc
    if pos != len(buf):
        raise WeightFormatError("trailing bytes after last tensor")
    return out
