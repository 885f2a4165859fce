"""Tape-based reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D (rows, cols) float64 array wrapped in a Tensor. Ops
record a backward closure onto the active Tape in creation order, which is
also topological order, so the backward pass simply replays the records in
reverse exactly once. Running ops with no active tape is plain numpy
(inference mode).

All op outputs are checked for NaN/Inf and raise NumericError naming the op.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


class Tape:
    """Single-writer op recorder; one forward/backward pass owns it."""

    def __init__(self):
        self._records = []   # (op name, backward callable)
        self._live = set()   # ids of tensors produced on this tape
        self._tensors = []   # produced tensors + watched parameters
        self._watched = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay records in reverse."""
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.data.shape}")
        for t in self._tensors:
            t.grad = None
        loss.grad = np.ones((1, 1))
        for _name, fn in reversed(self._records):
            fn()


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != tuple(shape):
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(name: str, data: np.ndarray, inputs, grads_fn) -> Tensor:
    """Wrap op output; record backward if any input is tracked.

    grads_fn(out_grad) must return one gradient array (or None) per input,
    already reduced to each input's shape.
    """
    _check_finite(name, data)
    out = Tensor(data)
    tape = _active_tape()
    if tape is None:
        return out
    tracked = [t.requires_grad or id(t) in tape._live for t in inputs]
    if not any(tracked):
        return out
    tape._live.add(id(out))
    tape._tensors.append(out)
    for t in inputs:
        if t.requires_grad and id(t) not in tape._watched and id(t) not in tape._live:
            tape._watched.add(id(t))
            tape._tensors.append(t)

    def run():
        g = out.grad
        if g is None:
            return
        for t, keep, gi in zip(inputs, tracked, grads_fn(g)):
            if keep and gi is not None:
                _accum(t, gi)

    tape._records.append((name, run))
    return out


def _broadcast_shapes(name, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.data.shape} and {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shapes("add", a, b)
    return _finish(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shapes("sub", a, b)
    return _finish(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def elementwise_mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shapes("elementwise_mul", a, b)
    return _finish(
        "elementwise_mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _finish(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.data.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    return _finish(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat_cols(*tensors) -> Tensor:
    ts = [_t(t) for t in tensors]
    rows = {t.data.shape[0] for t in ts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: mismatched row counts {sorted(rows)}")
    widths = [t.data.shape[1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def grads(g):
        return tuple(np.split(g, splits, axis=1))

    return _finish("concat_cols", np.concatenate([t.data for t in ts], axis=1), tuple(ts), grads)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _t(a)
    if not (0 <= start <= stop <= a.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of width {a.data.shape[1]}")

    def grads(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _finish("slice_cols", a.data[:, start:stop].copy(), (a,), grads)


def sum_rows(a) -> Tensor:
    a = _t(a)
    return _finish(
        "sum_rows", a.data.sum(axis=0, keepdims=True), (a,),
        lambda g: (np.broadcast_to(g, a.data.shape).copy(),),
    )


def mse(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    val = np.array([[np.mean(diff * diff)]])
    n = diff.size

    def grads(g):
        ga = (2.0 / n) * diff * g[0, 0]
        return (ga, -ga)

    return _finish("mse", val, (a, b), grads)


def _check_index(name, index, n_rows):
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"{name}: index out of range [0, {n_rows})")
    return idx


def gather_rows(a, index) -> Tensor:
    a = _t(a)
    idx = _check_index("gather_rows", index, a.data.shape[0])

    def grads(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _finish("gather_rows", a.data[idx], (a,), grads)


def _segment_sum(values: np.ndarray, index: np.ndarray, out_rows: int) -> np.ndarray:
    """Row-sum into out_rows buckets; fast contiguous path for sorted index."""
    out = np.zeros((out_rows, values.shape[1]), dtype=np.float64)
    if index.size == 0:
        return out
    if np.all(index[1:] >= index[:-1]):
        starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
        out[index[starts]] = np.add.reduceat(values, starts, axis=0)
    else:
        np.add.at(out, index, values)
    return out


def scatter_add_rows(a, index, out_rows: int) -> Tensor:
    a = _t(a)
    idx = _check_index("scatter_add_rows", index, out_rows)
    if idx.size != a.data.shape[0]:
        raise ShapeError(
            f"scatter_add_rows: {idx.size} indices for {a.data.shape[0]} rows"
        )
    return _finish(
        "scatter_add_rows", _segment_sum(a.data, idx, out_rows), (a,),
        lambda g: (g[idx],),
    )


def _segment_starts(segment_ids: np.ndarray):
    starts = np.flatnonzero(np.r_[True, segment_ids[1:] != segment_ids[:-1]])
    counts = np.diff(np.r_[starts, segment_ids.size])
    return starts, counts


def segment_softmax(a, segment_ids) -> Tensor:
    """Column-wise softmax within runs of equal, sorted segment ids."""
    a = _t(a)
    ids = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
    if ids.size != a.data.shape[0]:
        raise ShapeError(f"segment_softmax: {ids.size} ids for {a.data.shape[0]} rows")
    if ids.size == 0:
        raise ShapeError("segment_softmax: empty input")
    if np.any(ids[1:] < ids[:-1]):
        raise ShapeError("segment_softmax: segment_ids must be sorted non-decreasing")
    starts, counts = _segment_starts(ids)
    seg_max = np.repeat(np.maximum.reduceat(a.data, starts, axis=0), counts, axis=0)
    ex = np.exp(a.data - seg_max)
    denom = np.repeat(np.add.reduceat(ex, starts, axis=0), counts, axis=0)
    alpha = ex / denom

    def grads(g):
        dot = np.repeat(np.add.reduceat(alpha * g, starts, axis=0), counts, axis=0)
        return (alpha * (g - dot),)

    return _finish("segment_softmax", alpha, (a,), grads)


LAYER_NORM_EPS = 1e-5


def layer_norm(a, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization with learned gain/bias over the columns."""
    a, gain, bias = _t(a), _t(gain), _t(bias)
    f = a.data.shape[1]
    if gain.data.shape != (1, f) or bias.data.shape != (1, f):
        raise ShapeError(
            f"layer_norm: gain/bias must be (1, {f}), got {gain.data.shape}, {bias.data.shape}"
        )
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def grads(g):
        dxhat = g * gain.data
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        da = rstd * (dxhat - m1 - xhat * m2)
        return (da, dgain, dbias)

    return _finish("layer_norm", out, (a, gain, bias), grads)


@dataclass
class GumbelOut:
    z: Tensor          # (N, 1) keep gate: hard {0,1} or soft probability
    soft: Tensor       # (N, 1) soft keep probability
    keep_mask: np.ndarray  # (N,) bool, always the hard argmax decision


_U_MIN = 1e-12


def _gumbel_noise(rng, n: int) -> np.ndarray:
    """(n, 2) Gumbel draws; rng may be a Generator, an (n, 2) array of
    uniforms in (0, 1), or None for exactly zero noise (argmax mode)."""
    if rng is None:
        return np.zeros((n, 2))
    if isinstance(rng, np.ndarray):
        u = rng
        if u.shape != (n, 2):
            raise ShapeError(f"gumbel uniforms must be ({n}, 2), got {u.shape}")
    else:
        u = rng.random((n, 2))
    u = np.clip(u, _U_MIN, 1.0 - _U_MIN)
    return -np.log(-np.log(u))


def gumbel_softmax_st(logits_keep, logits_drop, temperature: float, rng, hard: bool = True) -> GumbelOut:
    """Binary Gumbel-Softmax over (keep, drop) logits.

    Forward returns the hard sample (straight-through) unless hard=False, in
    which case the soft relaxation value is returned; the backward pass always
    propagates the soft-relaxation gradient. Ties go to keep.
    """
    k, d = _t(logits_keep), _t(logits_drop)
    if temperature <= 0:
        raise NumericError(f"temperature must be > 0, got {temperature}")
    if k.data.shape != d.data.shape or k.data.shape[1] != 1:
        raise ShapeError(f"gumbel logits must be (N, 1): {k.data.shape} vs {d.data.shape}")
    n = k.data.shape[0]
    g = _gumbel_noise(rng, n)
    a = k.data + g[:, 0:1]
    b = d.data + g[:, 1:2]
    with np.errstate(over="ignore"):
        soft_val = 1.0 / (1.0 + np.exp(-(a - b) / temperature))
    hard_val = (a >= b).astype(np.float64)
    keep_mask = hard_val[:, 0] > 0.5
    _check_finite("gumbel_softmax_st", soft_val)

    z = Tensor(hard_val if hard else soft_val)
    soft = Tensor(soft_val)
    jac = soft_val * (1.0 - soft_val) / temperature

    tape = _active_tape()
    if tape is not None and (k.requires_grad or d.requires_grad
                             or id(k) in tape._live or id(d) in tape._live):
        for out in (z, soft):
            tape._live.add(id(out))
            tape._tensors.append(out)
        for t in (k, d):
            if t.requires_grad and id(t) not in tape._watched and id(t) not in tape._live:
                tape._watched.add(id(t))
                tape._tensors.append(t)
        k_tracked = k.requires_grad or id(k) in tape._live
        d_tracked = d.requires_grad or id(d) in tape._live

        def run():
            g_total = None
            for out in (z, soft):
                if out.grad is not None:
                    g_total = out.grad if g_total is None else g_total + out.grad
            if g_total is None:
                return
            gk = g_total * jac
            if k_tracked:
                _accum(k, gk)
            if d_tracked:
                _accum(d, -gk)

        tape._records.append(("gumbel_softmax_st", run))
    return GumbelOut(z=z, soft=soft, keep_mask=keep_mask)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place; a None grad means zero."""
    if lr <= 0:
        raise NumericError(f"learning rate must be > 0, got {lr}")
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params for {len(state.m)} moment buffers")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
        _check_finite("adam_step", p.data)
