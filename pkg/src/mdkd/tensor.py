"""Dense float64 tensors with tape-based reverse-mode autodiff.

Small by design: only the operations a compact transformer encoder and its
distillation losses need. Arrays are stored as contiguous row-major numpy
float64; gradients are accumulated additively into ``Tensor.grad`` for leaf
tensors (parameters, inputs), so callers must ``zero_grad`` between steps.

A forward pass records onto the innermost active :class:`Tape`; replaying the
records in reverse order is the backward pass. Tensors produced while no tape
is active (or from inputs that do not require gradients) are plain constants.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

LOG_CLAMP = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small amount of operator sugar; the module-level functions are the API
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Wengert list: ops append in execution order, backward replays reversed.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on the scalar output. Each tape is independent; nothing
    leaks between tapes or into constants.
    """

    def __init__(self):
        # each record: (output, inputs, rule); rule maps d(out) -> per-input grads
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self._records.append((out, inputs, rule))
        self._produced.add(id(out))

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(leaf) into every reachable leaf's ``.grad``."""
        if out.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node, inputs, rule in reversed(self._records):
            g_out = grads.pop(id(node), None)
            if g_out is None:
                continue  # not on any path to the output
            for inp, g_in in zip(inputs, rule(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = g_in if acc is None else acc + g_in
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g_in.reshape(inp.data.shape)


def _apply(inputs: Sequence[Tensor], out_data: np.ndarray, rule: Callable) -> Tensor:
    """Wrap an op result; record on the active tape when a gradient is needed."""
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._record(out, tuple(inputs), rule)
    return out


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _apply((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _apply((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _apply((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _apply((x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], the one broadcast the model needs."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: x {x.shape} vs bias {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _apply((x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b; stacked batches allowed when batch dims match."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def rule(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _apply((a, b), ad @ bd, rule)


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2 needs ndim >= 2, got {x.shape}")
    return _apply((x,), x.data.swapaxes(-1, -2).copy(), lambda g: (g.swapaxes(-1, -2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return _apply((x,), x.data.reshape(shape).copy(), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _apply((x,), x.data.transpose(axes).copy(), lambda g: (g.transpose(inv),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {x.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(x.data.ndim))

    def rule(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _apply((x,), x.data[idx].copy(), rule)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds (ids may repeat)."""
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    ids = np.asarray(ids, dtype=np.intp)

    def rule(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        return (acc,)

    return _apply((table,), table.data[ids], rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Probability distribution along the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply((x,), y, rule)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row (last axis) normalization with learned scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm_rows: gain/bias {gain.shape}/{bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    lead = tuple(range(x.data.ndim - 1))

    def rule(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _apply((x, gain, bias), gain.data * xhat + bias.data, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def rule(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _apply((x,), y, rule)


def log_clamped(x: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """log(max(x, floor)); zero slope inside the clamped region."""
    clamped = np.maximum(x.data, floor)

    def rule(g):
        return (np.where(x.data > floor, g / clamped, 0.0),)

    return _apply((x,), np.log(clamped), rule)


def sum_all(x: Tensor) -> Tensor:
    shp = x.data.shape

    def rule(g):
        return (np.broadcast_to(g, shp).copy(),)

    return _apply((x,), np.asarray(x.data.sum()), rule)


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    d = x.shape[-1]

    def rule(g):
        return (np.repeat(g[..., None], d, axis=-1),)

    return _apply((x,), x.data.sum(axis=-1), rule)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def cosine_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos(a_i, b_i) per row of two [n, d] arrays (1-D inputs treated as one row)."""
    ad = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    bd = b.data if b.data.ndim == 2 else b.data.reshape(1, -1)
    if ad.shape != bd.shape:
        raise ShapeError(f"cosine_distance_rows: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(ad, axis=-1)
    nb = np.linalg.norm(bd, axis=-1)
    if np.any(na <= 1e-12):
        raise NumericError("cosine_distance_rows: left side has a (near-)zero-norm row")
    if np.any(nb <= 1e-12):
        raise NumericError("cosine_distance_rows: right side has a (near-)zero-norm row")
    dot = (ad * bd).sum(axis=-1)
    cos = dot / (na * nb)

    def rule(g):
        # d cos/da = b/(|a||b|) - cos * a/|a|^2 ; distance negates it
        ga = -(bd / (na * nb)[:, None] - cos[:, None] * ad / (na * na)[:, None])
        gb = -(ad / (na * nb)[:, None] - cos[:, None] * bd / (nb * nb)[:, None])
        g2 = g.reshape(-1, 1)
        return (
            (g2 * ga).reshape(a.data.shape),
            (g2 * gb).reshape(b.data.shape),
        )

    return _apply((a, b), 1.0 - cos, rule)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of f at x and central differences.

    f must return a scalar Tensor and be deterministic. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|); the max over all
    coordinates is returned. x is restored to its original state.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractError(f"grad_check: step h={h} outside [1e-7, 1e-3]")
    saved_grad = x.grad
    saved_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("grad_check: f must return a scalar Tensor")
        tape.backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

        x.requires_grad = False  # plain evaluations below
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(x).item()
            flat[i] = orig - h
            f_minus = f(x).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(1.0, np.abs(analytic))
        return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    finally:
        x.grad = saved_grad
        x.requires_grad = saved_rg
