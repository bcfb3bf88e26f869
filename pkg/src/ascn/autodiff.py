"""A small reverse-mode differentiation engine over numpy arrays.

Operations are recorded on a :class:`Tape` at array granularity (a matrix
product or a masked max is one node). ``Tape.backward`` walks the record in
reverse and returns gradients for every parameter leaf.

Max-type nodes (``max``, ``relu``) remember which branch won. Gradients flow
to that branch only, with ties going to the lowest index. The winners are also
exposed via :meth:`Tape.kink_signature`, which lets :func:`grad_check` spot
finite-difference probes that cross a kink.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidParam, NumericalError

NORM_EPS = 1e-12
_SHORT_AXIS = 32


class Node:
    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, shape={self.shape})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _scatter_rows(rows: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    """Sum ``rows`` into a zero array of ``shape`` at row positions ``idx``."""
    out = np.zeros(shape)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


class Tape:
    """Append-only record of array operations."""

    def __init__(self):
        self.values: list = []
        self.parents: list[tuple[int, ...]] = []
        self.backfns: list[Callable | None] = []
        self.needs: list[bool] = []
        self.param_names: dict[int, str] = {}
        self.kinks: list[np.ndarray] = []

    def __len__(self):
        return len(self.values)

    def _push(self, value, parents=(), backward=None) -> Node:
        self.values.append(value)
        self.parents.append(tuple(p.id for p in parents))
        needs = any(self.needs[p.id] for p in parents)
        self.backfns.append(backward if needs else None)
        self.needs.append(needs)
        return Node(self, len(self.values) - 1)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise InvalidParam("node belongs to another tape")
            return x
        return self.const(x)

    # -- leaves --------------------------------------------------------------

    def const(self, x) -> Node:
        self.values.append(np.asarray(x, dtype=np.float64))
        self.parents.append(())
        self.backfns.append(None)
        self.needs.append(False)
        return Node(self, len(self.values) - 1)

    def param(self, name: str, value) -> Node:
        self.values.append(np.asarray(value, dtype=np.float64))
        self.parents.append(())
        self.backfns.append(None)
        self.needs.append(True)
        node = Node(self, len(self.values) - 1)
        self.param_names[node.id] = name
        return node

    # -- elementwise ---------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._push(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._push(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        return self._push(va * vb, (a, b),
                          lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))

    scale = mul

    def relu(self, x) -> Node:
        x = self._lift(x)
        mask = x.value > 0.0
        self.kinks.append(mask)
        return self._push(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    # -- reductions ----------------------------------------------------------

    def sum(self, x, axis=None) -> Node:
        x = self._lift(x)
        shape = x.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._push(np.sum(x.value, axis=axis), (x,), back)

    def max(self, x, axis: int) -> Node:
        """Max along ``axis``; the gradient goes to the first maximal entry."""
        x = self._lift(x)
        v = x.value
        axis = axis % v.ndim
        if v.shape[axis] <= _SHORT_AXIS:
            # running max over a short axis beats a strided argmax
            slices = np.moveaxis(v, axis, 0)
            out = np.array(slices[0])
            arg = np.zeros(out.shape, dtype=np.int64)
            for i in range(1, slices.shape[0]):
                upd = slices[i] > out
                np.copyto(out, slices[i], where=upd)
                arg[upd] = i
        else:
            arg = np.argmax(v, axis=axis)
            out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
        self.kinks.append(arg)

        def back(g):
            gx = np.zeros_like(v)
            np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return self._push(out, (x,), back)

    def inner(self, a, b) -> Node:
        """Inner product along the last axis."""
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        return self._push(np.sum(va * vb, axis=-1), (a, b),
                          lambda g: (_unbroadcast(g[..., None] * vb, va.shape),
                                     _unbroadcast(g[..., None] * va, vb.shape)))

    def norm(self, x) -> Node:
        """Euclidean norm along the last axis; zero vectors get zero gradient."""
        x = self._lift(x)
        v = x.value
        n = np.sqrt(np.sum(v * v, axis=-1))
        ok = n >= NORM_EPS
        safe = np.where(ok, n, 1.0)
        return self._push(n, (x,), lambda g: (np.where(ok, g / safe, 0.0)[..., None] * v,))

    # -- linear algebra ------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        return self._push(va @ vb, (a, b), lambda g: (g @ vb.T, va.T @ g))

    def affine(self, x, w, b) -> Node:
        x, w, b = self._lift(x), self._lift(w), self._lift(b)
        vx, vw = x.value, w.value
        return self._push(vx @ vw + b.value, (x, w, b),
                          lambda g: (g @ vw.T, vx.T @ g, g.sum(axis=0)))

    def cosine(self, a, b) -> Node:
        """Cosines of every pair: a (..., 3) against b (K, 3) gives (..., K).

        A vector with norm below 1e-12 has cosine 0 with everything and
        receives zero gradient.
        """
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        na = np.sqrt(np.sum(va * va, axis=-1, keepdims=True))
        nb = np.sqrt(np.sum(vb * vb, axis=-1, keepdims=True))
        oka, okb = na >= NORM_EPS, nb >= NORM_EPS
        ua = np.where(oka, va / np.where(oka, na, 1.0), 0.0)
        ub = np.where(okb, vb / np.where(okb, nb, 1.0), 0.0)
        cos = ua @ ub.T
        need_a, need_b = self.needs[a.id], self.needs[b.id]

        def back(g):
            ga = gb = None
            flat_g = g.reshape(-1, vb.shape[0])
            flat_c = cos.reshape(-1, vb.shape[0])
            flat_ua = ua.reshape(-1, 3)
            if need_b:
                num = flat_g.T @ flat_ua - (flat_g * flat_c).sum(axis=0)[:, None] * ub
                gb = np.where(okb, num / np.where(okb, nb, 1.0), 0.0)
            if need_a:
                flat_na = na.reshape(-1, 1)
                flat_ok = oka.reshape(-1, 1)
                num = flat_g @ ub - (flat_g * flat_c).sum(axis=1)[:, None] * flat_ua
                ga = np.where(flat_ok, num / np.where(flat_ok, flat_na, 1.0), 0.0).reshape(va.shape)
            return (ga, gb)

        return self._push(cos, (a, b), back)

    # -- shape -----------------------------------------------------------------

    def reshape(self, x, shape) -> Node:
        x = self._lift(x)
        old = x.shape
        return self._push(np.reshape(x.value, shape), (x,), lambda g: (g.reshape(old),))

    def transpose(self, x) -> Node:
        x = self._lift(x)
        return self._push(x.value.T, (x,), lambda g: (g.T,))

    def concat(self, xs, axis: int = -1) -> Node:
        xs = [self._lift(x) for x in xs]
        sizes = [x.shape[axis] for x in xs]
        cuts = np.cumsum(sizes)[:-1]
        return self._push(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                          lambda g: tuple(np.split(g, cuts, axis=axis)))

    def gather(self, x, idx) -> Node:
        """Rows of ``x`` picked by an integer array: result[...] = x[idx[...]]."""
        x = self._lift(x)
        idx = np.asarray(idx, dtype=np.int64)
        v = x.value

        def back(g):
            return (_scatter_rows(g.reshape((-1,) + v.shape[1:]), idx.ravel(), v.shape),)

        return self._push(v[idx], (x,), back)

    def gather_max(self, x, idx) -> Node:
        """``out[n] = max_m x[idx[n, m]]`` channel-wise; first maximal slot wins."""
        x = self._lift(x)
        idx = np.asarray(idx, dtype=np.int64)
        v = x.value
        if v.ndim != 2 or idx.ndim != 2:
            raise InvalidParam("gather_max needs a 2-D input and a 2-D index")
        out = v[idx[:, 0]].copy()
        arg = np.zeros(out.shape, dtype=np.int64)
        for m in range(1, idx.shape[1]):
            cand = v[idx[:, m]]
            upd = cand > out
            np.copyto(out, cand, where=upd)
            arg[upd] = m
        self.kinks.append(arg)
        src = np.take_along_axis(idx, arg, axis=1)

        def back(g):
            flat = (src * v.shape[1] + np.arange(v.shape[1])).ravel()
            return (np.bincount(flat, weights=g.ravel(), minlength=v.size).reshape(v.shape),)

        return self._push(out, (x,), back)

    def match_max(self, g, idx, dirs, kdirs) -> Node:
        """Best slot per column: ``out[n, k] = max_m g[idx[n, m], k] * cos(dirs[n, m], kdirs[k])``.

        ``g`` is (N0, K), ``idx`` (N, M), ``dirs`` a constant (N, M, 3) and
        ``kdirs`` (K, 3). Zero-norm vectors have cosine 0. Only the winning
        slot carries gradient, so the backward pass never forms (N, M, K).
        """
        g, kdirs = self._lift(g), self._lift(kdirs)
        idx = np.asarray(idx, dtype=np.int64)
        vg, vb = g.value, kdirs.value
        a = np.asarray(dirs, dtype=np.float64)
        na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        nb = np.sqrt(np.sum(vb * vb, axis=-1, keepdims=True))
        oka, okb = na >= NORM_EPS, nb >= NORM_EPS
        ua = np.where(oka, a / np.where(oka, na, 1.0), 0.0)
        ub = np.where(okb, vb / np.where(okb, nb, 1.0), 0.0)
        n, k = idx.shape[0], vb.shape[0]
        out = vg[idx[:, 0]] * (ua[:, 0] @ ub.T)
        arg = np.zeros((n, k), dtype=np.int64)
        for m in range(1, idx.shape[1]):
            cand = vg[idx[:, m]] * (ua[:, m] @ ub.T)
            upd = cand > out
            np.copyto(out, cand, where=upd)
            arg[upd] = m
        self.kinks.append(arg)
        rows = np.arange(n)[:, None]
        src = idx[rows, arg]
        u_sel = ua[rows, arg]
        c_sel = np.einsum("nkc,kc->nk", u_sel, ub)
        g_sel = vg[src, np.arange(k)]
        need_g, need_b = self.needs[g.id], self.needs[kdirs.id]

        def back(go):
            dg = db = None
            if need_g:
                flat = (src * k + np.arange(k)).ravel()
                dg = np.bincount(flat, weights=(go * c_sel).ravel(), minlength=vg.size).reshape(vg.shape)
            if need_b:
                w = go * g_sel
                num = np.einsum("nk,nkc->kc", w, u_sel) - (w * c_sel).sum(axis=0)[:, None] * ub
                db = np.where(okb, num / np.where(okb, nb, 1.0), 0.0)
            return (dg, db)

        return self._push(out, (g, kdirs), back)

    def pick(self, x, index) -> Node:
        x = self._lift(x)
        shape = x.shape

        def back(g):
            gx = np.zeros(shape)
            gx[index] = g
            return (gx,)

        return self._push(x.value[index], (x,), back)

    # -- losses ----------------------------------------------------------------

    def log_softmax(self, x) -> Node:
        """Log-softmax over the last axis, stabilised by subtracting the max."""
        x = self._lift(x)
        v = x.value
        shifted = v - v.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        soft = np.exp(out)
        return self._push(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))

    def cross_entropy(self, logits, label: int) -> Node:
        return self.mul(self.pick(self.log_softmax(logits), label), -1.0)

    # -- evaluation --------------------------------------------------------------

    def backward(self, out: Node) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``out`` with respect to every parameter leaf."""
        if np.ndim(out.value) != 0:
            raise InvalidParam("backward needs a scalar output")
        grads: list = [None] * (out.id + 1)
        grads[out.id] = np.ones(())
        result: dict[str, np.ndarray] = {}
        for i in range(out.id, -1, -1):
            g = grads[i]
            if g is None or not self.needs[i]:
                continue
            if i in self.param_names:
                name = self.param_names[i]
                result[name] = result[name] + g if name in result else np.array(g, dtype=np.float64)
                continue
            fn = self.backfns[i]
            if fn is None:
                continue
            for pid, pg in zip(self.parents[i], fn(g)):
                if pg is None or not self.needs[pid]:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        for name, g in result.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        return result

    def kink_signature(self) -> list[np.ndarray]:
        return [k.copy() for k in self.kinks]


def same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


# ---------------------------------------------------------------------------
# parameters and optimisers


class ParamStore:
    """Named parameter arrays, gradient buffers and Adam moments.

    Iteration order is declaration order, which is also the serialization order.
    """

    def __init__(self):
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.unit_rows: set[str] = set()
        self.t = 0

    def add(self, name: str, value, unit_rows: bool = False) -> None:
        if name in self.values:
            raise InvalidParam(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        if unit_rows:
            self.unit_rows.add(name)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray], weight: float = 1.0):
        for name, g in grads.items():
            self.grads[name] += weight * g

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.empty(0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v, name in self.unit_rows)
        return out

    def guard_directions(self, floor: float = 1e-6):
        """Rescale direction rows that shrank below ``floor`` back to unit length."""
        for name in self.unit_rows:
            v = self.values[name]
            n = np.linalg.norm(v, axis=-1, keepdims=True)
            small = (n < floor) & (n > 0.0)
            if np.any(small):
                np.divide(v, n, out=v, where=small)


def sgd_step(params: ParamStore, lr: float) -> None:
    for name, v in params.values.items():
        v -= lr * params.grads[name]
    params.guard_directions()


def adam_step(params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    params.t += 1
    c1 = 1.0 - beta1 ** params.t
    c2 = 1.0 - beta2 ** params.t
    for name, v in params.values.items():
        g = params.grads[name]
        m, s = params.m[name], params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        s *= beta2
        s += (1.0 - beta2) * g * g
        v -= lr * (m / c1) / (np.sqrt(s / c2) + eps)
    params.guard_directions()


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped_ties: list[tuple[str, tuple]] = field(default_factory=list)
    small: dict[str, int] = field(default_factory=dict)
    failures: list[tuple[str, tuple, float, float, float]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'parameter':<24} {'checked':>7} {'small':>6} {'max rel err':>12}"]
        for name in self.checked:
            lines.append(f"{name:<24} {self.checked[name]:>7} {self.small.get(name, 0):>6} "
                         f"{self.max_rel_error.get(name, 0.0):>12.3e}")
        lines.append(f"skipped at max ties: {len(self.skipped_ties)}; failures: {len(self.failures)}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[ParamStore], tuple[Tape, Node]], params: ParamStore,
               h: float = 1e-5, tolerance: float = 1e-4, min_abs: float = 1e-8,
               names=None, analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_fn`` builds a tape from the current parameter values and returns it
    with its scalar loss node. Entries whose probes change any max/relu winner
    are reported as ties rather than checked; entries with
    ``|analytic| <= min_abs`` are counted but not checked.
    """
    tape, loss = loss_fn(params)
    base_kinks = tape.kink_signature()
    if analytic is None:
        analytic = tape.backward(loss)
    report = GradCheckReport(tolerance=tolerance)
    for name in (names or list(params)):
        value = params.values[name]
        grad = analytic.get(name, np.zeros_like(value))
        worst, checked, small = 0.0, 0, 0
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            tp, lp = loss_fn(params)
            value[idx] = old - h
            tm, lm = loss_fn(params)
            value[idx] = old
            if not (same_kinks(base_kinks, tp.kink_signature())
                    and same_kinks(base_kinks, tm.kink_signature())):
                report.skipped_ties.append((name, idx))
                continue
            numeric = (float(lp.value) - float(lm.value)) / (2.0 * h)
            a = float(grad[idx])
            if abs(a) <= min_abs:
                small += 1
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric))
            checked += 1
            worst = max(worst, rel)
            if rel >= tolerance:
                report.failures.append((name, idx, a, numeric, rel))
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.small[name] = small
    return report
