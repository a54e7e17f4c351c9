"""Reverse-mode automatic differentiation on a define-by-run tape.

All values are 64-bit reals stored in numpy arrays.  A ``Tape`` records every
primitive operation whose inputs require gradients; ``Tape.backward`` walks the
record in reverse and accumulates vector-Jacobian products into leaf ``grad``
buffers.  Accumulation is additive: calling ``backward`` on several tapes (or
building several losses from the same leaves) sums into the same buffers until
``zero_grad`` clears them.

A tape is single-threaded.  Independent tapes over disjoint tensors may run in
parallel processes, but one tape must never be shared across threads.
"""

from __future__ import annotations

import itertools
import zlib
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "constant",
    "no_grad",
    "grad_check",
    "ParamStore",
]

_serial = itertools.count()

# Stack of active recording contexts.  ``None`` entries (pushed by no_grad)
# disable recording even when an outer tape is open.
_tape_stack: list = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _active_tape():
    if _tape_stack and _tape_stack[-1] is not None:
        return _tape_stack[-1]
    return None


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_serial", "_produced")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._serial = next(_serial)
        self._produced = False  # set when an op on some tape created this tensor

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values that never tracks gradients."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def constant(x) -> Tensor:
    """Wrap a value as a non-differentiable tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Records primitive ops so a scalar loss can be differentiated once.

    The tape is rebuilt per forward pass; ``backward`` may be called exactly
    once, after which the record is discarded.
    """

    def __init__(self):
        self._nodes: list = []  # (out_serial, inputs, vjp)
        self._used = False
        self._open = False

    def __enter__(self):
        _tape_stack.append(self)
        self._open = True
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        self._open = False
        return False

    def _record(self, out: Tensor, inputs, vjp) -> None:
        out._produced = True
        self._nodes.append((out._serial, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if self._used:
            raise RuntimeError("backward was already called on this tape")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        self._used = True
        grads: dict[int, np.ndarray] = {
            loss._serial: np.ones_like(loss.data)
        }
        for out_serial, inputs, vjp in reversed(self._nodes):
            g = grads.pop(out_serial, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, ig in zip(inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t._produced:
                    acc = grads.get(t._serial)
                    grads[t._serial] = ig if acc is None else acc + ig
                else:  # leaf: accumulate additively across backward calls
                    if t.grad is None:
                        t.grad = np.array(ig, dtype=np.float64, copy=True)
                    else:
                        t.grad = t.grad + ig
        if not loss._produced and loss.requires_grad:
            # loss itself is a leaf (degenerate but legal)
            ones = np.ones_like(loss.data)
            loss.grad = ones if loss.grad is None else loss.grad + ones
        self._nodes.clear()


@contextmanager
def no_grad():
    """Disable recording inside the block, even under an open tape."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _make(data, inputs, vjp) -> Tensor:
    tape = _active_tape()
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req and tape is not None)
    if tape is not None and req:
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "add")
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "sub")
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(constant(a) if not isinstance(a, Tensor) else a, float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, float(a))
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * c,)

    return _make(ad * c, (a,), vjp)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(constant(a) if not isinstance(a, Tensor) else a, 1.0 / float(b))
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2:
        raise ShapeError(f"matmul: unsupported operand ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {ad.shape} @ {bd.shape}"
        )
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading dims into one GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(out, (a, b), vjp)

    out = np.matmul(ad, bd)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _make(y, (a,), vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), vjp)


def log1p(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g / (1.0 + ad),)

    return _make(np.log1p(ad), (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / y),)

    return _make(y, (a,), vjp)


def sin(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * np.cos(ad),)

    return _make(np.sin(ad), (a,), vjp)


def cos(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (-g * np.sin(ad),)

    return _make(np.cos(ad), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form).

    Hot path: built from in-place ufunc calls on freshly owned buffers —
    ``x**3`` through np.power in particular is far slower than two multiplies.
    """
    x = a.data
    inner = x * x
    inner *= 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    y = t + 1.0
    y *= x
    y *= 0.5

    def vjp(g):
        dinner = x * x
        dinner *= 3 * 0.044715
        dinner += 1.0
        dinner *= _GELU_C
        dy = t * t
        np.subtract(1.0, dy, out=dy)
        dy *= dinner
        dy *= x
        dy += 1.0
        dy += t
        dy *= 0.5
        dy *= g
        return (dy,)

    return _make(y, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    y = x * s

    def vjp(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _make(y, (a,), vjp)


def max_floor(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient follows the selected branch."""
    ad = a.data
    mask = ad > floor

    def vjp(g):
        return (g * mask,)

    return _make(np.maximum(ad, floor), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    out = ad.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            shape = list(ad.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, ad.shape),)

    return _make(out, (a,), vjp)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    count = 1
    for ax in axes:
        count *= ad.shape[ax]
    out = ad.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / count

    def vjp(g):
        gg = g
        if not keepdims:
            shape = list(ad.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg * inv, ad.shape),)

    return _make(out, (a,), vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    y = x - x.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def vjp(g):
        dx = g - (g * y).sum(axis=-1, keepdims=True)
        dx *= y
        return (dx,)

    return _make(y, (a,), vjp)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    y = s - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), vjp)


def layernorm_lastdim(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), vjp)


def cumsum_exclusive_lastdim(a: Tensor) -> Tensor:
    """out[..., i] = sum of a[..., :i]  (zero in the first slot)."""
    x = a.data
    c = np.cumsum(x, axis=-1)
    out = np.empty_like(c)
    out[..., 0] = 0.0
    out[..., 1:] = c[..., :-1]

    def vjp(g):
        rc = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        gi = np.empty_like(rc)
        gi[..., -1] = 0.0
        gi[..., :-1] = rc[..., 1:]
        return (gi,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    ad = a.data
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(ad.shape),)

    return _make(ad.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    ad = a.data
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, ad.shape),)

    return _make(np.broadcast_to(ad, shape), (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    datas = [t.data for t in tensors]
    axis = axis % datas[0].ndim
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(datas))
        )

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ad = a.data
    axis = axis % ad.ndim
    key = tuple(slice(None) if i != axis else slice(start, stop) for i in range(ad.ndim))

    def vjp(g):
        out = np.zeros_like(ad)
        out[key] = g
        return (out,)

    return _make(ad[key].copy(), (a,), vjp)


def gather_rows(table: Tensor, idx) -> Tensor:
    """table[idx] for an integer index array; used for embedding lookup."""
    idx = np.asarray(idx, dtype=np.int64)
    td = table.data

    def vjp(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(td[idx], (table,), vjp)


def take_index_lastdim(a: Tensor, idx) -> Tensor:
    """Pick entries along the last axis.

    With ``idx`` shaped like ``a.shape[:-1]`` one entry is taken per row and
    the output drops the last axis.  With an extra trailing axis
    (``a.shape[:-1] + (m,)``) ``m`` entries are taken per row, repeats
    allowed; their gradients accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    ad = a.data
    single = idx.shape == ad.shape[:-1]
    if not single and idx.shape[:-1] != ad.shape[:-1]:
        raise ShapeError(
            f"take_index_lastdim: index shape {idx.shape} does not match {ad.shape[:-1]}"
        )
    take = idx[..., None] if single else idx
    out = np.take_along_axis(ad, take, axis=-1)
    if single:
        out = out[..., 0]

    def vjp(g):
        z = np.zeros_like(ad)
        rows = z.reshape(-1, ad.shape[-1])
        cols = take.reshape(-1, take.shape[-1])
        grad = (g[..., None] if single else g).reshape(-1, take.shape[-1])
        np.add.at(rows, (np.arange(rows.shape[0])[:, None], cols), grad)
        return (z,)

    return _make(out, (a,), vjp)


def permute_lastdim(a: Tensor, perm: np.ndarray, inverse: np.ndarray) -> Tensor:
    """Reorder the last axis by a per-batch permutation.

    ``perm``/``inverse`` have shape ``batch + (n,)`` and are broadcast over any
    middle axes of ``a``.
    """
    ad = a.data
    pexp = np.broadcast_to(perm.reshape(perm.shape[0], *(1,) * (ad.ndim - 2), perm.shape[-1]), ad.shape)
    iexp = np.broadcast_to(inverse.reshape(inverse.shape[0], *(1,) * (ad.ndim - 2), inverse.shape[-1]), ad.shape)

    def vjp(g):
        return (np.take_along_axis(g, iexp, axis=-1),)

    return _make(np.take_along_axis(ad, pexp, axis=-1), (a,), vjp)


def scatter_rows_add(src: Tensor, idx, n_rows: int) -> Tensor:
    """out[idx[i]] += src[i]; the adjoint of gathering rows."""
    idx = np.asarray(idx, dtype=np.int64)
    sd = src.data
    out = np.zeros((n_rows,) + sd.shape[1:], dtype=np.float64)
    np.add.at(out, idx, sd)

    def vjp(g):
        return (g[idx],)

    return _make(out, (src,), vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, params: dict, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` must build a scalar loss from the tensors in ``params`` (a mapping
    name -> Tensor).  Returns a report per parameter with the worst relative
    error, a pass flag, and a count of perturbations where the function went
    non-finite (those entries are flagged rather than failing the whole run).
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    for name, p in params.items():
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ValueError(f"parameter {name!r} is not a differentiable Tensor")
        p.zero_grad()

    with Tape() as tape:
        loss = fn()
        tape.backward(loss)

    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        fd = np.zeros_like(p.data)
        flagged = np.zeros(p.data.shape, dtype=bool)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        flg_flat = flagged.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad(), np.errstate(all="ignore"):
                flat[i] = orig + step
                fp = float(fn().data)
                flat[i] = orig - step
                fm = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                flg_flat[i] = True
                continue
            fd_flat[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-10)
        rel = np.abs(analytic - fd) / denom
        ok_elem = (np.abs(analytic - fd) < 1e-8) | (rel < tol) | flagged
        # relative error is only meaningful where the gradient itself rises
        # above the absolute-agreement floor; tinier entries pass on abs error
        significant = ~flagged & (np.maximum(np.abs(analytic), np.abs(fd)) > 1e-8)
        report[name] = {
            "max_rel_err": float(rel[significant].max()) if significant.any() else 0.0,
            "max_abs_err": float(np.abs(analytic - fd)[~flagged].max()) if (~flagged).any() else 0.0,
            "n_flagged": int(flagged.sum()),
            "ok": bool(ok_elem.all()),
        }
        p.zero_grad()
    return report


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


class ParamStore:
    """Named trainable tensors with per-name seeded initialization.

    Each parameter's initial values depend only on (seed, name), so adding or
    removing unrelated parameters never shifts another's initialization.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape, init: str = "fanin", scale: float | None = None) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        rng = _name_rng(self.seed, name)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "fanin":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            lim = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-lim, lim, size=shape)
        elif init == "normal":
            data = rng.standard_normal(shape) * (0.02 if scale is None else scale)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def n_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
        for k, p in self._params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {k!r}: checkpoint shape {a.shape} vs model shape {p.data.shape}"
                )
            p.data = a.copy()
