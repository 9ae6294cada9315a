"""Forward-mode automatic differentiation with dual numbers.

Two carriers are provided:

* :class:`Dual` -- a scalar value with a tangent vector, used by the
  scalar geometry kernels (box corners, polytope clipping, Chamfer) and the
  losses built on them.
* :class:`DualArray` -- an ndarray of values with a trailing tangent axis,
  used by the attention decoder so the same numpy code path can be run with
  or without derivatives.

Code written against the helpers in this module (``sqrt``, ``exp``, ...)
works unchanged on plain floats/ndarrays, which is how every value-only
path in the package runs.

Branch recording
----------------
Operations with a non-smooth point (``abs``, ``min``, a clipping side test,
a norm at zero) report a *margin* through :func:`note_branch`. Inside a
:func:`record_branches` context the margin's first-order distance to zero
along each parameter axis is accumulated, which lets the gradient checker
skip parameters sitting next to a kink instead of reporting a false failure.
"""

import contextlib
import contextvars
import math
import numbers

import numpy as np

__all__ = [
    "Dual",
    "DualArray",
    "seed",
    "seed_array",
    "value",
    "tangent",
    "sqrt",
    "exp",
    "log",
    "log1p",
    "sin",
    "cos",
    "softplus",
    "minimum",
    "maximum",
    "argmin",
    "note_branch",
    "note_branch_norm",
    "record_branches",
    "concatenate",
    "where",
]


class Dual:
    """Scalar dual number ``val + der . eps``."""

    __slots__ = ("val", "der")
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = float(val)
        self.der = der

    def __repr__(self):
        return f"Dual({self.val!r}, {self.der!r})"

    def __float__(self):
        return self.val

    # arithmetic
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        if isinstance(other, numbers.Real):
            return Dual(self.val + other, self.der)
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        if isinstance(other, numbers.Real):
            return Dual(self.val - other, self.der)
        return NotImplemented

    def __rsub__(self, other):
        if isinstance(other, numbers.Real):
            return Dual(other - self.val, -self.der)
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.der * other.val + other.der * self.val)
        if isinstance(other, numbers.Real):
            return Dual(self.val * other, self.der * other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.val / other.val
            return Dual(q, (self.der - other.der * q) / other.val)
        if isinstance(other, numbers.Real):
            return Dual(self.val / other, self.der / other)
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, numbers.Real):
            q = other / self.val
            return Dual(q, -self.der * (q / self.val))
        return NotImplemented

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __pow__(self, p):
        if not isinstance(p, numbers.Real):
            return NotImplemented
        if p == 2:
            return Dual(self.val * self.val, self.der * (2.0 * self.val))
        return Dual(self.val**p, self.der * (p * self.val ** (p - 1)))

    def __abs__(self):
        note_branch(self)
        if self.val < 0:
            return -self
        return self

    # comparisons act on the value so geometric code can branch normally
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    def sqrt(self):
        r = math.sqrt(self.val)
        if r == 0.0:
            return Dual(0.0, np.zeros_like(self.der))
        return Dual(r, self.der / (2.0 * r))

    def exp(self):
        e = math.exp(self.val)
        return Dual(e, self.der * e)

    def log(self):
        return Dual(math.log(self.val), self.der / self.val)

    def log1p(self):
        return Dual(math.log1p(self.val), self.der / (1.0 + self.val))

    def sin(self):
        return Dual(math.sin(self.val), self.der * math.cos(self.val))

    def cos(self):
        return Dual(math.cos(self.val), self.der * -math.sin(self.val))


class DualArray:
    """ndarray of dual numbers stored as ``val`` (shape S) and ``der`` (S + (n,))."""

    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)
        if self.der.shape[:-1] != self.val.shape:
            raise ValueError(f"tangent shape {self.der.shape} does not extend {self.val.shape}")

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def n_tangent(self):
        return self.der.shape[-1]

    def __repr__(self):
        return f"DualArray(shape={self.shape}, n_tangent={self.n_tangent})"

    def _bin(self, other):
        if isinstance(other, DualArray):
            return other.val, other.der
        other = np.asarray(other, dtype=float)
        return other, None

    def __add__(self, other):
        ov, od = self._bin(other)
        der = self.der if od is None else self.der + od
        return DualArray(self.val + ov, np.broadcast_to(der, (self.val + ov).shape + der.shape[-1:]))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, DualArray) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return DualArray(-self.val, -self.der)

    def __mul__(self, other):
        ov, od = self._bin(other)
        der = self.der * ov[..., None]
        if od is not None:
            der = der + od * self.val[..., None]
        return DualArray(self.val * ov, der)

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, od = self._bin(other)
        q = self.val / ov
        der = self.der / ov[..., None]
        if od is not None:
            der = der - od * (q / ov)[..., None]
        return DualArray(q, der)

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        q = other / self.val
        return DualArray(q, -self.der * (q / self.val)[..., None])

    def __pow__(self, p):
        return DualArray(self.val**p, self.der * (p * self.val ** (p - 1))[..., None])

    def __matmul__(self, other):
        ov, od = self._bin(other)
        der = np.einsum("...mkn,...kp->...mpn", self.der, ov)
        if od is not None:
            der = der + np.einsum("...mk,...kpn->...mpn", self.val, od)
        return DualArray(self.val @ ov, der)

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=float)
        return DualArray(other @ self.val, np.einsum("...mk,...kpn->...mpn", other, self.der))

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            return DualArray(self.val[idx], self.der[idx + (slice(None),)])
        return DualArray(self.val[idx], self.der[idx])

    def _axis(self, axis):
        return axis % self.val.ndim

    def sum(self, axis=None, keepdims=False):
        if axis is None:
            axes = tuple(range(self.val.ndim))
        elif isinstance(axis, tuple):
            axes = tuple(self._axis(a) for a in axis)
        else:
            axes = (self._axis(axis),)
        return DualArray(
            self.val.sum(axis=axes, keepdims=keepdims),
            self.der.sum(axis=axes, keepdims=keepdims),
        )

    def mean(self, axis=None, keepdims=False):
        s = self.sum(axis=axis, keepdims=keepdims)
        return s * (s.val.size / self.val.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        new_val = self.val.reshape(shape)
        return DualArray(new_val, self.der.reshape(new_val.shape + (self.n_tangent,)))

    def swapaxes(self, a, b):
        a, b = self._axis(a), self._axis(b)
        return DualArray(self.val.swapaxes(a, b), self.der.swapaxes(a, b))

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        e = np.exp(self.val)
        return DualArray(e, self.der * e[..., None])

    def log(self):
        return DualArray(np.log(self.val), self.der / self.val[..., None])

    def log1p(self):
        return DualArray(np.log1p(self.val), self.der / (1.0 + self.val)[..., None])

    def sqrt(self):
        r = np.sqrt(self.val)
        return DualArray(r, self.der / (2.0 * r)[..., None])

    def softplus(self):
        v = np.logaddexp(0.0, self.val)
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.val))
        return DualArray(v, self.der * sig[..., None])

    def element(self, idx):
        """Scalar :class:`Dual` at ``idx`` (tangent axis kept)."""
        return Dual(self.val[idx], self.der[idx].copy())


# ---------------------------------------------------------------------------
# seeding and access


def seed(values):
    """Independent scalar duals for a parameter vector (identity tangents)."""
    values = np.asarray(values, dtype=float).ravel()
    eye = np.eye(values.size)
    return [Dual(v, eye[i]) for i, v in enumerate(values)]


def seed_array(values, offset=0, n_tangent=None):
    """DualArray whose entries are parameters ``offset .. offset+size``."""
    values = np.asarray(values, dtype=float)
    n = values.size if n_tangent is None else n_tangent
    der = np.zeros((values.size, n))
    der[np.arange(values.size), offset + np.arange(values.size)] = 1.0
    return DualArray(values, der.reshape(values.shape + (n,)))


def constant(x, n):
    """Lift a float into a Dual with a zero tangent of length ``n``."""
    return Dual(x, np.zeros(n))


def value(x):
    if isinstance(x, (Dual, DualArray)):
        return x.val
    return x


def tangent(x, n):
    if isinstance(x, (Dual, DualArray)):
        return x.der
    return np.zeros(np.shape(x) + (n,))


def _dispatch(name, npfunc, mathfunc):
    def f(x):
        if isinstance(x, (Dual, DualArray)):
            return getattr(x, name)()
        if isinstance(x, numbers.Real):
            return mathfunc(x)
        return npfunc(x)

    f.__name__ = name
    return f


sqrt = _dispatch("sqrt", np.sqrt, math.sqrt)
exp = _dispatch("exp", np.exp, math.exp)
log = _dispatch("log", np.log, math.log)
log1p = _dispatch("log1p", np.log1p, math.log1p)
sin = _dispatch("sin", np.sin, math.sin)
cos = _dispatch("cos", np.cos, math.cos)


def softplus(x):
    if isinstance(x, DualArray):
        return x.softplus()
    if isinstance(x, Dual):
        sig = 0.5 * (1.0 + math.tanh(0.5 * x.val))
        return Dual(np.logaddexp(0.0, x.val), x.der * sig)
    return np.logaddexp(0.0, x)


def minimum(a, b):
    note_branch(a - b)
    return a if value(a) <= value(b) else b


def maximum(a, b):
    note_branch(a - b)
    return a if value(a) >= value(b) else b


def argmin(items):
    """Index of the smallest item; records the gap to the runner-up as a branch."""
    vals = [value(v) for v in items]
    order = np.argsort(vals, kind="stable")
    if len(items) > 1:
        note_branch(items[order[1]] - items[order[0]])
    return int(order[0])


def concatenate(arrays, axis=0):
    if not any(isinstance(a, DualArray) for a in arrays):
        return np.concatenate(arrays, axis=axis)
    n = next(a.n_tangent for a in arrays if isinstance(a, DualArray))
    ax = axis % np.ndim(value(arrays[0]))
    vals = [value(a) for a in arrays]
    ders = [a.der if isinstance(a, DualArray) else np.zeros(np.shape(a) + (n,)) for a in arrays]
    return DualArray(np.concatenate(vals, axis=ax), np.concatenate(ders, axis=ax))


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, DualArray) and not isinstance(b, DualArray):
        return np.where(mask, a, b)
    n = a.n_tangent if isinstance(a, DualArray) else b.n_tangent
    av, bv = value(a), value(b)
    ad = a.der if isinstance(a, DualArray) else np.zeros(np.shape(av) + (n,))
    bd = b.der if isinstance(b, DualArray) else np.zeros(np.shape(bv) + (n,))
    return DualArray(np.where(mask, av, bv), np.where(mask[..., None], ad, bd))


# ---------------------------------------------------------------------------
# branch recording

_recorder = contextvars.ContextVar("box4d_branch_recorder", default=None)


class BranchRecord:
    """Per-parameter first-order distance to the nearest recorded kink."""

    def __init__(self, n):
        self.distance = np.full(n, np.inf)

    def update(self, margin, slope):
        slope = np.abs(np.asarray(slope, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(slope > 0, abs(margin) / slope, np.inf)
        np.minimum(self.distance, d, out=self.distance)


@contextlib.contextmanager
def record_branches(n):
    rec = BranchRecord(n)
    token = _recorder.set(rec)
    try:
        yield rec
    finally:
        _recorder.reset(token)


def note_branch(margin):
    """Report a scalar whose sign change would switch a code branch."""
    rec = _recorder.get()
    if rec is None or not isinstance(margin, Dual):
        return
    if margin.der.shape != rec.distance.shape:
        return
    rec.update(margin.val, margin.der)


def note_branch_norm(components):
    """Report a vector whose norm is non-differentiable at zero."""
    rec = _recorder.get()
    if rec is None:
        return
    duals = [c for c in components if isinstance(c, Dual)]
    if not duals or duals[0].der.shape != rec.distance.shape:
        return
    norm = math.sqrt(sum(value(c) ** 2 for c in components))
    slope = np.sqrt(sum(c.der**2 for c in duals))
    rec.update(norm, slope)
