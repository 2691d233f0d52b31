"""Second-order forward-mode differentiation.

A ``Jet2`` carries a value together with its gradient and Hessian with
respect to ``n`` seed variables.  Values may be numpy arrays: a jet of
batch shape ``B`` stores ``val`` (B), ``grad`` (B+(n,)) and ``hess``
(B+(n,n)), so a whole vector of quadrature points is differentiated at
once.
"""

from __future__ import annotations

import numpy as np


class Jet2:
    __array_priority__ = 100

    def __init__(self, val, grad, hess):
        self.val = np.asarray(val, dtype=float)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)

    # construction -------------------------------------------------------
    @classmethod
    def constant(cls, val, n: int) -> "Jet2":
        val = np.asarray(val, dtype=float)
        return cls(val, np.zeros(val.shape + (n,)), np.zeros(val.shape + (n, n)))

    @classmethod
    def variable(cls, val: float, index: int, n: int) -> "Jet2":
        g = np.zeros(n)
        g[index] = 1.0
        return cls(val, g, np.zeros((n, n)))

    @classmethod
    def variables(cls, values) -> list["Jet2"]:
        values = np.asarray(values, dtype=float)
        n = len(values)
        return [cls.variable(v, i, n) for i, v in enumerate(values)]

    @property
    def n(self) -> int:
        return self.grad.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __getitem__(self, idx) -> "Jet2":
        return Jet2(self.val[idx], self.grad[idx], self.hess[idx])

    def __repr__(self) -> str:
        return f"Jet2(val={self.val!r}, grad={self.grad!r})"

    # helpers -------------------------------------------------------------
    def _lift(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            return other
        return Jet2.constant(other, self.n)

    def _chain(self, f0, f1, f2) -> "Jet2":
        """Apply a scalar function with derivatives f1, f2 at self.val."""
        f1 = np.asarray(f1)
        f2 = np.asarray(f2)
        g = f1[..., None] * self.grad
        h = f2[..., None, None] * self.grad[..., :, None] * self.grad[..., None, :]
        h = h + f1[..., None, None] * self.hess
        return Jet2(f0, g, h)

    # arithmetic ----------------------------------------------------------
    def __neg__(self) -> "Jet2":
        return Jet2(-self.val, -self.grad, -self.hess)

    def __add__(self, other) -> "Jet2":
        o = self._lift(other)
        return Jet2(self.val + o.val, self.grad + o.grad, self.hess + o.hess)

    __radd__ = __add__

    def __sub__(self, other) -> "Jet2":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Jet2":
        return self._lift(other) - self

    def __mul__(self, other) -> "Jet2":
        if not isinstance(other, Jet2):
            c = np.asarray(other, dtype=float)
            return Jet2(self.val * c, self.grad * c[..., None], self.hess * c[..., None, None])
        a, b = self, other
        val = a.val * b.val
        grad = a.grad * b.val[..., None] + a.val[..., None] * b.grad
        outer = a.grad[..., :, None] * b.grad[..., None, :]
        hess = (
            a.hess * b.val[..., None, None]
            + a.val[..., None, None] * b.hess
            + outer
            + np.swapaxes(outer, -1, -2)
        )
        return Jet2(val, grad, hess)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        v = self.val
        return self._chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __truediv__(self, other) -> "Jet2":
        if not isinstance(other, Jet2):
            return self * (1.0 / np.asarray(other, dtype=float))
        return self * other.reciprocal()

    def __rtruediv__(self, other) -> "Jet2":
        return self.reciprocal() * other

    def __pow__(self, p) -> "Jet2":
        if isinstance(p, Jet2):
            return exp(p * log(self))
        v = self.val
        if p == 0:
            return Jet2.constant(np.ones_like(v), self.n)
        if p == 1:
            return self
        if p == 2:
            return self * self
        return self._chain(v**p, p * v ** (p - 1), p * (p - 1) * v ** (p - 2))

    def sum(self, axis=None) -> "Jet2":
        if axis is None:
            axes = tuple(range(self.val.ndim))
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
        return Jet2(self.val.sum(axis=axes), self.grad.sum(axis=axes), self.hess.sum(axis=axes))


def exp(a: Jet2) -> Jet2:
    e = np.exp(a.val)
    return a._chain(e, e, e)


def log(a: Jet2) -> Jet2:
    v = a.val
    return a._chain(np.log(v), 1.0 / v, -1.0 / v**2)


def sqrt(a: Jet2) -> Jet2:
    r = np.sqrt(a.val)
    return a._chain(r, 0.5 / r, -0.25 / r**3)


def as_jet(x, n: int) -> Jet2:
    return x if isinstance(x, Jet2) else Jet2.constant(x, n)
