"""Closed-form scalar fields over the half-space T^2 x R+.

Perturbation potentials and boundary temperatures are given as small
expression strings (constants, sin/cos of 2*pi-periodic arguments in
x1/x2, exponentials in x3, sums and products).  Parsing goes through
sympy so gradients and Hessians are exact; the original string stays
serializable in config files.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

X1, X2, X3 = sp.symbols("x1 x2 x3", real=True)

_ALLOWED_FUNCS = (sp.sin, sp.cos, sp.exp)
_LOCALS = {"x1": X1, "x2": X2, "x3": X3, "pi": sp.pi,
           "sin": sp.sin, "cos": sp.cos, "exp": sp.exp}


class ExpressionError(ValueError):
    pass


def _check_grammar(expr):
    for f in expr.atoms(sp.Function):
        if not isinstance(f, _ALLOWED_FUNCS):
            raise ExpressionError(f"function {f.func} not in the closed-form grammar")
    bad = expr.free_symbols - {X1, X2, X3}
    if bad:
        raise ExpressionError(f"unknown symbols {bad}; only x1, x2, x3 are allowed")


def _lambdify(expr):
    f = sp.lambdify((X1, X2, X3), expr, modules="numpy")

    def wrapped(x1, x2, x3):
        out = f(x1, x2, x3)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               np.broadcast_shapes(np.shape(x1), np.shape(x2), np.shape(x3))).copy()

    return wrapped


class ScalarField:
    """A scalar field with exact gradient and Hessian evaluators."""

    def __init__(self, expr_str: str):
        self.expr_str = str(expr_str)
        try:
            expr = sp.sympify(self.expr_str, locals=_LOCALS)
        except (sp.SympifyError, SyntaxError, TypeError) as exc:
            raise ExpressionError(f"cannot parse {expr_str!r}: {exc}") from None
        _check_grammar(expr)
        self.expr = expr
        self._val = _lambdify(expr)
        self._grad = [_lambdify(sp.diff(expr, s)) for s in (X1, X2, X3)]
        self._hess = [[_lambdify(sp.diff(expr, si, sj)) for sj in (X1, X2, X3)]
                      for si in (X1, X2, X3)]

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._val(x[:, 0], x[:, 1], x[:, 2] if x.shape[1] > 2 else 0.0)

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = [g(x[:, 0], x[:, 1], x[:, 2]) for g in self._grad]
        return np.stack(cols, axis=-1)

    def hessian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows = [[h(x[:, 0], x[:, 1], x[:, 2]) for h in r] for r in self._hess]
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    def is_horizontally_periodic(self, samples: int = 64, tol: float = 1e-10, seed: int = 0) -> bool:
        rng = np.random.default_rng(seed)
        x = rng.random((samples, 3))
        x[:, 2] *= 3.0
        ref = self(x)
        for axis in (0, 1):
            shifted = x.copy()
            shifted[:, axis] += 1.0
            if np.max(np.abs(self(shifted) - ref)) > tol:
                return False
        return True

    def vanishes_on_floor(self, samples: int = 64, tol: float = 1e-10, seed: int = 0) -> bool:
        rng = np.random.default_rng(seed)
        x = np.column_stack([rng.random(samples), rng.random(samples), np.zeros(samples)])
        return bool(np.max(np.abs(self(x))) <= tol)

    def __repr__(self):
        return f"ScalarField({self.expr_str!r})"


ZERO_FIELD = ScalarField("0")
