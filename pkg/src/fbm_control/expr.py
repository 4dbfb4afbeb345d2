"""Arithmetic expression grammar for coefficient fields.

Expressions use ``+ - * / **``, numeric literals, named parameters, the
time ``t``, indexed vectors such as ``x[0]`` or ``u[1]``, and the functions
``sin cos exp tanh``. Parsing goes through the stdlib ``ast`` module; the
validated tree is turned into a sympy expression so that derivatives are
exact.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import sympy as sp

FUNCTIONS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "tanh": sp.tanh}
T = sp.Symbol("t", real=True)


class ExpressionError(ValueError):
    def __init__(self, key: str, message: str, col: int | None = None):
        where = f" (column {col + 1})" if col is not None else ""
        super().__init__(f"{key}: {message}{where}")
        self.detail = f"{message}{where}"
        self.key = key
        self.col = col


def vector_symbols(name: str, size: int) -> list[sp.Symbol]:
    return [sp.Symbol(f"{name}{i}", real=True) for i in range(size)]


class _Converter:
    def __init__(self, key, vectors, params):
        self.key = key
        self.vectors = vectors
        self.params = params

    def fail(self, node, message):
        raise ExpressionError(self.key, message, getattr(node, "col_offset", None))

    def __call__(self, node):
        if isinstance(node, ast.Expression):
            return self(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return sp.Float(node.value) if isinstance(node.value, float) else sp.Integer(node.value)
        if isinstance(node, ast.Name):
            if node.id == "t":
                return T
            if node.id in self.params:
                return sp.Float(self.params[node.id])
            if node.id in self.vectors:
                self.fail(node, f"vector '{node.id}' must be indexed")
            self.fail(node, f"unknown name '{node.id}'")
        if isinstance(node, ast.Subscript):
            if not (isinstance(node.value, ast.Name) and node.value.id in self.vectors):
                self.fail(node, "only x[i], u[i] and zeta[i] may be indexed")
            idx = node.slice
            if not (isinstance(idx, ast.Constant) and isinstance(idx.value, int)):
                self.fail(node, "index must be an integer literal")
            syms = self.vectors[node.value.id]
            if not 0 <= idx.value < len(syms):
                self.fail(node, f"index {idx.value} out of range for '{node.value.id}'")
            return syms[idx.value]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self(node.operand)
            return -inner if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.BinOp):
            left, right = self(node.left), self(node.right)
            ops = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
                   ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
                   ast.Pow: lambda a, b: a ** b}
            for kind, fn in ops.items():
                if isinstance(node.op, kind):
                    return fn(left, right)
            self.fail(node, "unsupported operator")
        if isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS):
                self.fail(node, "only sin, cos, exp and tanh may be called")
            if len(node.args) != 1 or node.keywords:
                self.fail(node, f"{node.func.id} takes exactly one argument")
            return FUNCTIONS[node.func.id](self(node.args[0]))
        self.fail(node, f"unsupported syntax {type(node).__name__}")


def parse(text, key: str, vectors: Mapping[str, list] | None = None,
          params: Mapping[str, float] | None = None) -> sp.Expr:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return sp.Float(text)
    if not isinstance(text, str):
        raise ExpressionError(key, f"expected an expression string, got {type(text).__name__}")
    text = text.strip()
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        col = exc.offset - 1 if exc.offset else len(text)  # offset 0: error at end of input
        raise ExpressionError(key, f"syntax error: {exc.msg}", col) from None
    return _Converter(key, dict(vectors or {}), dict(params or {}))(tree)


@dataclass
class Field:
    """Vector field ``g(t, x, u)`` with exact first and second x-derivatives.

    ``value`` returns ``(S, r)``, ``jac`` returns ``(S, r, n)`` and ``hess``
    returns ``(S, r, n, n)`` for batched ``x`` of shape ``(S, n)``.
    """

    exprs: list[sp.Expr]
    n: int
    d: int

    def __post_init__(self):
        self.xs = vector_symbols("x", self.n)
        self.us = vector_symbols("u", self.d)
        args = [T, *self.xs, *self.us]
        self.r = len(self.exprs)
        jac = [[sp.diff(e, x) for x in self.xs] for e in self.exprs]
        hess = [[[sp.diff(j, x) for x in self.xs] for j in row] for row in jac]
        self._value = [sp.lambdify(args, e, "numpy") for e in self.exprs]
        self._jac = [[sp.lambdify(args, e, "numpy") for e in row] for row in jac]
        self._hess = [[[sp.lambdify(args, e, "numpy") for e in col] for col in row] for row in hess]
        self._jac_zero = [[e == 0 for e in row] for row in jac]
        self._hess_zero = [[[e == 0 for e in col] for col in row] for row in hess]
        self.depends_on_u = any(e.has(u) for e in self.exprs for u in self.us)

    @classmethod
    def from_strings(cls, texts, key, n, d, params):
        vectors = {"x": vector_symbols("x", n), "u": vector_symbols("u", d)}
        exprs = [parse(s, f"{key}[{i}]", vectors, params) for i, s in enumerate(texts)]
        return cls(exprs, n, d)

    def _args(self, t, x, u):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        s = max(x.shape[0], u.shape[0])
        return s, [t, *x.T, *u.T]

    @staticmethod
    def _fill(fn, args, s):
        return np.broadcast_to(np.asarray(fn(*args), dtype=float), (s,))

    def value(self, t, x, u) -> np.ndarray:
        s, args = self._args(t, x, u)
        return np.stack([self._fill(f, args, s) for f in self._value], axis=-1)

    def jac(self, t, x, u) -> np.ndarray:
        s, args = self._args(t, x, u)
        out = np.zeros((s, self.r, self.n))
        for i in range(self.r):
            for j in range(self.n):
                if not self._jac_zero[i][j]:
                    out[:, i, j] = self._fill(self._jac[i][j], args, s)
        return out

    def hess(self, t, x, u) -> np.ndarray:
        s, args = self._args(t, x, u)
        out = np.zeros((s, self.r, self.n, self.n))
        for i in range(self.r):
            for j in range(self.n):
                for k in range(self.n):
                    if not self._hess_zero[i][j][k]:
                        out[:, i, j, k] = self._fill(self._hess[i][j][k], args, s)
        return out


def time_function(text, key, params):
    """Scalar function of ``t`` as a value/derivative pair of numpy callables."""
    expr = parse(text, key, {}, params)
    value = sp.lambdify([T], expr, "numpy")
    deriv = sp.lambdify([T], sp.diff(expr, T), "numpy")
    constant = float(expr) if not expr.free_symbols else None
    return expr, value, deriv, constant


def zeta_policy(text, key, d, k2, params):
    """Control law ``u = g(t, zeta_t)`` compiled from expressions in ``t`` and ``zeta[i]``."""
    texts = text if isinstance(text, list) else [text]
    if len(texts) != d:
        raise ExpressionError(key, f"expected {d} control expressions, got {len(texts)}")
    zs = vector_symbols("zeta", k2)
    exprs = [parse(s, f"{key}[{i}]", {"zeta": zs}, params) for i, s in enumerate(texts)]
    fns = [sp.lambdify([T, *zs], e, "numpy") for e in exprs]

    def law(t, zeta):
        zeta = np.atleast_2d(zeta)
        cols = [np.broadcast_to(np.asarray(f(t, *zeta.T), dtype=float), (zeta.shape[0],)) for f in fns]
        return np.stack(cols, axis=-1)

    return law
