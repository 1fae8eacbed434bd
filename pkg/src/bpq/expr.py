"""Closed expression language for deterministic nodes, costs and distribution parameters.

Expressions use Python syntax restricted to numbers, names, list literals,
``+ - * /``, unary minus, subscripts (``theta[X]`` is ``index(theta, X)``) and
the calls ``exp log tanh sigmoid affine concat index clip``.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Callable

from . import autodiff as ad
from .errors import ParseError

FUNCTIONS: dict[str, Callable] = {
    "exp": ad.exp,
    "log": ad.log,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "clip": ad.clip,
    "affine": ad.affine,
    "concat": ad.concat,
    "index": ad.index,
}

_BINOPS = {ast.Add: ad.add, ast.Sub: ad.sub, ast.Mult: ad.mul, ast.Div: ad.div}


@dataclass(frozen=True)
class Expr:
    source: str
    names: frozenset = field(compare=False)
    _fn: Callable = field(compare=False, repr=False)

    def __call__(self, lookup: Callable[[str], object]):
        return self._fn(lookup)


def compile_expr(source) -> Expr:
    """Parse ``source`` into an evaluator taking a name-lookup callable."""
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        c = float(source)
        return Expr(str(source), frozenset(), lambda lookup: c)
    if not isinstance(source, str):
        raise ParseError(f"expression must be a string or number, got {type(source).__name__}")
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"cannot parse {source!r}: {exc.msg} (column {exc.offset})") from exc
    names: set[str] = set()
    fn = _build(tree.body, names, source)
    return Expr(source, frozenset(names), fn)


def _build(node, names, source):
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ParseError(f"{source!r}: only numeric literals are allowed")
        c = float(node.value) if isinstance(node.value, float) else node.value
        return lambda lookup: c
    if isinstance(node, ast.Name):
        name = node.id
        if name in FUNCTIONS:
            raise ParseError(f"{source!r}: {name} is a function, not a value")
        names.add(name)
        return lambda lookup: lookup(name)
    if isinstance(node, ast.BinOp):
        op = _BINOPS.get(type(node.op))
        if op is None:
            raise ParseError(f"{source!r}: operator {type(node.op).__name__} not allowed")
        lhs, rhs = _build(node.left, names, source), _build(node.right, names, source)
        return lambda lookup: op(lhs(lookup), rhs(lookup))
    if isinstance(node, ast.UnaryOp):
        inner = _build(node.operand, names, source)
        if isinstance(node.op, ast.USub):
            return lambda lookup: ad.neg(inner(lookup))
        if isinstance(node.op, ast.UAdd):
            return inner
        raise ParseError(f"{source!r}: unary {type(node.op).__name__} not allowed")
    if isinstance(node, ast.List):
        items = [_build(e, names, source) for e in node.elts]
        return lambda lookup: [f(lookup) for f in items]
    if isinstance(node, ast.Subscript):
        base = _build(node.value, names, source)
        idx = _build(node.slice, names, source)
        return lambda lookup: ad.index(base(lookup), idx(lookup))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            raise ParseError(f"{source!r}: unknown function {ast.unparse(node.func)}")
        if node.keywords:
            raise ParseError(f"{source!r}: keyword arguments not allowed")
        fn = FUNCTIONS[node.func.id]
        args = [_build(a, names, source) for a in node.args]
        return lambda lookup: fn(*[a(lookup) for a in args])
    raise ParseError(f"{source!r}: construct {type(node).__name__} not allowed")
