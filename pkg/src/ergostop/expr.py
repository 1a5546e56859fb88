"""A tiny arithmetic expression language for config files.

Expressions are functions of a single state variable ``x``::

    0.5*(1 + tanh(x))
    arctan(x)
    -x^3 + x

Supported: numeric literals, ``x``, ``pi``, ``+ - * /``, ``^`` or ``**``
(right associative), parentheses and the functions ``exp``, ``tanh``,
``arctan``, ``abs``, ``sqrt``, ``min``, ``max``.  Parsing produces a
vectorised callable that accepts numpy arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)

_UNARY = {
    "exp": np.exp,
    "tanh": np.tanh,
    "arctan": np.arctan,
    "abs": np.abs,
    "sqrt": np.sqrt,
}
_BINARY = {"min": np.minimum, "max": np.maximum}
_CONSTANTS = {"pi": np.pi}


@dataclass(frozen=True)
class Expression:
    """Parsed expression; call it with an array of states."""

    source: str
    _fn: Callable = field(repr=False, compare=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self._fn(x), dtype=float), x.shape).copy()

    def __str__(self):
        return self.source


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = text[pos:].lstrip()
            offset = len(text) - len(bad)
            raise ConfigError(
                f"unexpected character {bad[0]!r} at position {offset} in {text!r}",
                position=offset,
            )
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, tok, what):
        kind, value, pos = tok
        shown = "end of input" if kind == "end" else repr(value)
        raise ConfigError(
            f"{what}: unexpected token {shown} at position {pos} in {self.text!r}",
            position=pos,
        )

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] not in ("op",):
            self.fail(tok, f"expected {value!r}")

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            self.fail(tok, "trailing input")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            node = _bin(np.add if op == "+" else np.subtract, node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            node = _bin(np.multiply if op == "*" else np.divide, node, rhs)
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("+", "-"):
            self.take()
            inner = self.unary()
            return inner if tok[1] == "+" else (lambda x, f=inner: -f(x))
        return self.power()

    def power(self):
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("^", "**"):
            self.take()
            exponent = self.unary()
            return _bin(np.power, base, exponent)
        return base

    def atom(self):
        tok = self.take()
        kind, value, _ = tok
        if kind == "num":
            c = float(value)
            return lambda x: c
        if kind == "name":
            if value == "x":
                return lambda x: x
            if value in _CONSTANTS:
                c = _CONSTANTS[value]
                return lambda x: c
            if value in _UNARY or value in _BINARY:
                self.expect("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                want = 1 if value in _UNARY else 2
                if len(args) != want:
                    raise ConfigError(
                        f"{value}() takes {want} argument(s), got {len(args)} "
                        f"at position {tok[2]} in {self.text!r}",
                        position=tok[2],
                    )
                if want == 1:
                    fn, a = _UNARY[value], args[0]
                    return lambda x: fn(a(x))
                return _bin(_BINARY[value], args[0], args[1])
            self.fail(tok, "unknown name")
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        self.fail(tok, "expected a value")


def _bin(fn, a, b):
    return lambda x: fn(a(x), b(x))


def parse(text: str) -> Expression:
    """Parse ``text`` into an :class:`Expression`; raises ConfigError on failure."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError("empty expression", position=0)
    fn = _Parser(text).parse()
    return Expression(text.strip(), fn)


def constant(c: float) -> Expression:
    return parse(repr(float(c)))
