"""Tiny arithmetic expression grammar for boundary data in config files.

Supported: +, -, *, /, ^ (right associative), unary minus, parentheses,
the coordinates x, y, z, the constant pi, numeric literals, and the
functions exp and sin. Expressions evaluate vectorized over coordinate
arrays of shape (n, dim); a missing coordinate (z in 2D) is an error.
"""

from __future__ import annotations

import math
import re

import numpy as np

from .errors import ConfigurationError

_NUMBER = re.compile(r"(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?")

_FUNCTIONS = {"exp": np.exp, "sin": np.sin}
_CONSTANTS = {"pi": math.pi}
_AXES = {"x": 0, "y": 1, "z": 2}


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _NUMBER.match(text, pos)
        if m:
            tokens.append(("num", float(m.group(0)), pos))
            pos = m.end()
            continue
        m = re.match(r"[A-Za-z_]\w*", text[pos:])
        if m:
            tokens.append(("name", m.group(0), pos))
            pos += m.end()
            continue
        if text[pos] in "+-*/^()":
            tokens.append(("op", text[pos], pos))
            pos += 1
            continue
        raise ConfigurationError(
            f"expression: unexpected character {text[pos]!r} at column {pos + 1}")
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    """Recursive descent over + - (left), * / (left), unary -, ^ (right)."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message):
        kind, val, pos = self.peek()
        raise ConfigurationError(
            f"expression {self.text!r}: {message} at column {pos + 1}")

    def parse(self):
        node = self.sum()
        if self.peek()[0] != "end":
            self.fail("trailing input")
        return node

    def sum(self):
        node = self.product()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.advance()[1]
            rhs = self.product()
            node = ("+" if op == "+" else "-", node, rhs)
        return node

    def product(self):
        node = self.unary()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.advance()[1]
            rhs = self.unary()
            node = (op, node, rhs)
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.advance()
            return ("neg", self.unary())
        if self.peek()[:2] == ("op", "+"):
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.advance()
            return ("^", base, self.unary())  # right associative
        return base

    def atom(self):
        kind, val, pos = self.peek()
        if kind == "num":
            self.advance()
            return ("num", val)
        if kind == "name":
            self.advance()
            if val in _FUNCTIONS:
                if self.peek()[:2] != ("op", "("):
                    self.fail(f"function {val} needs parentheses")
                self.advance()
                arg = self.sum()
                if self.peek()[:2] != ("op", ")"):
                    self.fail("missing closing parenthesis")
                self.advance()
                return ("call", val, arg)
            if val in _CONSTANTS:
                return ("num", _CONSTANTS[val])
            if val in _AXES:
                return ("axis", _AXES[val], val)
            self.fail(f"unknown name {val!r}")
        if (kind, val) == ("op", "("):
            self.advance()
            node = self.sum()
            if self.peek()[:2] != ("op", ")"):
                self.fail("missing closing parenthesis")
            self.advance()
            return node
        self.fail("expected a value")


class Expression:
    """Parsed closed-form expression in the coordinates, evaluated vectorized."""

    def __init__(self, text: str):
        self.text = text
        self._ast = _Parser(text).parse()

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        out = self._eval(self._ast, points)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               (points.shape[0],)).copy()

    def _eval(self, node, pts):
        tag = node[0]
        if tag == "num":
            return node[1]
        if tag == "axis":
            if node[1] >= pts.shape[1]:
                raise ConfigurationError(
                    f"expression {self.text!r}: coordinate {node[2]!r} "
                    f"unavailable in dimension {pts.shape[1]}")
            return pts[:, node[1]]
        if tag == "neg":
            return -self._eval(node[1], pts)
        if tag == "call":
            return _FUNCTIONS[node[1]](self._eval(node[2], pts))
        a = self._eval(node[1], pts)
        b = self._eval(node[2], pts)
        if tag == "+":
            return a + b
        if tag == "-":
            return a - b
        if tag == "*":
            return a * b
        if tag == "/":
            return a / b
        if tag == "^":
            return np.power(a, b)
        raise AssertionError(f"unhandled node {tag}")
