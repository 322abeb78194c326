"""Observable expressions on canonical phase space.

A small infix language for scalar functions ``O(q, p)``::

    parse_observable("x1*p2 - x2*p1", n_dof=2)

Trees are immutable, support exact symbolic partial derivatives and
evaluate either at a single point (with domain checks) or over a batch of
points with numpy.  The grammar is documented in ``docs/grammar.md``.

Coordinates use the canonical interleaved ordering
``(q1, p1, q2, p2, ..., qn, pn)``; ``x<i>`` is accepted as an alias of
``q<i>``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Node", "Const", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow",
    "Sin", "Cos", "Sqrt", "Atan2",
    "ObservableExpr", "ParseError", "EvaluationDomainError",
    "parse_observable", "differentiate", "evaluate", "evaluate_batch",
    "gradient", "to_string",
]


class ParseError(ValueError):
    """Syntax or name error in observable text, with 1-based position."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line = line
        self.column = column


class EvaluationDomainError(ArithmeticError):
    """Division by zero or square root of a negative number."""

    def __init__(self, message: str, node: "Node"):
        super().__init__(f"{message} in '{to_string(node)}'")
        self.node = node


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    kind: str  # "q" or "p"
    index: int  # 1-based degree of freedom

    @property
    def name(self) -> str:
        return f"{self.kind}{self.index}"

    @property
    def position(self) -> int:
        """Index in the canonical coordinate vector."""
        return 2 * (self.index - 1) + (self.kind == "p")


@dataclass(frozen=True)
class Neg(Node):
    operand: Node


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Div(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int


@dataclass(frozen=True)
class Sin(Node):
    arg: Node


@dataclass(frozen=True)
class Cos(Node):
    arg: Node


@dataclass(frozen=True)
class Sqrt(Node):
    arg: Node


@dataclass(frozen=True)
class Atan2(Node):
    y: Node
    x: Node


_FUNCTIONS = {"sin": (Sin, 1), "cos": (Cos, 1), "sqrt": (Sqrt, 1), "atan2": (Atan2, 2)}


@dataclass(frozen=True)
class ObservableExpr:
    """An expression tree together with the number of degrees of freedom."""

    root: Node
    n_dof: int

    def __post_init__(self):
        if not isinstance(self.n_dof, int) or self.n_dof < 1:
            raise ValueError(f"n_dof must be a positive integer, got {self.n_dof!r}")
        for v in _variables(self.root):
            if v.index > self.n_dof:
                raise ValueError(f"variable {v.name} exceeds n_dof={self.n_dof}")

    @property
    def dim(self) -> int:
        return 2 * self.n_dof

    def __str__(self) -> str:
        return to_string(self.root)

    def __call__(self, point):
        return evaluate(self, point)


def _variables(node: Node):
    if isinstance(node, Var):
        yield node
    elif isinstance(node, Const):
        return
    else:
        for child in _children(node):
            yield from _variables(child)


def _children(node: Node) -> tuple:
    if isinstance(node, (Const, Var)):
        return ()
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, (Add, Sub, Mul, Div)):
        return (node.left, node.right)
    if isinstance(node, Pow):
        return (node.base,)
    if isinstance(node, (Sin, Cos, Sqrt)):
        return (node.arg,)
    if isinstance(node, Atan2):
        return (node.y, node.x)
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)

_VAR_RE = re.compile(r"([qpx])(\d+)$")


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "ws":
            chunk = m.group()
            if "\n" in chunk:
                line += chunk.count("\n")
                line_start = pos + chunk.rfind("\n") + 1
        else:
            tokens.append(_Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(_Token("end", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    # expr    := term (('+' | '-') term)*
    # term    := unary (('*' | '/') unary)*
    # unary   := '-' unary | '+' unary | power
    # power   := primary ('^' ['-' | '+'] INTEGER)?
    # primary := NUMBER | VARIABLE | FUNC '(' args ')' | '(' expr ')'

    def __init__(self, text: str, n_dof: int):
        self.tokens = _tokenize(text)
        self.i = 0
        self.n_dof = n_dof

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise ParseError(message, tok.line, tok.column)

    def advance(self) -> _Token:
        tok = self.tok
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind != "op":
            found = self.tok.text or "end of input"
            self.error(f"expected '{text}', found '{found}'")
        return self.advance()

    def parse(self) -> Node:
        if self.tok.kind == "end":
            self.error("empty expression")
        node = self.expr()
        if self.tok.kind != "end":
            self.error(f"unexpected '{self.tok.text}'")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            right = self.term()
            node = Add(node, right) if op == "+" else Sub(node, right)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            right = self.unary()
            node = Mul(node, right) if op == "*" else Div(node, right)
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if not (self.tok.kind == "op" and self.tok.text == "^"):
            return base
        self.advance()
        sign = 1
        if self.tok.kind == "op" and self.tok.text in "+-":
            sign = -1 if self.advance().text == "-" else 1
        tok = self.tok
        if tok.kind != "num":
            self.error("exponent must be an integer literal")
        if not tok.text.isdigit():
            self.error(f"non-integer exponent '{tok.text}'; use sqrt or products")
        self.advance()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.error("chained '^' is ambiguous; use parentheses")
        return Pow(base, sign * int(tok.text))

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            if tok.text in _FUNCTIONS:
                cls, arity = _FUNCTIONS[tok.text]
                self.expect("(")
                args = [self.expr()]
                while self.tok.kind == "op" and self.tok.text == ",":
                    self.advance()
                    args.append(self.expr())
                if len(args) != arity:
                    self.error(f"{tok.text} takes {arity} argument(s), got {len(args)}", tok)
                self.expect(")")
                return cls(*args)
            m = _VAR_RE.match(tok.text)
            if m is None:
                self.error(f"unknown identifier '{tok.text}'", tok)
            kind = "p" if m.group(1) == "p" else "q"
            index = int(m.group(2))
            if not 1 <= index <= self.n_dof:
                self.error(f"variable index out of range: '{tok.text}' with n_dof={self.n_dof}", tok)
            return Var(kind, index)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        self.error(f"unexpected '{found}'")


def parse_observable(text: str, n_dof: int) -> ObservableExpr:
    """Parse ``text`` into an :class:`ObservableExpr` with ``n_dof`` degrees of freedom.

    Raises
    ------
    ParseError
        On syntax errors, unknown identifiers and out-of-range variable
        indices.  The error carries 1-based ``line`` and ``column``.
    """
    if not isinstance(n_dof, int) or n_dof < 1:
        raise ValueError(f"n_dof must be a positive integer, got {n_dof!r}")
    if not text or not text.strip():
        raise ParseError("empty expression", 1, 1)
    return ObservableExpr(_Parser(text, n_dof).parse(), n_dof)


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

def _fmt_const(value: float) -> str:
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def to_string(node: Node | ObservableExpr) -> str:
    """Render with the minimal parentheses needed to re-parse to the same tree."""
    if isinstance(node, ObservableExpr):
        node = node.root
    return _print(node)


def _is_atom(node: Node) -> bool:
    if isinstance(node, Const):
        return node.value >= 0 and math.isfinite(node.value)
    return isinstance(node, (Var, Sin, Cos, Sqrt, Atan2))


def _print(node: Node) -> str:
    if isinstance(node, Const):
        s = _fmt_const(node.value)
        return s if node.value >= 0 else f"({s})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = _print(node.operand)
        if isinstance(node.operand, (Add, Sub, Mul, Div)):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, (Add, Sub)):
        op = "+" if isinstance(node, Add) else "-"
        right = _print(node.right)
        if isinstance(node.right, (Add, Sub)):
            right = f"({right})"
        return f"{_print(node.left)} {op} {right}"
    if isinstance(node, (Mul, Div)):
        op = "*" if isinstance(node, Mul) else "/"
        left, right = _print(node.left), _print(node.right)
        if isinstance(node.left, (Add, Sub)):
            left = f"({left})"
        if isinstance(node.right, (Add, Sub, Mul, Div)):
            right = f"({right})"
        return f"{left}{op}{right}"
    if isinstance(node, Pow):
        base = _print(node.base)
        if not _is_atom(node.base):
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, Sin):
        return f"sin({_print(node.arg)})"
    if isinstance(node, Cos):
        return f"cos({_print(node.arg)})"
    if isinstance(node, Sqrt):
        return f"sqrt({_print(node.arg)})"
    if isinstance(node, Atan2):
        return f"atan2({_print(node.y)}, {_print(node.x)})"
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Simplifying constructors (local rewrites only)
# ---------------------------------------------------------------------------

def _is_const(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def _neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def _add(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return Sub(a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return _neg(b)
    if _is_const(b, -1.0):
        return _neg(a)
    if _is_const(b):
        a, b = b, a
    if _is_const(a) and isinstance(b, Mul) and _is_const(b.left):
        return _mul(Const(a.value * b.left.value), b.right)
    return Mul(a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b) and b.value != 0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(b) and isinstance(a, Mul) and _is_const(a.left) and b.value != 0:
        return _mul(Const(a.left.value / b.value), a.right)
    return Div(a, b)


def _pow(a: Node, n: int) -> Node:
    if n == 0:
        return Const(1.0)
    if n == 1:
        return a
    if _is_const(a) and (a.value != 0 or n > 0):
        return Const(a.value ** n)
    return Pow(a, n)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def _resolve_var(var, n_dof: int) -> Var:
    if isinstance(var, Var):
        v = var
    elif isinstance(var, str):
        m = _VAR_RE.match(var.strip())
        if m is None:
            raise ValueError(f"not a variable name: {var!r}")
        v = Var("p" if m.group(1) == "p" else "q", int(m.group(2)))
    elif isinstance(var, (int, np.integer)):
        if not 0 <= var < 2 * n_dof:
            raise ValueError(f"coordinate position {var} out of range for n_dof={n_dof}")
        v = Var("p" if var % 2 else "q", int(var) // 2 + 1)
    else:
        raise TypeError(f"cannot interpret {var!r} as a variable")
    if not 1 <= v.index <= n_dof:
        raise ValueError(f"variable {v.name} out of range for n_dof={n_dof}")
    return v


def _d(node: Node, v: Var) -> Node:
    if isinstance(node, Const):
        return Const(0.0)
    if isinstance(node, Var):
        return Const(1.0 if node == v else 0.0)
    if isinstance(node, Neg):
        return _neg(_d(node.operand, v))
    if isinstance(node, Add):
        return _add(_d(node.left, v), _d(node.right, v))
    if isinstance(node, Sub):
        return _sub(_d(node.left, v), _d(node.right, v))
    if isinstance(node, Mul):
        u, w = node.left, node.right
        return _add(_mul(_d(u, v), w), _mul(u, _d(w, v)))
    if isinstance(node, Div):
        u, w = node.left, node.right
        du, dw = _d(u, v), _d(w, v)
        if _is_const(dw, 0.0):
            return _div(du, w)
        return _div(_sub(_mul(du, w), _mul(u, dw)), _pow(w, 2))
    if isinstance(node, Pow):
        n = node.exponent
        return _mul(_mul(Const(float(n)), _pow(node.base, n - 1)), _d(node.base, v))
    if isinstance(node, Sin):
        return _mul(Cos(node.arg), _d(node.arg, v))
    if isinstance(node, Cos):
        return _neg(_mul(Sin(node.arg), _d(node.arg, v)))
    if isinstance(node, Sqrt):
        return _div(_d(node.arg, v), _mul(Const(2.0), node))
    if isinstance(node, Atan2):
        y, x = node.y, node.x
        num = _sub(_mul(x, _d(y, v)), _mul(y, _d(x, v)))
        if _is_const(num, 0.0):
            return Const(0.0)
        return _div(num, _add(_pow(x, 2), _pow(y, 2)))
    raise TypeError(f"unknown node {node!r}")


def differentiate(expr: ObservableExpr, var) -> ObservableExpr:
    """Exact partial derivative of ``expr`` with respect to ``var``.

    ``var`` may be a name (``"q1"``, ``"x1"``, ``"p2"``), a :class:`Var`
    or a position in the canonical coordinate vector.
    """
    v = _resolve_var(var, expr.n_dof)
    return ObservableExpr(_d(expr.root, v), expr.n_dof)


def gradient(expr: ObservableExpr) -> list[ObservableExpr]:
    """Partial derivatives in canonical order ``(d/dq1, d/dp1, ..., d/dpn)``."""
    return [differentiate(expr, i) for i in range(expr.dim)]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _eval(node: Node, x) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return x[node.position]
    if isinstance(node, Neg):
        return -_eval(node.operand, x)
    if isinstance(node, Add):
        return _eval(node.left, x) + _eval(node.right, x)
    if isinstance(node, Sub):
        return _eval(node.left, x) - _eval(node.right, x)
    if isinstance(node, Mul):
        return _eval(node.left, x) * _eval(node.right, x)
    if isinstance(node, Div):
        den = _eval(node.right, x)
        if den == 0.0:
            raise EvaluationDomainError("division by zero", node)
        return _eval(node.left, x) / den
    if isinstance(node, Pow):
        base = _eval(node.base, x)
        if base == 0.0 and node.exponent < 0:
            raise EvaluationDomainError("division by zero", node)
        return base ** node.exponent
    if isinstance(node, Sin):
        return math.sin(_eval(node.arg, x))
    if isinstance(node, Cos):
        return math.cos(_eval(node.arg, x))
    if isinstance(node, Sqrt):
        arg = _eval(node.arg, x)
        if arg < 0.0:
            raise EvaluationDomainError("square root of negative number", node)
        return math.sqrt(arg)
    if isinstance(node, Atan2):
        return math.atan2(_eval(node.y, x), _eval(node.x, x))
    raise TypeError(f"unknown node {node!r}")


def _check_point(expr: ObservableExpr, point) -> list[float]:
    coords = [float(c) for c in np.asarray(point, dtype=float).ravel()]
    if len(coords) != expr.dim:
        raise ValueError(f"point has dimension {len(coords)}, expected {expr.dim}")
    return coords


def evaluate(expr: ObservableExpr, point) -> float:
    """Evaluate at one phase point (canonical ordering) in double precision."""
    return float(_eval(expr.root, _check_point(expr, point)))


def _eval_batch(node: Node, X: np.ndarray):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return X[..., node.position]
    if isinstance(node, Neg):
        return -_eval_batch(node.operand, X)
    if isinstance(node, Add):
        return _eval_batch(node.left, X) + _eval_batch(node.right, X)
    if isinstance(node, Sub):
        return _eval_batch(node.left, X) - _eval_batch(node.right, X)
    if isinstance(node, Mul):
        return _eval_batch(node.left, X) * _eval_batch(node.right, X)
    if isinstance(node, Div):
        den = _eval_batch(node.right, X)
        if np.any(np.asarray(den) == 0.0):
            raise EvaluationDomainError("division by zero", node)
        return _eval_batch(node.left, X) / den
    if isinstance(node, Pow):
        base = _eval_batch(node.base, X)
        if node.exponent < 0:
            if np.any(np.asarray(base) == 0.0):
                raise EvaluationDomainError("division by zero", node)
            return 1.0 / base ** (-node.exponent)
        return base ** node.exponent
    if isinstance(node, Sin):
        return np.sin(_eval_batch(node.arg, X))
    if isinstance(node, Cos):
        return np.cos(_eval_batch(node.arg, X))
    if isinstance(node, Sqrt):
        arg = _eval_batch(node.arg, X)
        if np.any(np.asarray(arg) < 0.0):
            raise EvaluationDomainError("square root of negative number", node)
        return np.sqrt(arg)
    if isinstance(node, Atan2):
        return np.arctan2(_eval_batch(node.y, X), _eval_batch(node.x, X))
    raise TypeError(f"unknown node {node!r}")


def evaluate_batch(expr: ObservableExpr, X) -> np.ndarray:
    """Evaluate over an array of points with shape ``(..., 2 * n_dof)``."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != expr.dim:
        raise ValueError(f"points have dimension {X.shape[-1]}, expected {expr.dim}")
    out = _eval_batch(expr.root, X)
    return np.broadcast_to(np.asarray(out, dtype=float), X.shape[:-1]).copy()

