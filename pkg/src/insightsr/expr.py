"""Equation-skeleton grammar: parsing, rendering and batch evaluation.

Skeletons are small arithmetic expressions over named variables, numeric
literals and indexed learnable parameters written as ``params[i]``::

    params[0]*sin(x) - params[1]*x*v

The operator set is closed. Anything outside it is a :class:`ParseError`,
and numerical trouble during evaluation (log of a non-positive number,
overflow, ...) is an :class:`EvalError`.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

UNARY_OPS = ("neg", "sin", "cos", "tan", "tanh", "exp", "log", "sqrt", "abs")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

BINARY_SYMBOLS = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "**"}
FUNCTION_NAMES = frozenset(op for op in UNARY_OPS if op != "neg")
NAMED_CONSTANTS = {"pi": math.pi}
RESERVED_NAMES = frozenset(FUNCTION_NAMES | set(NAMED_CONSTANTS) | {"params", "neg"})
MODULE_PREFIXES = ("np.", "numpy.", "math.")

DEFAULT_MAX_DEPTH = 20
DEFAULT_MAX_NODES = 200
DIV_TOLERANCE = 1e-12


class ExpressionError(Exception):
    """Base class for everything that makes a candidate expression unusable."""


class ParseError(ExpressionError):
    KINDS = ("syntax", "unknown_symbol", "arity", "depth_exceeded")

    def __init__(self, kind: str, position: int, message: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown parse error kind {kind!r}")
        self.kind = kind
        self.position = position
        self.message = message
        super().__init__(f"{kind} at {position}: {message}")


class EvalError(ExpressionError):
    KINDS = ("domain", "overflow", "non_finite")

    def __init__(self, kind: str, row: int, op: str, message: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown eval error kind {kind!r}")
        self.kind = kind
        self.row = row
        self.op = op
        self.message = message or f"{kind} error in {op}"
        super().__init__(f"{kind} in {op} at row {row}: {self.message}")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Constant:
    # Negative literals are written as neg(Constant), which keeps render/parse
    # a bijection.
    value: float

    def __post_init__(self):
        value = float(self.value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"constants must be finite and non-negative, got {self.value!r}")
        object.__setattr__(self, "value", value + 0.0)


@dataclass(frozen=True)
class Param:
    index: int

    def __post_init__(self):
        if not isinstance(self.index, int) or self.index < 0:
            raise ValueError(f"parameter index must be a non-negative int, got {self.index!r}")


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Node"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


Node = Union[Variable, Constant, Param, Unary, Binary]


def iter_nodes(node: Node) -> Iterator[Node]:
    """Pre-order traversal."""
    stack = [node]
    while stack:
        current = stack.pop()
        yield current
        if isinstance(current, Unary):
            stack.append(current.child)
        elif isinstance(current, Binary):
            stack.append(current.right)
            stack.append(current.left)


def depth(node: Node) -> int:
    if isinstance(node, Unary):
        return 1 + depth(node.child)
    if isinstance(node, Binary):
        return 1 + max(depth(node.left), depth(node.right))
    return 1


@dataclass(frozen=True)
class Expression:
    root: Node
    param_count: int
    variables_used: tuple[str, ...]

    @classmethod
    def from_root(cls, root: Node) -> "Expression":
        max_index = -1
        names: list[str] = []
        for node in iter_nodes(root):
            if isinstance(node, Param):
                max_index = max(max_index, node.index)
            elif isinstance(node, Variable) and node.name not in names:
                names.append(node.name)
        return cls(root=root, param_count=max_index + 1, variables_used=tuple(names))

    def __str__(self) -> str:
        return render(self)


# ---------------------------------------------------------------------------
# Rendering


def _render_node(node: Node) -> str:
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, Constant):
        return repr(node.value)
    if isinstance(node, Param):
        return f"params[{node.index}]"
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{_render_node(node.child)})"
        return f"{node.op}({_render_node(node.child)})"
    return f"({_render_node(node.left)} {BINARY_SYMBOLS[node.op]} {_render_node(node.right)})"


def render(e: Union[Expression, Node]) -> str:
    """Canonical, fully parenthesised text. ``parse(render(e)) == e``."""
    root = e.root if isinstance(e, Expression) else e
    return _render_node(root)


def complexity(e: Union[Expression, Node]) -> int:
    """Total number of AST nodes."""
    root = e.root if isinstance(e, Expression) else e
    return sum(1 for _ in iter_nodes(root))


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*(?:\.[A-Za-z_][A-Za-z_0-9]*)?)
  | (?P<op>\*\*|[-+*/^()\[\],])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError("syntax", pos, f"unexpected character {source[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    # Recursive descent; precedence from loosest: + -, * /, unary -, ** (right assoc).

    def __init__(self, source: str, allowed: Sequence[str], max_depth: int):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.allowed = set(allowed)
        # Nesting bound guards the Python stack; the exact depth check runs after parsing.
        self.nesting_limit = 4 * max_depth + 16
        self.nesting = 0

    def _end_pos(self) -> int:
        return max(len(self.source) - 1, 0)

    def peek(self) -> _Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def advance(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise ParseError("syntax", self._end_pos(), "unexpected end of input")
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok is None:
            raise ParseError("syntax", self._end_pos(), f"expected {text!r} before end of input")
        if tok.text != text:
            raise ParseError("syntax", tok.pos, f"expected {text!r}, found {tok.text!r}")
        return self.advance()

    def _enter(self, pos: int) -> None:
        self.nesting += 1
        if self.nesting > self.nesting_limit:
            raise ParseError("depth_exceeded", pos, "expression nested too deeply")

    def parse(self) -> Node:
        if not self.tokens:
            raise ParseError("syntax", 0, "empty expression")
        node = self.additive()
        tok = self.peek()
        if tok is not None:
            raise ParseError("syntax", tok.pos, f"unexpected token {tok.text!r}")
        return node

    def additive(self) -> Node:
        node = self.multiplicative()
        while (tok := self.peek()) is not None and tok.text in ("+", "-"):
            self.advance()
            right = self.multiplicative()
            node = Binary("add" if tok.text == "+" else "sub", node, right)
        return node

    def multiplicative(self) -> Node:
        node = self.unary()
        while (tok := self.peek()) is not None and tok.text in ("*", "/"):
            self.advance()
            right = self.unary()
            node = Binary("mul" if tok.text == "*" else "div", node, right)
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok is not None and tok.text in ("-", "+"):
            self.advance()
            self._enter(tok.pos)
            operand = self.unary()
            self.nesting -= 1
            return Unary("neg", operand) if tok.text == "-" else operand
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        tok = self.peek()
        if tok is not None and tok.text in ("**", "^"):
            self.advance()
            self._enter(tok.pos)
            exponent = self.unary()
            self.nesting -= 1
            return Binary("pow", base, exponent)
        return base

    def primary(self) -> Node:
        tok = self.advance()
        if tok.kind == "number":
            return Constant(float(tok.text))
        if tok.text == "(":
            self._enter(tok.pos)
            node = self.additive()
            self.expect(")")
            self.nesting -= 1
            return node
        if tok.kind == "name":
            return self._name(tok)
        raise ParseError("syntax", tok.pos, f"unexpected token {tok.text!r}")

    def _name(self, tok: _Token) -> Node:
        name = tok.text
        nxt = self.peek()
        if name == "params":
            self.expect("[")
            idx = self.advance()
            if idx.kind != "number" or not idx.text.isdigit():
                raise ParseError("syntax", idx.pos, "parameter index must be a non-negative integer")
            self.expect("]")
            return Param(int(idx.text))
        if nxt is not None and nxt.text == "(":
            func = name
            for prefix in MODULE_PREFIXES:
                if func.startswith(prefix):
                    func = func[len(prefix):]
                    break
            if func not in FUNCTION_NAMES and func != "neg":
                raise ParseError("unknown_symbol", tok.pos, f"unknown function {name!r}")
            self.advance()
            self._enter(nxt.pos)
            close = self.peek()
            if close is not None and close.text == ")":
                raise ParseError("arity", tok.pos, f"{func} takes 1 argument, got 0")
            args = [self.additive()]
            while (sep := self.peek()) is not None and sep.text == ",":
                self.advance()
                args.append(self.additive())
            self.expect(")")
            self.nesting -= 1
            if len(args) != 1:
                raise ParseError("arity", tok.pos, f"{func} takes 1 argument, got {len(args)}")
            return Unary(func, args[0])
        if name in self.allowed:
            return Variable(name)
        if name in NAMED_CONSTANTS:
            return Constant(NAMED_CONSTANTS[name])
        if name in FUNCTION_NAMES:
            raise ParseError("syntax", tok.pos, f"function {name!r} must be called")
        raise ParseError("unknown_symbol", tok.pos, f"unknown identifier {name!r}")


def parse(
    source: str,
    allowed_variables: Sequence[str],
    *,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> Expression:
    """Parse ``source`` into an :class:`Expression`.

    Raises :class:`ParseError` on malformed syntax, identifiers outside
    ``allowed_variables``, functions outside the operator set, wrong arity,
    or when the tree exceeds ``max_depth`` / ``max_nodes``.
    """
    if not source or not source.strip():
        raise ParseError("syntax", 0, "empty expression")
    allowed = list(allowed_variables)
    if not allowed or len(set(allowed)) != len(allowed):
        raise ValueError("allowed_variables must be non-empty and distinct")
    clash = RESERVED_NAMES.intersection(allowed)
    if clash:
        raise ValueError(f"variable names collide with reserved words: {sorted(clash)}")
    root = _Parser(source, allowed, max_depth).parse()
    if depth(root) > max_depth:
        raise ParseError("depth_exceeded", 0, f"depth {depth(root)} exceeds {max_depth}")
    n = complexity(root)
    if n > max_nodes:
        raise ParseError("depth_exceeded", 0, f"{n} nodes exceeds {max_nodes}")
    return Expression.from_root(root)


# ---------------------------------------------------------------------------
# Evaluation


def _first_row(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _check_result(out: np.ndarray, op: str) -> np.ndarray:
    bad = ~np.isfinite(out)
    if bad.any():
        raise EvalError("overflow", _first_row(bad), op, f"{op} produced a non-finite value")
    return out


def _is_integral(a: np.ndarray) -> np.ndarray:
    return np.floor(a) == a


class _Evaluator:
    def __init__(self, params: np.ndarray, columns: dict[str, np.ndarray], n: int):
        self.params = params
        self.columns = columns
        self.n = n

    def __call__(self, node: Node) -> np.ndarray:
        if isinstance(node, Variable):
            col = self.columns[node.name]
            bad = ~np.isfinite(col)
            if bad.any():
                raise EvalError("non_finite", _first_row(bad), f"variable {node.name}")
            return col
        if isinstance(node, Constant):
            return np.full(self.n, node.value)
        if isinstance(node, Param):
            value = self.params[node.index]
            if not np.isfinite(value):
                raise EvalError("non_finite", 0, f"params[{node.index}]")
            return np.full(self.n, value)
        if isinstance(node, Unary):
            return self._unary(node.op, self(node.child))
        return self._binary(node.op, self(node.left), self(node.right))

    def _unary(self, op: str, a: np.ndarray) -> np.ndarray:
        if op == "log":
            bad = a <= 0
            if bad.any():
                raise EvalError("domain", _first_row(bad), op, "log of a non-positive value")
            return np.log(a)
        if op == "sqrt":
            bad = a < 0
            if bad.any():
                raise EvalError("domain", _first_row(bad), op, "sqrt of a negative value")
            return np.sqrt(a)
        if op == "neg":
            return -a
        func = {
            "sin": np.sin,
            "cos": np.cos,
            "tan": np.tan,
            "tanh": np.tanh,
            "exp": np.exp,
            "abs": np.abs,
        }[op]
        return _check_result(func(a), op)

    def _binary(self, op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        elif op == "mul":
            out = a * b
        elif op == "div":
            bad = np.abs(b) < DIV_TOLERANCE
            if bad.any():
                raise EvalError("domain", _first_row(bad), op, "division by (near) zero")
            out = a / b
        else:
            bad = ((a < 0) & ~_is_integral(b)) | ((a == 0) & (b < 0))
            if bad.any():
                raise EvalError("domain", _first_row(bad), op, "pow outside its real domain")
            out = np.power(a, b)
        return _check_result(out, op)


def evaluate(
    e: Expression,
    params: Sequence[float],
    inputs: np.ndarray,
    variable_order: Sequence[str],
) -> np.ndarray:
    """Evaluate ``e`` row-wise over ``inputs`` (n x d, columns in ``variable_order``)."""
    params = np.asarray(params, dtype=float).reshape(-1)
    if params.shape[0] != e.param_count:
        raise ValueError(f"expected {e.param_count} params, got {params.shape[0]}")
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    order = list(variable_order)
    if X.shape[1] != len(order):
        raise ValueError(f"inputs have {X.shape[1]} columns but {len(order)} variable names")
    missing = [v for v in e.variables_used if v not in order]
    if missing:
        raise ValueError(f"variable_order does not cover {missing}")
    columns = {name: X[:, order.index(name)] for name in e.variables_used}
    with np.errstate(all="ignore"):
        out = _Evaluator(params, columns, X.shape[0])(e.root)
    # Constant subtrees are already broadcast; copy so callers never alias input columns.
    return np.array(out, dtype=float, copy=True)
