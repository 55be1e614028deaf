"""Dense array math and a small reverse-mode autodiff tape.

The tape is define-then-run: a graph of primitive nodes is recorded once
(``Tape.input``, ``Tape.affine``, ...) and then evaluated any number of times
against fresh bindings.  Values are float64 numpy arrays; every node works on
batches, and affine weights may carry a leading member axis so that a stack
of identical networks evaluates in a single pass.

Only a fixed primitive set is supported::

    affine, sigmoid, tanh, relu, concat, slice, mul (Hadamard), add, sub,
    scale, lincomb, sum, mean, sq_error

Example
-------
>>> t = Tape()
>>> x = t.input("x")
>>> t.set_output(t.sum(t.mul(x, x)))
>>> float(t.eval({"x": np.array([3.0])}))
9.0
>>> t.grad(["x"])["x"]
array([6.])
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "TapeError",
    "Tape",
    "tape_eval",
    "tape_grad",
    "finite_difference",
    "sigmoid",
    "unbroadcast",
]


class TapeError(ValueError):
    """Raised for malformed graphs, bad bindings and invalid gradient requests."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class Tape:
    """Recorded computation graph with value and adjoint slots.

    Node handles are plain integers.  A tape instance must not be evaluated by
    two callers at once; parameters passed in bindings are never modified.
    """

    def __init__(self) -> None:
        self._ops: List[tuple] = []  # (kind, args, attr, label)
        self._inputs: Dict[str, int] = {}
        self.output: Optional[int] = None
        self.values: List[Optional[np.ndarray]] = []
        self.adjoints: List[Optional[np.ndarray]] = []
        self._evaluated = False

    # ------------------------------------------------------------------
    # graph construction
    def _push(self, kind: str, args: Sequence[int] = (), attr=None, label: Optional[str] = None) -> int:
        for a in args:
            if not 0 <= a < len(self._ops):
                raise TapeError(f"{kind}: argument {a} does not refer to an earlier node")
        self._ops.append((kind, tuple(args), attr, label))
        return len(self._ops) - 1

    def input(self, name: str) -> int:
        if name in self._inputs:
            raise TapeError(f"duplicate input name {name!r}")
        node = self._push("input", (), name, name)
        self._inputs[name] = node
        return node

    def affine(self, x: int, w: int, b: Optional[int] = None, label: Optional[str] = None) -> int:
        args = (x, w) if b is None else (x, w, b)
        return self._push("affine", args, None, label)

    def sigmoid(self, x: int, label: Optional[str] = None) -> int:
        return self._push("sigmoid", (x,), None, label)

    def tanh(self, x: int, label: Optional[str] = None) -> int:
        return self._push("tanh", (x,), None, label)

    def relu(self, x: int, label: Optional[str] = None) -> int:
        return self._push("relu", (x,), None, label)

    def concat(self, xs: Sequence[int], label: Optional[str] = None) -> int:
        return self._push("concat", tuple(xs), None, label)

    def slice(self, x: int, start: int, stop: int, label: Optional[str] = None) -> int:
        """Columns ``start:stop`` of the last axis."""
        return self._push("slice", (x,), (start, stop), label)

    def mul(self, x: int, y: int, label: Optional[str] = None) -> int:
        return self._push("mul", (x, y), None, label)

    def add(self, x: int, y: int, label: Optional[str] = None) -> int:
        return self._push("add", (x, y), None, label)

    def sub(self, x: int, y: int, label: Optional[str] = None) -> int:
        return self._push("sub", (x, y), None, label)

    def scale(self, x: int, c: float, label: Optional[str] = None) -> int:
        return self._push("scale", (x,), float(c), label)

    def lincomb(self, terms: Sequence[tuple], label: Optional[str] = None) -> int:
        """Sum of ``c * node`` over ``terms = [(c, node), ...]``."""
        coeffs = tuple(float(c) for c, _ in terms)
        return self._push("lincomb", tuple(n for _, n in terms), coeffs, label)

    def sum(self, x: int, label: Optional[str] = None) -> int:
        return self._push("sum", (x,), None, label)

    def mean(self, x: int, label: Optional[str] = None) -> int:
        return self._push("mean", (x,), None, label)

    def sq_error(self, pred: int, target: int, label: Optional[str] = None) -> int:
        """Mean squared error between two nodes of equal shape."""
        return self._push("sq_error", (pred, target), None, label)

    def set_output(self, node: int) -> None:
        if not 0 <= node < len(self._ops):
            raise TapeError(f"output node {node} does not exist")
        self.output = node

    # ------------------------------------------------------------------
    # introspection
    @property
    def input_names(self) -> List[str]:
        return list(self._inputs)

    def node(self, name_or_label: str) -> int:
        """Look up a node by input name or construction label."""
        if name_or_label in self._inputs:
            return self._inputs[name_or_label]
        for i, (_, _, _, label) in enumerate(self._ops):
            if label == name_or_label:
                return i
        raise TapeError(f"no node named {name_or_label!r}")

    def ops(self) -> List[tuple]:
        return list(self._ops)

    def ancestors(self, node: int) -> set:
        """All node ids that ``node`` reads, transitively (including itself)."""
        seen = {node}
        stack = [node]
        while stack:
            for a in self._ops[stack.pop()][1]:
                if a not in seen:
                    seen.add(a)
                    stack.append(a)
        return seen

    def depends_on(self, node: int, input_name: str) -> bool:
        return self._inputs[input_name] in self.ancestors(node)

    def __len__(self) -> int:
        return len(self._ops)

    # ------------------------------------------------------------------
    # forward
    def eval(self, bindings: Mapping[str, np.ndarray], output: Optional[int] = None) -> np.ndarray:
        """Run the forward pass; returns the value of the output node."""
        missing = [n for n in self._inputs if n not in bindings]
        if missing:
            raise TapeError(f"unbound inputs: {missing}")
        out = self.output if output is None else output
        if out is None:
            raise TapeError("tape has no output node")
        vals: List[Optional[np.ndarray]] = [None] * len(self._ops)
        for i, (kind, args, attr, label) in enumerate(self._ops):
            try:
                if kind == "input":
                    vals[i] = np.asarray(bindings[attr], dtype=np.float64)
                else:
                    vals[i] = _FORWARD[kind](vals, args, attr)
            except TapeError:
                raise
            except ValueError as exc:
                shapes = [vals[a].shape for a in args]
                raise TapeError(
                    f"node {i} ({kind}{', ' + label if label else ''}): bad operand shapes {shapes}: {exc}"
                ) from None
        self.values = vals
        self._evaluated = True
        return vals[out]

    # ------------------------------------------------------------------
    # backward
    def grad(
        self,
        wrt: Iterable[str],
        seed: Optional[np.ndarray] = None,
        output: Optional[int] = None,
    ) -> Dict[str, np.ndarray]:
        """Reverse pass from the output node.

        Without ``seed`` the output must be a scalar.  With ``seed`` the
        result is the vector-Jacobian product ``seed^T J``.
        """
        if not self._evaluated:
            raise TapeError("grad called before eval")
        wrt = list(wrt)
        unknown = [n for n in wrt if n not in self._inputs]
        if unknown:
            raise TapeError(f"unknown gradient targets: {unknown}")
        out = self.output if output is None else output
        vals = self.values
        if seed is None:
            if vals[out].size != 1:
                raise TapeError(f"output has shape {vals[out].shape}; a scalar is required without a seed")
            seed = np.ones_like(vals[out])
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), vals[out].shape).copy()

        needed = set()
        for name in wrt:
            needed.add(self._inputs[name])
        # propagate "needed" forward so nodes not leading to a target are skipped
        live = [False] * len(self._ops)
        for i, (kind, args, _, _) in enumerate(self._ops):
            live[i] = i in needed or any(live[a] for a in args)
        adj: List[Optional[np.ndarray]] = [None] * len(self._ops)
        adj[out] = seed
        for i in range(out, -1, -1):
            g = adj[i]
            kind, args, attr, _ = self._ops[i]
            if g is None or kind == "input" or not live[i]:
                continue
            if kind in _ELEMENTWISE:
                contribs = (_ELEMENTWISE[kind](vals[i], g),)
            else:
                contribs = _BACKWARD[kind](vals, args, attr, g, live)
            for a, ga in zip(args, contribs):
                if ga is None or not live[a]:
                    continue
                adj[a] = ga if adj[a] is None else adj[a] + ga
        self.adjoints = adj
        result = {}
        for name in wrt:
            node = self._inputs[name]
            g = adj[node]
            result[name] = np.zeros_like(vals[node]) if g is None else unbroadcast(g, vals[node].shape)
        return result


# ----------------------------------------------------------------------
# primitive rules
def _f_affine(v, args, attr):
    x, w = v[args[0]], v[args[1]]
    if x.shape[-1] != w.shape[-2]:
        raise TapeError(f"affine: input width {x.shape[-1]} does not match weight rows {w.shape[-2]}")
    y = np.matmul(x, w)
    if len(args) == 3:
        y = y + v[args[2]]
    return y


def _b_affine(v, args, attr, g, live):
    x, w = v[args[0]], v[args[1]]
    gx = unbroadcast(np.matmul(g, _swap(w)), x.shape) if live[args[0]] else None
    gw = None
    if live[args[1]]:
        if x.ndim == 2 and g.ndim == 2:
            gw = x.T @ g
        else:
            gw = unbroadcast(np.matmul(_swap(x), g), w.shape)
    out = [gx, gw]
    if len(args) == 3:
        out.append(unbroadcast(g, v[args[2]].shape) if live[args[2]] else None)
    return out


def _f_concat(v, args, attr):
    parts = [v[a] for a in args]
    lead = np.broadcast_shapes(*[p.shape[:-1] for p in parts])
    parts = [p if p.shape[:-1] == lead else np.broadcast_to(p, lead + p.shape[-1:]) for p in parts]
    return np.concatenate(parts, axis=-1)


def _b_concat(v, args, attr, g, live):
    out, start = [], 0
    for a in args:
        width = v[a].shape[-1]
        out.append(unbroadcast(g[..., start:start + width], v[a].shape) if live[a] else None)
        start += width
    return out


def _b_slice(v, args, attr, g, live):
    x = v[args[0]]
    full = np.zeros(g.shape[:-1] + (x.shape[-1],))
    full[..., attr[0]:attr[1]] = g
    return [unbroadcast(full, x.shape)]


def _f_sq_error(v, args, attr):
    p, t = v[args[0]], v[args[1]]
    if p.shape != t.shape:
        raise TapeError(f"sq_error: shapes {p.shape} and {t.shape} differ")
    return np.asarray(np.mean((p - t) ** 2))


def _b_sq_error(v, args, attr, g, live):
    p, t = v[args[0]], v[args[1]]
    d = (2.0 / p.size) * (p - t) * g
    return [d, -d]


def _f_lincomb(v, args, attr):
    out = attr[0] * v[args[0]]
    for c, a in zip(attr[1:], args[1:]):
        out = out + c * v[a]
    return out


_FORWARD: Dict[str, Callable] = {
    "affine": _f_affine,
    "sigmoid": lambda v, a, _: sigmoid(v[a[0]]),
    "tanh": lambda v, a, _: np.tanh(v[a[0]]),
    "relu": lambda v, a, _: np.maximum(v[a[0]], 0.0),
    "concat": _f_concat,
    "slice": lambda v, a, s: v[a[0]][..., s[0]:s[1]],
    "mul": lambda v, a, _: v[a[0]] * v[a[1]],
    "add": lambda v, a, _: v[a[0]] + v[a[1]],
    "sub": lambda v, a, _: v[a[0]] - v[a[1]],
    "scale": lambda v, a, c: c * v[a[0]],
    "lincomb": _f_lincomb,
    "sum": lambda v, a, _: np.asarray(np.sum(v[a[0]])),
    "mean": lambda v, a, _: np.asarray(np.mean(v[a[0]])),
    "sq_error": _f_sq_error,
}


_BACKWARD: Dict[str, Callable] = {
    "affine": _b_affine,
    "concat": _b_concat,
    "slice": _b_slice,
    "mul": lambda v, a, _, g, live: [
        unbroadcast(g * v[a[1]], v[a[0]].shape) if live[a[0]] else None,
        unbroadcast(g * v[a[0]], v[a[1]].shape) if live[a[1]] else None,
    ],
    "add": lambda v, a, _, g, live: [unbroadcast(g, v[a[0]].shape), unbroadcast(g, v[a[1]].shape)],
    "sub": lambda v, a, _, g, live: [unbroadcast(g, v[a[0]].shape), unbroadcast(-g, v[a[1]].shape)],
    "scale": lambda v, a, c, g, live: [c * g],
    "lincomb": lambda v, a, cs, g, live: [unbroadcast(c * g, v[n].shape) for c, n in zip(cs, a)],
    "sum": lambda v, a, _, g, live: [np.broadcast_to(g, v[a[0]].shape)],
    "mean": lambda v, a, _, g, live: [np.broadcast_to(g / v[a[0]].size, v[a[0]].shape)],
    "sq_error": _b_sq_error,
}


# elementwise rules are written in terms of the node's own output y
_ELEMENTWISE: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "sigmoid": lambda y, g: g * y * (1.0 - y),
    "tanh": lambda y, g: g * (1.0 - y * y),
    "relu": lambda y, g: g * (y > 0.0),
}


# ----------------------------------------------------------------------
# functional front-end
def tape_eval(tape: Tape, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    return tape.eval(bindings)


def tape_grad(tape: Tape, wrt: Iterable[str]) -> Dict[str, np.ndarray]:
    return tape.grad(wrt)


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Raises ``ValueError`` if ``h <= 0`` or ``f`` returns a non-finite value.
    """
    if not h > 0:
        raise ValueError("finite_difference: step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_difference: non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
