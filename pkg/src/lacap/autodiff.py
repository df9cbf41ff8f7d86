"""Reverse-mode automatic differentiation on dense numpy tensors.

A ``Tape`` records ops define-by-run; nodes are appended in execution order,
which is already a topological order, so ``backward`` is a single reverse
sweep that visits every node exactly once. Tensors are plain numpy arrays
(float64 by default), treated as immutable once wrapped in a node.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

OP_KINDS = (
    "matmul", "add", "mul", "tanh", "sigmoid", "concat", "slice",
    "sum", "scale", "relu-hinge", "dot", "l2norm",
    # extensions beyond the minimum kind set, gradient-checked like the rest
    "sub", "recip", "rows", "stack", "softmax_xent", "const", "param",
)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; nothing propagates silently."""


class Node:
    """One tape entry: an output value plus the closure that backpropagates it."""

    __slots__ = ("value", "grad", "kind", "_inputs", "_bwd")

    def __init__(self, value, kind, inputs=(), bwd=None):
        self.value = value
        self.grad = None
        self.kind = kind
        self._inputs = inputs
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Append-only op recorder with a deterministic reverse sweep.

    Single-threaded by contract; distinct tapes may live on distinct threads.
    Parameters bound via ``param`` get their gradients accumulated back into
    the owning store when ``backward`` finishes.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = dtype
        self._nodes = []
        self._param_binds = []

    # ---- leaves ------------------------------------------------------

    def const(self, value):
        """Wrap a constant (no gradient requested) as a leaf node."""
        if isinstance(value, Node):
            return value
        arr = np.asarray(value, dtype=self.dtype)
        node = Node(arr, "const")
        self._nodes.append(node)
        return node

    def param(self, store, name):
        """Bind a store entry as a leaf; backward() flushes its gradient."""
        entry = store.entry(name)
        node = Node(entry.value, "param")
        self._nodes.append(node)
        self._param_binds.append((node, entry))
        return node

    # ---- core machinery ----------------------------------------------

    def _record(self, kind, value, inputs, bwd):
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced a non-finite value")
        node = Node(value, kind, inputs, bwd)
        self._nodes.append(node)
        return node

    def backward(self, root):
        """Seed d(root)/d(root)=1 and sweep the tape in reverse.

        Deterministic: identical tapes give bit-identical gradients.
        """
        if root.value.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {root.value.shape}")
        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)
        for node, entry in self._param_binds:
            if node.grad is not None:
                entry.grad += node.grad

    # ---- ops -----------------------------------------------------------

    def add(self, a, b):
        a, b = self.const(a), self.const(b)
        try:
            out = a.value + b.value
        except ValueError:
            raise ShapeError(f"add: {a.shape} + {b.shape}") from None

        def bwd(g):
            a.add_grad(_reduce_to_shape(g, a.shape))
            b.add_grad(_reduce_to_shape(g, b.shape))

        return self._record("add", out, (a, b), bwd)

    def sub(self, a, b):
        a, b = self.const(a), self.const(b)
        try:
            out = a.value - b.value
        except ValueError:
            raise ShapeError(f"sub: {a.shape} - {b.shape}") from None

        def bwd(g):
            a.add_grad(_reduce_to_shape(g, a.shape))
            b.add_grad(-_reduce_to_shape(g, b.shape))

        return self._record("sub", out, (a, b), bwd)

    def mul(self, a, b):
        a, b = self.const(a), self.const(b)
        try:
            out = a.value * b.value
        except ValueError:
            raise ShapeError(f"mul: {a.shape} * {b.shape}") from None

        def bwd(g):
            a.add_grad(_reduce_to_shape(g * b.value, a.shape))
            b.add_grad(_reduce_to_shape(g * a.value, b.shape))

        return self._record("mul", out, (a, b), bwd)

    def scale(self, a, s):
        """Multiply by a python scalar (constant, no gradient to s)."""
        a = self.const(a)
        s = float(s)

        def bwd(g):
            a.add_grad(g * s)

        return self._record("scale", a.value * s, (a,), bwd)

    def matmul(self, a, b):
        a, b = self.const(a), self.const(b)
        av, bv = a.value, b.value
        if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        out = av @ bv

        def bwd(g):
            if av.ndim == 2 and bv.ndim == 2:
                a.add_grad(g @ bv.T)
                b.add_grad(av.T @ g)
            elif av.ndim == 1 and bv.ndim == 2:
                a.add_grad(bv @ g)
                b.add_grad(np.outer(av, g))
            elif av.ndim == 2 and bv.ndim == 1:
                a.add_grad(np.outer(g, bv))
                b.add_grad(av.T @ g)
            else:  # 1-d @ 1-d; kept for completeness, dot() is the usual path
                a.add_grad(g * bv)
                b.add_grad(g * av)

        return self._record("matmul", out, (a, b), bwd)

    def dot(self, a, b):
        a, b = self.const(a), self.const(b)
        if a.value.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: {a.shape} . {b.shape}")
        out = np.asarray(a.value @ b.value)

        def bwd(g):
            a.add_grad(g * b.value)
            b.add_grad(g * a.value)

        return self._record("dot", out, (a, b), bwd)

    def tanh(self, a):
        a = self.const(a)
        out = np.tanh(a.value)

        def bwd(g):
            a.add_grad(g * (1.0 - out * out))

        return self._record("tanh", out, (a,), bwd)

    def sigmoid(self, a):
        a = self.const(a)
        # stable form: never exponentiates a large positive argument
        v = a.value
        out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                       np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

        def bwd(g):
            a.add_grad(g * out * (1.0 - out))

        return self._record("sigmoid", out, (a,), bwd)

    def relu(self, a):
        """Hinge max(0, x); subgradient 0 at the kink."""
        a = self.const(a)
        out = np.maximum(a.value, 0.0)

        def bwd(g):
            a.add_grad(g * (a.value > 0.0))

        return self._record("relu-hinge", out, (a,), bwd)

    def recip(self, a):
        a = self.const(a)
        with np.errstate(divide="raise"):
            try:
                out = 1.0 / a.value
            except FloatingPointError:
                raise NonFiniteError("recip of zero") from None

        def bwd(g):
            a.add_grad(-g * out * out)

        return self._record("recip", out, (a,), bwd)

    def concat(self, parts):
        """Concatenate along the last axis."""
        parts = [self.const(p) for p in parts]
        ranks = {p.value.ndim for p in parts}
        if len(ranks) != 1:
            raise ShapeError(
                f"concat: mixed ranks {[p.shape for p in parts]}")
        out = np.concatenate([p.value for p in parts], axis=-1)
        widths = [p.shape[-1] for p in parts]

        def bwd(g):
            off = 0
            for p, w in zip(parts, widths):
                p.add_grad(g[..., off:off + w])
                off += w

        return self._record("concat", out, tuple(parts), bwd)

    def slice(self, a, start, stop):
        """Contiguous slice along the last axis."""
        a = self.const(a)
        if not (0 <= start <= stop <= a.shape[-1]):
            raise ShapeError(f"slice [{start}:{stop}] of {a.shape}")
        out = a.value[..., start:stop].copy()

        def bwd(g):
            full = np.zeros_like(a.value)
            full[..., start:stop] = g
            a.add_grad(full)

        return self._record("slice", out, (a,), bwd)

    def rows(self, a, idx):
        """Gather rows of a matrix (embedding-table lookup)."""
        a = self.const(a)
        if a.value.ndim != 2:
            raise ShapeError(f"rows on non-matrix {a.shape}")
        scalar = np.isscalar(idx)
        idx_arr = np.asarray([idx] if scalar else idx, dtype=np.intp)
        if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= a.shape[0]):
            raise ShapeError(f"rows: index out of range for {a.shape}")
        out = a.value[idx_arr[0]].copy() if scalar else a.value[idx_arr].copy()

        def bwd(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx_arr, g)
            a.add_grad(full)

        return self._record("rows", out, (a,), bwd)

    def stack(self, vectors):
        """Stack rank-1 nodes into the rows of a matrix."""
        vectors = [self.const(v) for v in vectors]
        if any(v.value.ndim != 1 for v in vectors):
            raise ShapeError(
                f"stack wants vectors, got {[v.shape for v in vectors]}")
        out = np.stack([v.value for v in vectors])

        def bwd(g):
            for i, v in enumerate(vectors):
                v.add_grad(g[i])

        return self._record("stack", out, tuple(vectors), bwd)

    def sum(self, a):
        a = self.const(a)
        out = np.asarray(a.value.sum())

        def bwd(g):
            a.add_grad(np.broadcast_to(g, a.shape).copy())

        return self._record("sum", out, (a,), bwd)

    def l2norm(self, a):
        a = self.const(a)
        out = np.asarray(np.sqrt((a.value * a.value).sum()))

        def bwd(g):
            if out == 0.0:
                raise NonFiniteError("l2norm gradient at zero vector")
            a.add_grad(g * a.value / out)

        return self._record("l2norm", out, (a,), bwd)

    def softmax_xent(self, logits, target):
        """Cross-entropy against one target id; returns (loss, probs array).

        Max-subtraction keeps the exponentials bounded, so huge logits do
        not overflow. probs is a plain array (already normalized), handy
        for sampling without touching the tape.
        """
        logits = self.const(logits)
        if logits.value.ndim != 1:
            raise ShapeError(f"softmax_xent wants rank-1 logits, got {logits.shape}")
        n = logits.shape[0]
        if not (0 <= target < n):
            raise ShapeError(f"softmax_xent target {target} outside vocab of {n}")
        z = logits.value
        m = z.max()
        ez = np.exp(z - m)
        total = ez.sum()
        probs = ez / total
        loss = np.asarray(np.log(total) + m - z[target])

        def bwd(g):
            d = probs.copy()
            d[target] -= 1.0
            logits.add_grad(g * d)

        return self._record("softmax_xent", loss, (logits,), bwd), probs

    def softmax_xent_rows(self, logits, targets, weights=None):
        """Weighted sum of per-row cross-entropies for a (K, V) logits matrix.

        Returns (scalar loss node, per-row probs array). Row weights scale
        both the loss and the gradient; the batched training loops use them
        to carry per-step advantages.
        """
        logits = self.const(logits)
        if logits.value.ndim != 2:
            raise ShapeError(f"softmax_xent_rows wants a matrix, got {logits.shape}")
        k, n = logits.shape
        targets = np.asarray(targets, dtype=np.intp)
        if targets.shape != (k,):
            raise ShapeError(f"targets shape {targets.shape}, expected ({k},)")
        if targets.size and (targets.min() < 0 or targets.max() >= n):
            raise ShapeError("softmax_xent_rows target outside vocab")
        w = np.ones(k) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (k,):
            raise ShapeError(f"weights shape {w.shape}, expected ({k},)")
        z = logits.value
        m = z.max(axis=1, keepdims=True)
        ez = np.exp(z - m)
        total = ez.sum(axis=1, keepdims=True)
        probs = ez / total
        rows_loss = np.log(total[:, 0]) + m[:, 0] - z[np.arange(k), targets]
        loss = np.asarray((w * rows_loss).sum())

        def bwd(g):
            d = probs.copy()
            d[np.arange(k), targets] -= 1.0
            logits.add_grad(g * w[:, None] * d)

        return self._record("softmax_xent", loss, (logits,), bwd), probs

    # ---- composites ----------------------------------------------------

    def normalize(self, a):
        """x / ||x||2 with gradient through the norm."""
        return self.mul(a, self.recip(self.l2norm(a)))


def forward_op(tape, kind, *inputs, **kwargs):
    """Dispatch an op by kind string; shape errors name the offending shapes."""
    table = {
        "matmul": tape.matmul, "add": tape.add, "mul": tape.mul,
        "tanh": tape.tanh, "sigmoid": tape.sigmoid, "concat": tape.concat,
        "slice": tape.slice, "sum": tape.sum, "scale": tape.scale,
        "relu-hinge": tape.relu, "dot": tape.dot, "l2norm": tape.l2norm,
        "sub": tape.sub, "recip": tape.recip, "rows": tape.rows,
        "stack": tape.stack,
    }
    if kind not in table:
        raise ValueError(f"unknown op kind {kind!r}")
    return table[kind](*inputs, **kwargs)
