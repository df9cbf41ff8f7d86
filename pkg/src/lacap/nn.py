"""Parameter storage, recurrent cells, MLP, and the Adam optimizer.

Cells are written against the tape API so one implementation serves both
training (gradients) and decoding (values only). Inputs may be a single
vector or a matrix of row-batched inputs sharing one hidden state.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE

INIT_RANGE = 0.08  # classical uniform init; forget gate gets +1 on top


class ParamEntry:
    __slots__ = ("value", "grad", "m", "v", "step")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0


class ParamStore:
    """Named dense tensors with gradient and Adam moment slots."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = dtype
        self._entries = {}

    def add(self, name, value):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(np.asarray(value, dtype=self.dtype))
        return self._entries[name]

    def entry(self, name):
        if name not in self._entries:
            raise KeyError(f"no parameter (or gradient slot) named {name!r}")
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self):
        for e in self._entries.values():
            e.grad[...] = 0.0

    def grad_norm(self):
        sq = 0.0
        for e in self._entries.values():
            sq += float((e.grad * e.grad).sum())
        return np.sqrt(sq)

    def num_params(self):
        return sum(e.value.size for e in self._entries.values())

    def snapshot(self):
        """Copy of all values, for isolation tests and checkpointing."""
        return {k: e.value.copy() for k, e in self._entries.items()}

    def load_values(self, arrays):
        for k, e in self._entries.items():
            if k not in arrays:
                raise KeyError(f"missing tensor {k!r}")
            if arrays[k].shape != e.value.shape:
                raise ValueError(
                    f"shape mismatch for {k!r}: {arrays[k].shape} vs {e.value.shape}")
            e.value[...] = arrays[k]


def uniform_init(store, name, shape, rng):
    return store.add(name, rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))


def adam_update(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step over every entry; gradients zeroed after."""
    for name, e in store.items():
        if not np.all(np.isfinite(e.grad)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        e.step += 1
        e.m[...] = beta1 * e.m + (1.0 - beta1) * e.grad
        e.v[...] = beta2 * e.v + (1.0 - beta2) * (e.grad * e.grad)
        m_hat = e.m / (1.0 - beta1 ** e.step)
        v_hat = e.v / (1.0 - beta2 ** e.step)
        e.value[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        e.grad[...] = 0.0


class LstmCell:
    """Single-layer LSTM; gate order (input, forget, candidate, output)."""

    def __init__(self, store, prefix, in_dim, hidden_dim, rng):
        self.prefix = prefix
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        m = hidden_dim
        uniform_init(store, f"{prefix}.wx", (in_dim, 4 * m), rng)
        uniform_init(store, f"{prefix}.wh", (m, 4 * m), rng)
        b = uniform_init(store, f"{prefix}.b", (4 * m,), rng)
        b.value[m:2 * m] += 1.0  # forget-gate bias +1

    def param_count(self):
        m, n = self.hidden_dim, self.in_dim
        return 4 * (m * n + m * m + m)

    def step(self, tape, store, x, h, c):
        """One update; x may be (n,) or (K, n) rows sharing (h, c)."""
        m = self.hidden_dim
        wx = tape.param(store, f"{self.prefix}.wx")
        wh = tape.param(store, f"{self.prefix}.wh")
        b = tape.param(store, f"{self.prefix}.b")
        gates = tape.add(tape.add(tape.matmul(x, wx), tape.matmul(h, wh)), b)
        i = tape.sigmoid(tape.slice(gates, 0, m))
        f = tape.sigmoid(tape.slice(gates, m, 2 * m))
        g = tape.tanh(tape.slice(gates, 2 * m, 3 * m))
        o = tape.sigmoid(tape.slice(gates, 3 * m, 4 * m))
        c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
        h_new = tape.mul(o, tape.tanh(c_new))
        return h_new, c_new

    def zero_state(self, tape):
        z = np.zeros(self.hidden_dim, dtype=tape.dtype)
        return tape.const(z), tape.const(z.copy())


class GruCell:
    """Single-layer GRU; h' = z*h + (1-z)*candidate, so a saturated update
    gate keeps the previous state."""

    def __init__(self, store, prefix, in_dim, hidden_dim, rng):
        self.prefix = prefix
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        m = hidden_dim
        uniform_init(store, f"{prefix}.wx", (in_dim, 3 * m), rng)
        uniform_init(store, f"{prefix}.wh", (m, 3 * m), rng)
        uniform_init(store, f"{prefix}.b", (3 * m,), rng)

    def param_count(self):
        m, n = self.hidden_dim, self.in_dim
        return 3 * (m * n + m * m + m)

    def step(self, tape, store, x, h):
        m = self.hidden_dim
        wx = tape.param(store, f"{self.prefix}.wx")
        wh = tape.param(store, f"{self.prefix}.wh")
        b = tape.param(store, f"{self.prefix}.b")
        gx = tape.add(tape.matmul(x, wx), b)
        gh = tape.matmul(h, wh)
        r = tape.sigmoid(tape.add(tape.slice(gx, 0, m), tape.slice(gh, 0, m)))
        z = tape.sigmoid(tape.add(tape.slice(gx, m, 2 * m), tape.slice(gh, m, 2 * m)))
        cand = tape.tanh(tape.add(tape.slice(gx, 2 * m, 3 * m),
                                  tape.mul(r, tape.slice(gh, 2 * m, 3 * m))))
        one_minus_z = tape.add(tape.scale(z, -1.0), 1.0)
        return tape.add(tape.mul(z, h), tape.mul(one_minus_z, cand))

    def zero_state(self, tape):
        return tape.const(np.zeros(self.hidden_dim, dtype=tape.dtype))


class Mlp:
    """Fully connected stack with tanh hidden layers; optional bounded output."""

    def __init__(self, store, prefix, dims, rng, final_tanh=False):
        self.prefix = prefix
        self.dims = tuple(dims)
        self.final_tanh = final_tanh
        for k in range(len(dims) - 1):
            uniform_init(store, f"{prefix}.w{k}", (dims[k], dims[k + 1]), rng)
            uniform_init(store, f"{prefix}.b{k}", (dims[k + 1],), rng)

    def param_count(self):
        return sum(self.dims[k] * self.dims[k + 1] + self.dims[k + 1]
                   for k in range(len(self.dims) - 1))

    def apply(self, tape, store, x):
        n_layers = len(self.dims) - 1
        for k in range(n_layers):
            w = tape.param(store, f"{self.prefix}.w{k}")
            b = tape.param(store, f"{self.prefix}.b{k}")
            x = tape.add(tape.matmul(x, w), b)
            if k < n_layers - 1:
                x = tape.tanh(x)
        if self.final_tanh:
            x = tape.tanh(x)
        return x
