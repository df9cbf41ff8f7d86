"""Finite-difference gradient verification.

The checker never looks at the tape's backward results while producing its
reference: central differences only re-run forward evaluations, so the two
routes stay independent. Model suites live here so the CLI `gradcheck`
command and the test suite share one implementation.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-5


def analytic_grads(build_loss, store):
    """Run one forward+backward; returns (loss value, {name: grad copy})."""
    store.zero_grads()
    tape, loss = build_loss()
    tape.backward(loss)
    grads = {k: e.grad.copy() for k, e in store.items()}
    store.zero_grads()
    return float(loss.value), grads


def finite_diff_grads(build_loss, store, eps=EPS):
    """Central differences over every entry of the store."""
    out = {}
    for name, e in store.items():
        g = np.zeros_like(e.value)
        flat = e.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            _, hi = build_loss()
            flat[i] = orig - eps
            _, lo = build_loss()
            flat[i] = orig
            gflat[i] = (float(hi.value) - float(lo.value)) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(ga, gn):
    """Max-norm relative disagreement with an absolute floor."""
    num = np.abs(ga - gn).max() if ga.size else 0.0
    den = max(np.abs(ga).max() if ga.size else 0.0,
              np.abs(gn).max() if gn.size else 0.0, 1e-8)
    return num / den


def check_gradients(build_loss, store, eps=EPS):
    """Max relative error between analytic and central-difference gradients."""
    _, ga = analytic_grads(build_loss, store)
    gn = finite_diff_grads(build_loss, store, eps)
    return max(relative_error(ga[k], gn[k]) for k in ga)


# ---- per-model suites (small dims keep central differences cheap) --------

def suite_ops(seeds=range(100)):
    """One composite graph touching every op kind per seed."""
    from .autodiff import Tape
    from .nn import ParamStore

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([1000, seed])
        store = ParamStore()
        store.add("a", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=(4, 2)))
        store.add("v", rng.normal(size=4))
        store.add("w", rng.normal(size=4))
        # keep hinge inputs away from the kink so the FD stencil is valid
        store.add("h", rng.uniform(0.2, 1.0, size=4) * rng.choice([-1.0, 1.0], size=4))

        def build():
            t = Tape()
            a, b = t.param(store, "a"), t.param(store, "b")
            v, w, h = t.param(store, "v"), t.param(store, "w"), t.param(store, "h")
            m = t.matmul(a, b)                       # (3,2)
            m = t.tanh(t.add(m, t.const(0.1)))
            s1 = t.sum(t.mul(m, m))
            vc = t.concat([t.sigmoid(v), t.relu(h)])  # (8,)
            vs = t.slice(vc, 1, 6)                    # (5,)
            s2 = t.sum(t.stack([vs, t.scale(vs, 0.5)]))
            d = t.dot(v, w)
            nrm = t.l2norm(t.add(w, t.const(3.0)))   # keep away from zero
            s3 = t.mul(d, t.recip(nrm))
            s4 = t.sum(t.sub(t.rows(a, [0, 2]), t.const(0.2)))
            loss, _ = t.softmax_xent(v, 1)
            total = t.add(t.add(s1, s2), t.add(t.add(s3, s4), loss))
            return t, total

        worst = max(worst, check_gradients(build, store))
    return worst


def suite_cells(seeds=range(20)):
    """LSTM, GRU, and MLP unrolled over sequence lengths 1..5."""
    from .autodiff import Tape
    from .nn import GruCell, LstmCell, Mlp, ParamStore

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([2000, seed])
        seq_len = seed % 5 + 1
        store = ParamStore()
        lstm = LstmCell(store, "lstm", 3, 4, rng)
        gru = GruCell(store, "gru", 3, 4, rng)
        mlp = Mlp(store, "mlp", (4, 5, 1), rng, final_tanh=True)
        xs = [rng.normal(size=3) for _ in range(seq_len)]

        def build():
            t = Tape()
            h, c = lstm.zero_state(t)
            hg = gru.zero_state(t)
            for x in xs:
                xn = t.const(x)
                h, c = lstm.step(t, store, xn, h, c)
                hg = gru.step(t, store, xn, hg)
            out = mlp.apply(t, store, t.add(h, hg))
            return t, t.sum(out)

        worst = max(worst, check_gradients(build, store))
    return worst


def suite_policy(seeds=range(20)):
    """Cross-entropy over a 2-example teacher-forced batch."""
    from .autodiff import Tape
    from .policy import PolicyNet

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([3000, seed])
        policy = PolicyNet(vocab_size=6, feature_dim=3, hidden_dim=4,
                           rng=rng, pad_id=None, unk_id=None, eos_id=0)
        feats = [rng.normal(size=3) for _ in range(2)]
        sents = [[3, 4, 0], [5, 0]]

        def build():
            t = Tape()
            losses = [policy.xent_loss_node(t, f, s)
                      for f, s in zip(feats, sents)]
            return t, t.scale(t.add(losses[0], losses[1]), 0.5)

        # wider stencil: composite-model losses leave roundoff, not
        # truncation, as the dominant finite-difference error
        worst = max(worst, check_gradients(build, policy.store, eps=1e-4))
    return worst


def suite_value(seeds=range(20)):
    """Half squared error of the bounded value head on a random state."""
    from .autodiff import Tape
    from .value import ValueNet

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([4000, seed])
        net = ValueNet(vocab_size=6, feature_dim=3, hidden_dim=4,
                       visual_dim=4, mlp_hidden=(5, 4), rng=rng)
        feat = rng.normal(size=3)
        prefix = [3, 5, 4][: seed % 3 + 1]
        target = 0.37

        def build():
            t = Tape()
            v = net.value_node(t, feat, prefix)
            d = t.sub(v, t.const(target))
            return t, t.scale(t.mul(d, d), 0.5)

        worst = max(worst, check_gradients(build, net.store, eps=1e-4))
    return worst


def suite_embedding(seeds=range(20)):
    """Bidirectional ranking loss on a batch of 3 pairs."""
    from .autodiff import Tape
    from .embedding import EmbedModel

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([5000, seed])
        model = EmbedModel(vocab_size=6, feature_dim=3, word_dim=3,
                           embed_dim=4, margin=0.2, rng=rng)
        feats = [rng.normal(size=3) for _ in range(3)]
        sents = [[3, 4, 0], [5, 0], [4, 5, 3, 0]]

        def build():
            t = Tape()
            return t, model.ranking_loss_node(t, feats, sents)

        # narrow stencil here: the normalize+hinge composition makes
        # truncation, not roundoff, the dominant error at wider steps
        worst = max(worst, check_gradients(build, model.store, eps=1e-5))
    return worst


def run_all():
    """All suites; returns {suite name: max relative error}."""
    return {
        "ops": suite_ops(),
        "cells": suite_cells(),
        "policy": suite_policy(),
        "value": suite_value(),
        "embedding": suite_embedding(),
    }
