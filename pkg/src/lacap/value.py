"""Reward critic: regresses the terminal embedding reward from a decode state.

Three input architectures: "full" owns its feature encoder, word-embedding
table, and recurrent sentence reader; "hid-VN" reads the policy's hidden
state; "hid-Im-VN" reads the policy hidden state concatenated with the
policy's image input. The head ends in tanh so predictions stay inside the
cosine reward range [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .nn import LstmCell, Mlp, ParamStore, adam_update, uniform_init

VARIANTS = ("full", "hid-VN", "hid-Im-VN")


@dataclass(frozen=True)
class DecodeState:
    """The pair (image feature, generated prefix); terminal once <eos> lands."""
    feature: np.ndarray = field(repr=False)
    prefix: tuple
    eos_id: int = 0

    @property
    def terminal(self):
        return len(self.prefix) > 0 and self.prefix[-1] == self.eos_id


@dataclass
class ValueCtx:
    """Incremental decoding context; `full` tracks its own recurrent state."""
    vis: np.ndarray = None
    h: np.ndarray = None
    c: np.ndarray = None
    x0: np.ndarray = None


class ValueNet:
    def __init__(self, vocab_size, feature_dim, hidden_dim, visual_dim,
                 mlp_hidden, rng, variant="full",
                 policy_hidden_dim=None, policy_input_dim=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown value-net variant {variant!r}")
        self.variant = variant
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.visual_dim = visual_dim
        self.mlp_hidden = tuple(mlp_hidden)
        self.policy_hidden_dim = policy_hidden_dim
        self.policy_input_dim = policy_input_dim
        self.store = ParamStore()
        if variant == "full":
            uniform_init(self.store, "vis_map", (feature_dim, visual_dim), rng)
            uniform_init(self.store, "word_emb", (vocab_size, hidden_dim), rng)
            self.lstm = LstmCell(self.store, "lstm", hidden_dim, hidden_dim, rng)
            in_dim = visual_dim + hidden_dim
        elif variant == "hid-VN":
            if policy_hidden_dim is None:
                raise ValueError("hid-VN needs the policy hidden dim")
            in_dim = policy_hidden_dim
        else:
            if policy_hidden_dim is None or policy_input_dim is None:
                raise ValueError("hid-Im-VN needs policy hidden and input dims")
            in_dim = policy_hidden_dim + policy_input_dim
        self.state_dim = in_dim
        self.mlp = Mlp(self.store, "mlp", (in_dim, *self.mlp_hidden, 1), rng,
                       final_tanh=True)

    def meta(self):
        return {"vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
                "hidden_dim": self.hidden_dim, "visual_dim": self.visual_dim,
                "mlp_hidden": list(self.mlp_hidden), "variant": self.variant,
                "policy_hidden_dim": self.policy_hidden_dim,
                "policy_input_dim": self.policy_input_dim}

    @classmethod
    def from_meta(cls, meta):
        return cls(meta["vocab_size"], meta["feature_dim"], meta["hidden_dim"],
                   meta["visual_dim"], meta["mlp_hidden"],
                   np.random.default_rng(0), variant=meta["variant"],
                   policy_hidden_dim=meta["policy_hidden_dim"],
                   policy_input_dim=meta["policy_input_dim"])

    def _need_context(self, policy_context):
        if policy_context is None:
            raise ValueError(
                f"variant {self.variant!r} needs policy_context "
                "(hidden state, image input)")
        return policy_context

    # ---- tape-level forward --------------------------------------------

    def value_node(self, tape, feature, prefix, policy_context=None):
        """Scalar value node; hid variants read the (constant) policy context."""
        if self.variant == "full":
            vis = tape.matmul(tape.const(feature),
                              tape.param(self.store, "vis_map"))
            h, c = self.lstm.zero_state(tape)
            table = tape.param(self.store, "word_emb")
            for tok in prefix:
                h, c = self.lstm.step(tape, self.store,
                                      tape.rows(table, int(tok)), h, c)
            state_vec = tape.concat([vis, h])
        elif self.variant == "hid-VN":
            hidden, _ = self._need_context(policy_context)
            state_vec = tape.const(hidden)
        else:
            hidden, x0 = self._need_context(policy_context)
            if x0 is None:
                raise ValueError("hid-Im-VN needs the policy image input")
            state_vec = tape.concat([tape.const(hidden), tape.const(x0)])
        return self.mlp.apply(tape, self.store, state_vec)

    def value_batch_node(self, tape, features, prefixes, policy_contexts=None):
        """(B, 1) node of values, recurrent reads run in lockstep."""
        batch = len(prefixes)
        if self.variant == "full":
            feats = np.stack([np.asarray(f) for f in features])
            vis = tape.matmul(tape.const(feats), tape.param(self.store, "vis_map"))
            table = tape.param(self.store, "word_emb")
            h = tape.const(np.zeros((batch, self.hidden_dim)))
            c = tape.const(np.zeros((batch, self.hidden_dim)))
            compact = list(range(batch))
            final = [None] * batch
            max_t = max((len(p) for p in prefixes), default=0)
            for t in range(max_t):
                for i in [i for i in compact if len(prefixes[i]) == t]:
                    final[i] = tape.rows(h, compact.index(i))
                alive = [i for i in compact if len(prefixes[i]) > t]
                if alive != compact:
                    pos = [compact.index(i) for i in alive]
                    h, c = tape.rows(h, pos), tape.rows(c, pos)
                    compact = alive
                x = tape.rows(table, [int(prefixes[i][t]) for i in compact])
                h, c = self.lstm.step(tape, self.store, x, h, c)
            for i in compact:
                final[i] = tape.rows(h, compact.index(i))
            state_mat = tape.concat([vis, tape.stack(final)])
        else:
            ctxs = [self._need_context(pc) for pc in policy_contexts]
            hid = np.stack([np.asarray(hc[0]) for hc in ctxs])
            if self.variant == "hid-VN":
                state_mat = tape.const(hid)
            else:
                x0 = np.stack([np.asarray(hc[1]) for hc in ctxs])
                state_mat = tape.concat([tape.const(hid), tape.const(x0)])
        return self.mlp.apply(tape, self.store, state_mat)

    # ---- value-level API ------------------------------------------------

    def evaluate(self, state, policy_context=None):
        out = self.value_node(Tape(), state.feature, state.prefix,
                              policy_context=policy_context)
        return float(out.value[0])

    # ---- incremental decoding -------------------------------------------

    def decode_init(self, feature, policy=None, policy_state=None):
        if self.variant == "full":
            vis = np.asarray(feature) @ self.store.entry("vis_map").value
            m = self.hidden_dim
            return ValueCtx(vis=vis, h=np.zeros(m), c=np.zeros(m))
        if self.variant == "hid-Im-VN":
            return ValueCtx(x0=policy.image_input(feature))
        return ValueCtx()

    def extension_values(self, ctx, policy=None, policy_state=None):
        """Value of every one-word extension of the current state, batched."""
        tape = Tape()
        if self.variant == "full":
            table = tape.param(self.store, "word_emb")
            h_all, _ = self.lstm.step(tape, self.store, table,
                                      tape.const(ctx.h), tape.const(ctx.c))
            vis_rows = np.broadcast_to(ctx.vis, (self.vocab_size, self.visual_dim))
            state_mat = tape.concat([tape.const(vis_rows.copy()), h_all])
        else:
            h_all = policy.step_all_words(policy_state)
            if self.variant == "hid-Im-VN":
                x0_rows = np.broadcast_to(ctx.x0, (h_all.shape[0], len(ctx.x0)))
                state_mat = tape.concat([tape.const(h_all),
                                         tape.const(x0_rows.copy())])
            else:
                state_mat = tape.const(h_all)
        out = self.mlp.apply(tape, self.store, state_mat)
        return out.value[:, 0].copy()

    def advance(self, ctx, word, policy=None, new_policy_state=None):
        if self.variant != "full":
            return ctx
        tape = Tape()
        x = tape.rows(tape.param(self.store, "word_emb"), int(word))
        h, c = self.lstm.step(tape, self.store, x,
                              tape.const(ctx.h), tape.const(ctx.c))
        return ValueCtx(vis=ctx.vis, h=h.value, c=c.value)


def evaluate(value_net, state, policy_context=None):
    return value_net.evaluate(state, policy_context=policy_context)


def policy_context_for(policy, feature, prefix):
    """(hidden, image input) of the policy after consuming the prefix."""
    state = policy.init_state(feature)
    for w in prefix:
        state, _ = policy.step(state, w)
    return state.h, policy.image_input(feature)


@dataclass
class ValuePretrainStats:
    curve: list
    rollouts: int
    states_trained: int


def pretrain_value(value_net, policy, embed, examples, epochs, lr, seed,
                   max_len, batch_size=32):
    """Regress one uniformly sampled state per sampled sentence onto that
    sentence's terminal reward (half squared error, Adam)."""
    rng = np.random.default_rng([seed, 70])
    rollouts = states_trained = 0
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        sq_err, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            exs = [examples[i] for i in chunk]
            rolls = policy.rollout_batch([ex.feature for ex in exs], rng, max_len)
            feats, prefixes, targets, ctxs = [], [], [], []
            for ex, roll in zip(exs, rolls):
                r = embed.reward(ex.feature, roll.tokens)
                t = int(rng.integers(len(roll.tokens) + 1))
                feats.append(ex.feature)
                prefixes.append(roll.tokens[:t])
                targets.append(r)
                if value_net.variant != "full":
                    state = roll.states[t] if t < len(roll.tokens) \
                        else roll.final_state
                    ctxs.append((state.h, policy.image_input(ex.feature)))
                rollouts += 1
                states_trained += 1
                seen += 1
            tape = Tape()
            v = value_net.value_batch_node(tape, feats, prefixes,
                                           policy_contexts=ctxs or None)
            d = tape.sub(v, tape.const(np.asarray(targets)[:, None]))
            loss = tape.scale(tape.sum(tape.mul(d, d)), 0.5 / len(chunk))
            tape.backward(loss)
            adam_update(value_net.store, lr=lr)
            sq_err += float((d.value[:, 0] ** 2).sum())
        curve.append({"epoch": epoch, "mse": sq_err / max(seen, 1)})
    return ValuePretrainStats(curve=curve, rollouts=rollouts,
                              states_trained=states_trained)


def penultimate_predictions(value_net, policy, embed, examples, seed, max_len):
    """(prediction at the state missing the last token, realized reward) pairs
    over fresh rollouts; feeds the rank-correlation check."""
    rng = np.random.default_rng([seed, 71])
    preds, rewards = [], []
    for ex in examples:
        roll = policy.rollout(ex.feature, rng, max_len)
        if len(roll.tokens) < 2:
            continue
        r = embed.reward(ex.feature, roll.tokens)
        prefix = tuple(roll.tokens[:-1])
        ctx = None
        if value_net.variant != "full":
            ctx = (roll.states[-1].h, policy.image_input(ex.feature))
        preds.append(value_net.evaluate(
            DecodeState(feature=ex.feature, prefix=prefix), policy_context=ctx))
        rewards.append(r)
    return np.asarray(preds), np.asarray(rewards)
