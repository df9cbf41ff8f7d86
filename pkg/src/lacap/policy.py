"""Image-conditioned recurrent word policy.

The image feature is consumed by one LSTM step before any word, and the
first word is predicted from that state; there is no begin token. <pad>
is never a legal action: its logit is hard-masked everywhere. <unk> stays
in the probability normalizer but is barred from being *selected* during
decoding and rollout, so accumulated decode scores match likelihood
log-probabilities on the same path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .nn import LstmCell, ParamStore, uniform_init

NEG_BIG = -1e30


def log_softmax(z):
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


@dataclass
class PolicyState:
    h: np.ndarray
    c: np.ndarray
    t: int
    logp: np.ndarray  # next-word log-probs from this state


@dataclass
class RolloutResult:
    tokens: list       # generated ids, prefix included
    logps: list        # chosen-token log-prob per position
    sampled: list      # True where the token was sampled rather than forced
    states: list       # pre-action PolicyState per position
    final_state: object
    truncated: bool


class PolicyNet:
    def __init__(self, vocab_size, feature_dim, hidden_dim, rng,
                 pad_id=2, unk_id=1, eos_id=0):
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.pad_id = pad_id
        self.unk_id = unk_id
        self.eos_id = eos_id
        self.store = ParamStore()
        uniform_init(self.store, "feat_proj", (feature_dim, hidden_dim), rng)
        uniform_init(self.store, "word_emb", (vocab_size, hidden_dim), rng)
        self.lstm = LstmCell(self.store, "lstm", hidden_dim, hidden_dim, rng)
        uniform_init(self.store, "out_w", (hidden_dim, vocab_size), rng)
        uniform_init(self.store, "out_b", (vocab_size,), rng)

        self._pad_keep = np.ones(vocab_size)
        self._pad_neg = np.zeros(vocab_size)
        if pad_id is not None:
            self._pad_keep[pad_id] = 0.0
            self._pad_neg[pad_id] = NEG_BIG
        self._select_keep = self._pad_keep.copy()
        self._select_neg = self._pad_neg.copy()
        if unk_id is not None:
            self._select_keep[unk_id] = 0.0
            self._select_neg[unk_id] = NEG_BIG

    def meta(self):
        return {"vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
                "hidden_dim": self.hidden_dim, "pad_id": self.pad_id,
                "unk_id": self.unk_id, "eos_id": self.eos_id}

    @classmethod
    def from_meta(cls, meta):
        return cls(meta["vocab_size"], meta["feature_dim"], meta["hidden_dim"],
                   np.random.default_rng(0), pad_id=meta["pad_id"],
                   unk_id=meta["unk_id"], eos_id=meta["eos_id"])

    @property
    def n_actions(self):
        """Legal action count: vocab minus the hard-masked pad slot."""
        return self.vocab_size - (1 if self.pad_id is not None else 0)

    @property
    def decode_blocked(self):
        """Ids the decoder and rollout must never select."""
        return tuple(i for i in (self.pad_id, self.unk_id) if i is not None)

    def _check_token(self, word):
        if not 0 <= int(word) < self.vocab_size:
            raise ValueError(f"token id {word} outside vocabulary of "
                             f"{self.vocab_size}")

    # ---- tape-level pieces -------------------------------------------

    def x0_node(self, tape, feature):
        return tape.matmul(tape.const(feature), tape.param(self.store, "feat_proj"))

    def logits_node(self, tape, h, select_mask=False):
        """Output head with pad masked; select_mask also freezes <unk>."""
        logits = tape.add(tape.matmul(h, tape.param(self.store, "out_w")),
                          tape.param(self.store, "out_b"))
        keep = self._select_keep if select_mask else self._pad_keep
        neg = self._select_neg if select_mask else self._pad_neg
        if keep.min() == 1.0:
            return logits
        return tape.add(tape.mul(logits, tape.const(keep)), tape.const(neg))

    def unroll_loss_node(self, tape, feature, tokens, weights=None,
                         select_mask_flags=None):
        """Teacher-forced sum of per-step cross-entropies.

        weights scales each step's loss (reinforcement steps pass the
        advantage); select_mask_flags marks steps whose distribution is
        the selection-masked one (sampled steps).
        """
        if len(tokens) == 0:
            raise ValueError("empty sentence")
        h, c = self.lstm.zero_state(tape)
        h, c = self.lstm.step(tape, self.store, self.x0_node(tape, feature), h, c)
        total = tape.const(np.asarray(0.0))
        for t, w in enumerate(tokens):
            self._check_token(w)
            masked = bool(select_mask_flags[t]) if select_mask_flags else False
            logits = self.logits_node(tape, h, select_mask=masked)
            loss, _ = tape.softmax_xent(logits, int(w))
            scale = 1.0 if weights is None else float(weights[t])
            if scale != 0.0:
                total = tape.add(total, tape.scale(loss, scale))
            x = tape.rows(tape.param(self.store, "word_emb"), int(w))
            h, c = self.lstm.step(tape, self.store, x, h, c)
        return total

    def xent_loss_node(self, tape, feature, tokens):
        return self.unroll_loss_node(tape, feature, tokens)

    def batch_loss_node(self, tape, features, sentences, step_weights=None,
                        select_flags=None):
        """Sum of per-example teacher-forced losses, unrolled in lockstep.

        One tape node per time step covers the whole batch; finished
        sentences drop out of the row set as the step index passes their
        length. Matches summing unroll_loss_node over the batch.
        """
        batch = len(sentences)
        if batch == 0:
            raise ValueError("empty batch")
        feats = np.stack([np.asarray(f) for f in features])
        x0 = tape.matmul(tape.const(feats), tape.param(self.store, "feat_proj"))
        zeros = np.zeros((batch, self.hidden_dim))
        h, c = tape.const(zeros), tape.const(zeros.copy())
        h, c = self.lstm.step(tape, self.store, x0, h, c)
        table = tape.param(self.store, "word_emb")
        out_w = tape.param(self.store, "out_w")
        out_b = tape.param(self.store, "out_b")
        compact = list(range(batch))
        total = tape.const(np.asarray(0.0))
        for t in range(max(len(s) for s in sentences)):
            alive = [i for i in compact if len(sentences[i]) > t]
            if not alive:
                break
            if alive != compact:
                pos = [compact.index(i) for i in alive]
                h, c = tape.rows(h, pos), tape.rows(c, pos)
                compact = alive
            targets = [int(sentences[i][t]) for i in compact]
            for w in targets:
                self._check_token(w)
            logits = tape.add(tape.matmul(h, out_w), out_b)
            if select_flags is None:
                keep, neg = self._pad_keep, self._pad_neg
            else:
                keep = np.stack([self._select_keep if select_flags[i][t]
                                 else self._pad_keep for i in compact])
                neg = np.stack([self._select_neg if select_flags[i][t]
                                else self._pad_neg for i in compact])
            if keep.min() < 1.0:
                logits = tape.add(tape.mul(logits, tape.const(keep)),
                                  tape.const(neg))
            wvec = None if step_weights is None else \
                [float(step_weights[i][t]) for i in compact]
            loss, _ = tape.softmax_xent_rows(logits, targets, weights=wvec)
            total = tape.add(total, loss)
            h, c = self.lstm.step(tape, self.store, tape.rows(table, targets), h, c)
        return total

    # ---- stepwise inference --------------------------------------------

    def _state_from(self, h_node, c_node, t):
        z = h_node.value @ self.store.entry("out_w").value \
            + self.store.entry("out_b").value
        z = z * self._pad_keep + self._pad_neg
        return PolicyState(h=h_node.value, c=c_node.value, t=t,
                           logp=log_softmax(z))

    def init_state(self, feature):
        """Consume the image; the returned state predicts the first word."""
        feature = np.asarray(feature)
        if feature.shape != (self.feature_dim,):
            raise ValueError(f"feature shape {feature.shape}, expected "
                             f"({self.feature_dim},)")
        tape = Tape()
        h, c = self.lstm.zero_state(tape)
        h, c = self.lstm.step(tape, self.store, self.x0_node(tape, feature), h, c)
        return self._state_from(h, c, 0)

    def next_logprobs(self, state):
        return state.logp

    def step(self, state, word):
        """Advance by one consumed word; returns (state', next log-probs)."""
        self._check_token(word)
        tape = Tape()
        x = tape.rows(tape.param(self.store, "word_emb"), int(word))
        h, c = self.lstm.step(tape, self.store, x,
                              tape.const(state.h), tape.const(state.c))
        new = self._state_from(h, c, state.t + 1)
        return new, new.logp

    def step_all_words(self, state):
        """Hidden states after consuming each possible word (one batched step)."""
        tape = Tape()
        table = tape.param(self.store, "word_emb")
        h, _ = self.lstm.step(tape, self.store, table,
                              tape.const(state.h), tape.const(state.c))
        return h.value

    def image_input(self, feature):
        return np.asarray(feature) @ self.store.entry("feat_proj").value

    # ---- sequence-level operations ------------------------------------

    def prefix_logprob(self, feature, tokens):
        """Sum of log p(w_t | s_{t-1}) for an arbitrary forced prefix."""
        state = self.init_state(feature)
        total = 0.0
        for w in tokens:
            self._check_token(w)
            total += float(state.logp[int(w)])
            state, _ = self.step(state, w)
        return total

    def sequence_logprob(self, feature, sentence):
        if len(sentence) == 0:
            raise ValueError("empty sentence")
        if self.eos_id is not None and sentence[-1] != self.eos_id:
            raise ValueError("sentence must end with <eos>")
        return self.prefix_logprob(feature, sentence)

    def rollout(self, feature, rng, max_len, prefix=()):
        """Force the prefix, then sample (pad/unk barred) to <eos> or max_len.

        Sampled steps record the log-prob under the selection-masked,
        renormalized distribution actually sampled from.
        """
        return self.rollout_batch([feature], rng, max_len, prefixes=[prefix])[0]

    def rollout_batch(self, features, rng, max_len, prefixes=None):
        """Rollouts for several images advanced in lockstep.

        The rng is consumed in ascending example order within each step, so
        results are deterministic per (seed, batch)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        batch = len(features)
        prefixes = [list(p) for p in (prefixes or [[]] * batch)]
        if any(len(p) > max_len for p in prefixes):
            raise ValueError("prefix longer than max_len")
        for p in prefixes:
            for w in p:
                self._check_token(w)
        feats = np.stack([np.asarray(f) for f in features])
        tape = Tape()
        zeros = np.zeros((batch, self.hidden_dim))
        h0, c0 = self.lstm.step(tape, self.store,
                                tape.matmul(tape.const(feats),
                                            tape.param(self.store, "feat_proj")),
                                tape.const(zeros), tape.const(zeros.copy()))
        h_val, c_val = h0.value.copy(), c0.value.copy()
        out_w = self.store.entry("out_w").value
        out_b = self.store.entry("out_b").value
        rolls = [RolloutResult([], [], [], [], None, True) for _ in range(batch)]
        done = [False] * batch
        for t in range(max_len):
            active = [i for i in range(batch) if not done[i]]
            if not active:
                break
            logits = h_val[active] @ out_w + out_b
            logits = logits * self._pad_keep + self._pad_neg
            for row, i in enumerate(active):
                lp = log_softmax(logits[row])
                state = PolicyState(h=h_val[i].copy(), c=c_val[i].copy(),
                                    t=t, logp=lp)
                if t < len(prefixes[i]):
                    w = int(prefixes[i][t])
                    chosen_lp = float(lp[w])
                    was_sampled = False
                else:
                    if self.unk_id is None:
                        sel_logp = lp  # nothing extra masked, no renorm
                    else:
                        sel_logp = log_softmax(
                            lp + (self._select_neg - self._pad_neg))
                    probs = np.exp(sel_logp)
                    probs = probs / probs.sum()
                    w = int(rng.choice(self.vocab_size, p=probs))
                    chosen_lp = float(sel_logp[w])
                    was_sampled = True
                r = rolls[i]
                r.states.append(state)
                r.tokens.append(w)
                r.logps.append(chosen_lp)
                r.sampled.append(was_sampled)
            # advance every active row by its chosen token
            chosen = [rolls[i].tokens[-1] for i in active]
            step_tape = Tape()
            x = step_tape.rows(step_tape.param(self.store, "word_emb"), chosen)
            hn, cn = self.lstm.step(step_tape, self.store, x,
                                    step_tape.const(h_val[active]),
                                    step_tape.const(c_val[active]))
            h_val[active] = hn.value
            c_val[active] = cn.value
            for row, i in enumerate(active):
                w = rolls[i].tokens[-1]
                ended = self.eos_id is not None and w == self.eos_id
                if ended or t == max_len - 1:
                    z = h_val[i] @ out_w + out_b
                    z = z * self._pad_keep + self._pad_neg
                    rolls[i].final_state = PolicyState(
                        h=h_val[i].copy(), c=c_val[i].copy(), t=t + 1,
                        logp=log_softmax(z))
                if ended:
                    done[i] = True
                    rolls[i].truncated = False
        return rolls


def mean_xent_loss(policy, examples):
    """Mean per-sentence teacher-forcing loss over all (feature, ref) pairs."""
    total, count = 0.0, 0
    for ex in examples:
        for ref in ex.references:
            total += -policy.sequence_logprob(ex.feature, ref)
            count += 1
    return total / max(count, 1)


def pretrain_policy(policy, examples, epochs, lr, seed, batch_size=32):
    """Teacher forcing on every (feature, reference) pair; returns the loss
    curve as one mean-per-sentence entry per epoch."""
    from .nn import adam_update

    pairs = [(ex.feature, ref) for ex in examples for ref in ex.references]
    rng = np.random.default_rng([seed, 60])
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            tape = Tape()
            total = policy.batch_loss_node(tape,
                                           [pairs[i][0] for i in chunk],
                                           [pairs[i][1] for i in chunk])
            tape.backward(tape.scale(total, 1.0 / len(chunk)))
            adam_update(policy.store, lr=lr)
            epoch_loss += float(total.value)
        curve.append({"epoch": epoch, "train_loss": epoch_loss / len(pairs)})
    return curve
