"""Caption generation: greedy, classic beam search, value-guided lookahead
beam search, and embedding-based reranking.

Scoring convention for lookahead: each extension adds lambda * log-prob of
the chosen word plus (1 - lambda) * value of the *extended* state, value
terms accumulating step over step. At lambda = 1 the value network is never
consulted and the scores are plain sequence log-probabilities.

``beam_search`` is a deliberately separate implementation of the
lambda = 1 special case; the two are held equal by tests rather than by
sharing code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    policy_state: object = None
    value_ctx: object = None
    completed: bool = False
    truncated: bool = False
    trace: tuple = ()   # (logp, value-or-None) per generated word


@dataclass
class BeamSet:
    width: int
    live: list = field(default_factory=list)
    completed: list = field(default_factory=list)


def _blocked_ids(policy):
    return frozenset(getattr(policy, "decode_blocked", ()))


def _rank_key(length_normalize):
    def key(h):
        s = h.score / max(len(h.tokens), 1) if length_normalize else h.score
        return (-s, h.tokens)
    return key


def greedy_decode(policy, feature, max_len):
    """Deterministic argmax decoding; the annotation trace carries the chosen
    log-probs so scores can be audited."""
    blocked = _blocked_ids(policy)
    state = policy.init_state(feature)
    tokens, trace = [], []
    score = 0.0
    truncated = True
    for _ in range(max_len):
        logp = np.array(policy.next_logprobs(state), dtype=float)
        for b in blocked:
            logp[b] = -np.inf
        w = int(np.argmax(logp))
        tokens.append(w)
        score += float(logp[w])
        trace.append((float(logp[w]), None))
        if w == policy.eos_id:
            truncated = False
            break
        state, _ = policy.step(state, w)
    return Hypothesis(tokens=tuple(tokens), score=score, completed=not truncated,
                      truncated=truncated, trace=tuple(trace))


def beam_search(policy, feature, beam_width, max_len, length_normalize=False):
    """Classic log-probability beam search (no value network).

    Kept as plain parallel lists on purpose; see module docstring.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    blocked = _blocked_ids(policy)
    prefixes = [()]
    scores = [0.0]
    states = [policy.init_state(feature)]
    traces = [()]
    done = []
    for _ in range(max_len):
        if not prefixes or len(done) >= beam_width:
            break
        table = []
        for i, state in enumerate(states):
            logp = policy.next_logprobs(state)
            for w in range(len(logp)):
                if w in blocked:
                    continue
                table.append((scores[i] + float(logp[w]), i, w, float(logp[w])))
        table.sort(key=lambda row: (-row[0], row[1], row[2]))
        next_prefixes, next_scores, next_states, next_traces = [], [], [], []
        for s, i, w, lp in table[:beam_width]:
            seq = prefixes[i] + (w,)
            tr = traces[i] + ((lp, None),)
            if w == policy.eos_id:
                done.append(Hypothesis(tokens=seq, score=s, completed=True,
                                       trace=tr))
            else:
                st, _ = policy.step(states[i], w)
                next_prefixes.append(seq)
                next_scores.append(s)
                next_states.append(st)
                next_traces.append(tr)
        prefixes, scores, states, traces = (next_prefixes, next_scores,
                                            next_states, next_traces)
    if done:
        return sorted(done, key=_rank_key(length_normalize))
    best = max(range(len(prefixes)), key=lambda i: (scores[i],))
    return [Hypothesis(tokens=prefixes[best], score=scores[best],
                       truncated=True, trace=traces[best])]


def lookahead_beam_search(policy, value_net, feature, beam_width, lam, max_len,
                          length_normalize=False, record_steps=False):
    """Beam search whose extension score mixes policy log-probability with
    the value of the extended state.

    Returns completed hypotheses sorted by final score; if nothing finishes
    within max_len, the best live hypothesis comes back flagged truncated.
    With record_steps=True, also returns the per-step list of selected
    (tokens, score) pairs for oracle comparison.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    use_value = lam < 1.0
    if use_value and value_net is None:
        raise ValueError("lambda < 1 needs a value network")
    blocked = _blocked_ids(policy)

    root = Hypothesis(
        tokens=(), score=0.0, policy_state=policy.init_state(feature),
        value_ctx=(value_net.decode_init(feature, policy=policy,
                                         policy_state=None)
                   if use_value else None))
    beams = BeamSet(width=beam_width, live=[root])
    steps = []
    for _ in range(max_len):
        if not beams.live or len(beams.completed) >= beam_width:
            break
        candidates = []
        for i, hyp in enumerate(beams.live):
            logp = policy.next_logprobs(hyp.policy_state)
            vals = None
            if use_value:
                vals = value_net.extension_values(
                    hyp.value_ctx, policy=policy,
                    policy_state=hyp.policy_state)
            for w in range(len(logp)):
                if w in blocked:
                    continue
                s = hyp.score + lam * float(logp[w])
                v = None
                if use_value:
                    v = float(vals[w])
                    s += (1.0 - lam) * v
                candidates.append((s, i, w, float(logp[w]), v))
        candidates.sort(key=lambda row: (-row[0], row[1], row[2]))
        chosen = candidates[:beam_width]
        if record_steps:
            steps.append([(beams.live[i].tokens + (w,), s)
                          for s, i, w, _, _ in chosen])
        new_live = []
        for s, i, w, lp, v in chosen:
            parent = beams.live[i]
            seq = parent.tokens + (w,)
            tr = parent.trace + ((lp, v),)
            if w == policy.eos_id:
                beams.completed.append(
                    Hypothesis(tokens=seq, score=s, completed=True, trace=tr))
            else:
                st, _ = policy.step(parent.policy_state, w)
                ctx = (value_net.advance(parent.value_ctx, w, policy=policy,
                                         new_policy_state=st)
                       if use_value else None)
                new_live.append(Hypothesis(tokens=seq, score=s,
                                           policy_state=st, value_ctx=ctx,
                                           trace=tr))
        beams.live = new_live

    if beams.completed:
        ranked = sorted(beams.completed, key=_rank_key(length_normalize))
    else:
        best = sorted(beams.live, key=_rank_key(length_normalize))[0]
        best.truncated = True
        ranked = [best]
    return (ranked, steps) if record_steps else ranked


def embed_rerank(candidates, embed_model, feature):
    """Best candidate by embedding reward; ties fall back to the original
    score, then to lexicographic token order."""
    if not candidates:
        raise ValueError("no candidates to rerank")
    scored = [(embed_model.reward(feature, list(h.tokens)), h.score, h.tokens, h)
              for h in candidates]
    scored.sort(key=lambda row: (-row[0], -row[1], row[2]))
    return scored[0][3]
