"""Policy network: state mechanics, likelihood, sampling, pretraining."""

import math

import numpy as np
import pytest

from lacap.gradcheck import suite_policy
from lacap.policy import PolicyNet, mean_xent_loss, pretrain_policy
from lacap.scenes import generate_dataset


def micro_policy(seed=0, vocab=4):
    """Maskless tiny policy: every id is a legal action."""
    return PolicyNet(vocab_size=vocab, feature_dim=3, hidden_dim=5,
                     rng=np.random.default_rng(seed),
                     pad_id=None, unk_id=None, eos_id=0)


def desk_policy(seed, vocab=52, feature_dim=64, hidden_dim=32):
    return PolicyNet(vocab_size=vocab, feature_dim=feature_dim,
                     hidden_dim=hidden_dim, rng=np.random.default_rng(seed))


class TestStates:
    def test_zero_weights_zero_state(self):
        p = micro_policy()
        for _, e in p.store.items():
            e.value[...] = 0.0
        s = p.init_state(np.ones(3))
        np.testing.assert_array_equal(s.h, np.zeros(5))
        assert s.t == 0

    def test_init_deterministic(self):
        p = micro_policy()
        f = np.array([0.1, -0.5, 2.0])
        a, b = p.init_state(f), p.init_state(f)
        assert (a.h == b.h).all() and (a.logp == b.logp).all()

    def test_distinct_features_distinct_distributions(self):
        p = micro_policy(seed=3)
        a = p.init_state(np.array([1.0, 0.0, 0.0]))
        b = p.init_state(np.array([0.0, 1.0, 0.0]))
        assert not np.allclose(a.logp, b.logp)

    def test_feature_dim_checked(self):
        with pytest.raises(ValueError, match="feature"):
            micro_policy().init_state(np.ones(7))

    def test_invalid_token_rejected(self):
        p = micro_policy()
        s = p.init_state(np.ones(3))
        with pytest.raises(ValueError):
            p.step(s, 9)

    def test_markov_in_state(self):
        # identical (h, c, t) snapshots yield identical futures
        p = micro_policy(seed=1)
        s = p.init_state(np.array([0.2, 0.3, -1.0]))
        s, _ = p.step(s, 2)
        a, la = p.step(s, 1)
        b, lb = p.step(s, 1)
        assert (a.h == b.h).all() and (la == lb).all()


class TestDistributions:
    def test_simplex(self):
        p = desk_policy(seed=2)
        s = p.init_state(np.random.default_rng(0).normal(size=64))
        probs = np.exp(s.logp)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert (probs >= 0.0).all()

    def test_pad_probability_zero(self):
        p = desk_policy(seed=2)
        s = p.init_state(np.random.default_rng(0).normal(size=64))
        assert math.exp(s.logp[p.pad_id]) == 0.0

    def test_uniform_head_micro(self):
        p = micro_policy()
        p.store.entry("out_w").value[...] = 0.0
        p.store.entry("out_b").value[...] = 0.0
        s = p.init_state(np.ones(3))
        np.testing.assert_allclose(s.logp, -math.log(4), atol=1e-12)

    def test_uniform_head_pad_masked(self):
        p = desk_policy(seed=0, vocab=10)
        p.store.entry("out_w").value[...] = 0.0
        p.store.entry("out_b").value[...] = 0.0
        s = p.init_state(np.random.default_rng(0).normal(size=64))
        legal = [i for i in range(10) if i != p.pad_id]
        np.testing.assert_allclose(s.logp[legal], -math.log(p.n_actions),
                                   atol=1e-12)


class TestSequenceLogprob:
    def test_nonpositive(self):
        p = micro_policy(seed=5)
        assert p.sequence_logprob(np.ones(3), [2, 3, 0]) <= 0.0

    def test_uniform_policy_length_scaling(self):
        p = micro_policy()
        p.store.entry("out_w").value[...] = 0.0
        p.store.entry("out_b").value[...] = 0.0
        lp = p.sequence_logprob(np.ones(3), [1, 2, 3, 0])
        assert lp == pytest.approx(4 * -math.log(4), abs=1e-12)

    def test_stepwise_sum_matches(self):
        p = desk_policy(seed=7)
        rng = np.random.default_rng(1)
        f = rng.normal(size=64)
        sent = [10, 20, 30, 0]
        state = p.init_state(f)
        total = 0.0
        for w in sent:
            total += state.logp[w]
            state, _ = p.step(state, w)
        assert total == pytest.approx(p.sequence_logprob(f, sent), abs=1e-12)

    def test_requires_eos(self):
        p = desk_policy(seed=7)
        with pytest.raises(ValueError, match="eos"):
            p.sequence_logprob(np.zeros(64), [5, 6])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            micro_policy().sequence_logprob(np.ones(3), [])


class TestRollout:
    def test_full_prefix_forces_output(self):
        p = desk_policy(seed=4)
        f = np.random.default_rng(2).normal(size=64)
        ref = [12, 13, 14, 0]
        roll = p.rollout(f, np.random.default_rng(0), max_len=12, prefix=ref)
        assert roll.tokens == ref
        assert not any(roll.sampled)
        assert not roll.truncated

    def test_deterministic_per_seed(self):
        p = desk_policy(seed=4)
        f = np.random.default_rng(2).normal(size=64)
        a = p.rollout(f, np.random.default_rng(9), max_len=12)
        b = p.rollout(f, np.random.default_rng(9), max_len=12)
        assert a.tokens == b.tokens and a.logps == b.logps

    def test_never_samples_pad_or_unk(self):
        p = desk_policy(seed=4)
        f = np.random.default_rng(2).normal(size=64)
        for seed in range(20):
            roll = p.rollout(f, np.random.default_rng(seed), max_len=12)
            assert p.pad_id not in roll.tokens
            assert p.unk_id not in roll.tokens

    def test_states_align_with_tokens(self):
        p = desk_policy(seed=4)
        f = np.random.default_rng(2).normal(size=64)
        roll = p.rollout(f, np.random.default_rng(3), max_len=12)
        assert len(roll.states) == len(roll.tokens) == len(roll.logps)
        assert roll.states[0].t == 0

    def test_sampling_frequencies_match_distribution(self):
        p = micro_policy(seed=8)
        f = np.array([0.5, -0.2, 1.0])
        probs = np.exp(p.init_state(f).logp)
        n = 100_000
        rng = np.random.default_rng(123)
        counts = np.zeros(4)
        for _ in range(n):
            roll = p.rollout(f, rng, max_len=1)
            counts[roll.tokens[0]] += 1
        # multinomial 3-sigma bound per symbol
        sigma = np.sqrt(n * probs * (1 - probs))
        assert (np.abs(counts - n * probs) <= 3 * sigma + 1e-9).all()


class TestPretraining:
    @pytest.fixture(scope="class")
    def small_data(self):
        train, _, _, vocab = generate_dataset(seed=17, n_train=60, n_val=1,
                                              n_test=1)
        return train, vocab

    def test_first_epoch_reduces_loss(self, small_data):
        train, vocab = small_data
        p = desk_policy(seed=11, vocab=len(vocab))
        initial = mean_xent_loss(p, train)
        curve = pretrain_policy(p, train, epochs=1, lr=1e-3, seed=11)
        assert curve[0]["train_loss"] < initial

    def test_zero_lr_leaves_parameters(self, small_data):
        train, vocab = small_data
        p = desk_policy(seed=11, vocab=len(vocab))
        before = p.store.snapshot()
        pretrain_policy(p, train, epochs=1, lr=0.0, seed=11)
        after = p.store.snapshot()
        assert all((before[k] == after[k]).all() for k in before)

    def test_memorizes_ten_examples(self, small_data):
        from lacap.decode import greedy_decode

        train, vocab = small_data
        subset = train[:10]
        p = desk_policy(seed=11, vocab=len(vocab))
        pretrain_policy(p, subset, epochs=200, lr=3e-3, seed=11)
        hits = 0
        for ex in subset:
            out = greedy_decode(p, ex.feature, max_len=12)
            if list(out.tokens) in ex.references:
                hits += 1
        assert hits >= 9

    def test_gradients_match_finite_differences(self):
        assert suite_policy(range(5)) < 1e-6
