"""Embedding model: normalization, ranking loss, reward, small training run."""

import numpy as np
import pytest

from lacap.autodiff import Tape
from lacap.embedding import (
    EmbedModel, cosine, embed_image, embed_sentence, mean_ranking_loss,
    ranking_hinge_total, ranking_loss, recall_at_1, reward, train_embedding,
)
from lacap.gradcheck import suite_embedding
from lacap.scenes import generate_dataset


def tiny_model(seed=0, margin=0.2):
    return EmbedModel(vocab_size=10, feature_dim=5, word_dim=4, embed_dim=6,
                      margin=margin, rng=np.random.default_rng(seed))


class TestEmbeddings:
    def test_sentence_unit_norm(self):
        m = tiny_model()
        v = embed_sentence(m, [3, 4, 0])
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_sentence_deterministic(self):
        m = tiny_model()
        a, b = embed_sentence(m, [3, 4, 0]), embed_sentence(m, [3, 4, 0])
        assert (a == b).all()

    def test_one_token_change_moves_embedding(self):
        m = tiny_model()
        a, b = embed_sentence(m, [3, 4, 0]), embed_sentence(m, [3, 5, 0])
        assert cosine(a, b) < 1.0

    def test_empty_sentence_rejected(self):
        with pytest.raises(ValueError):
            embed_sentence(tiny_model(), [])

    def test_image_unit_norm(self):
        m = tiny_model()
        v = embed_image(m, np.arange(5.0))
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_image_homogeneity(self):
        # no bias on the image map, so scaling the feature cancels out
        m = tiny_model()
        f = np.array([0.3, -1.0, 2.0, 0.1, 0.7])
        np.testing.assert_allclose(embed_image(m, f), embed_image(m, 2.0 * f),
                                   atol=1e-12)

    def test_distinct_scenes_distinct_embeddings(self):
        m = EmbedModel(vocab_size=52, feature_dim=64, word_dim=4, embed_dim=6,
                       margin=0.2, rng=np.random.default_rng(0))
        train, _, _, _ = generate_dataset(seed=4, n_train=10, n_val=1, n_test=1)
        embs = [embed_image(m, ex.feature) for ex in train]
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                assert not np.allclose(embs[i], embs[j])

    def test_zero_norm_reported(self):
        m = tiny_model()
        m.store.entry("img_map").value[...] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            embed_image(m, np.ones(5))


class TestRankingLoss:
    def test_hand_hinge_term(self):
        # only the image-anchor (i=0, negative j=1) hinge is active:
        # max(0, 0.2 - 0.3 + 0.4) = 0.3
        scores = np.array([[0.3, 0.4], [0.0, 0.9]])
        assert ranking_hinge_total(scores, margin=0.2) == pytest.approx(0.3)

    def test_separated_batch_zero_loss(self):
        scores = np.eye(3)  # positives 1, negatives 0 <= 1 - margin
        assert ranking_hinge_total(scores, margin=0.2) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores = rng.uniform(-1, 1, size=(4, 4))
            assert ranking_hinge_total(scores, margin=0.2) >= 0.0

    def test_tape_loss_matches_score_matrix_arithmetic(self):
        m = tiny_model(seed=3)
        rng = np.random.default_rng(1)
        feats = [rng.normal(size=5) for _ in range(4)]
        sents = [[3, 4, 0], [5, 0], [6, 7, 8, 0], [9, 3, 0]]
        imgs = [embed_image(m, f) for f in feats]
        embs = [embed_sentence(m, s) for s in sents]
        scores = np.array([[i @ s for s in embs] for i in imgs])
        expected = ranking_hinge_total(scores, m.margin)
        got = ranking_loss(m, list(zip(feats, sents)))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_batch_of_one_rejected(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            ranking_loss(m, [(np.ones(5), [3, 0])])

    def test_gradient_matches_finite_differences(self):
        assert suite_embedding(range(5)) < 1e-6


class TestReward:
    def test_cosine_self_similarity(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_cosine_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0

    def test_reward_in_range(self):
        m = tiny_model()
        rng = np.random.default_rng(2)
        for _ in range(10):
            r = reward(m, rng.normal(size=5), [3, 4, 0])
            assert -1.0 <= r <= 1.0

    def test_reward_feature_rescaling_invariance(self):
        m = tiny_model()
        f = np.array([0.3, -1.0, 2.0, 0.1, 0.7])
        assert reward(m, f, [4, 0]) == pytest.approx(reward(m, 3.0 * f, [4, 0]),
                                                     abs=1e-12)


class TestTraining:
    @pytest.fixture(scope="class")
    def trained(self):
        train, val, _, vocab = generate_dataset(seed=13, n_train=120, n_val=40,
                                                n_test=1)
        model, curve = train_embedding(
            train, vocab_size=len(vocab), feature_dim=64, word_dim=32,
            embed_dim=64, margin=0.2, epochs=12, lr=3e-3, seed=13,
            val_examples=val)
        return model, curve, train, val

    def test_loss_decreases(self, trained):
        _, curve, _, _ = trained
        assert curve[-1]["train_loss"] < curve[0]["train_loss"]
        assert curve[-1]["val_loss"] < curve[0]["val_loss"]

    def test_recall_beats_chance(self, trained):
        model, _, _, val = trained
        assert recall_at_1(model, val) > 5.0 / len(val)

    def test_mean_ranking_loss_runs(self, trained):
        model, _, _, val = trained
        loss = mean_ranking_loss(model, val, np.random.default_rng(0))
        assert np.isfinite(loss) and loss >= 0.0
