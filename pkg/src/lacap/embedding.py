"""Joint image/sentence embedding with a bidirectional hinge ranking loss.

Both sides are L2-normalized, so a plain dot product between them is the
cosine similarity used as the training-time reward signal. The image map
has no bias, which makes the normalized output invariant to positive
rescaling of the feature vector.
"""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError, Tape
from .nn import GruCell, ParamStore, adam_update, uniform_init


def cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm embedding; cosine undefined")
    return float(u @ v) / (nu * nv)


def ranking_hinge_total(scores, margin):
    """Both hinge directions from a (B, B) image-by-sentence score matrix;
    diagonal entries are the positives."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            total += max(0.0, margin - scores[i, i] + scores[i, j])  # caption negatives
            total += max(0.0, margin - scores[j, j] + scores[i, j])  # image negatives
    return total


class EmbedModel:
    def __init__(self, vocab_size, feature_dim, word_dim, embed_dim, margin, rng):
        if margin <= 0:
            raise ValueError("margin must be positive")
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.word_dim = word_dim
        self.embed_dim = embed_dim
        self.margin = margin
        self.store = ParamStore()
        uniform_init(self.store, "word_emb", (vocab_size, word_dim), rng)
        self.gru = GruCell(self.store, "gru", word_dim, embed_dim, rng)
        uniform_init(self.store, "img_map", (feature_dim, embed_dim), rng)

    def meta(self):
        return {"vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
                "word_dim": self.word_dim, "embed_dim": self.embed_dim,
                "margin": self.margin}

    @classmethod
    def from_meta(cls, meta):
        return cls(meta["vocab_size"], meta["feature_dim"], meta["word_dim"],
                   meta["embed_dim"], meta["margin"], np.random.default_rng(0))

    # ---- tape-level forward ------------------------------------------

    def sentence_node(self, tape, tokens):
        if len(tokens) == 0:
            raise ValueError("cannot embed an empty sentence")
        table = tape.param(self.store, "word_emb")
        h = self.gru.zero_state(tape)
        for tok in tokens:
            h = self.gru.step(tape, self.store, tape.rows(table, int(tok)), h)
        return tape.normalize(h)

    def image_node(self, tape, feature):
        raw = tape.matmul(tape.const(feature), tape.param(self.store, "img_map"))
        return tape.normalize(raw)

    def sentence_nodes_batch(self, tape, sentences):
        """Unit embeddings for several sentences, GRU run in lockstep."""
        if any(len(s) == 0 for s in sentences):
            raise ValueError("cannot embed an empty sentence")
        batch = len(sentences)
        table = tape.param(self.store, "word_emb")
        h = tape.const(np.zeros((batch, self.embed_dim)))
        compact = list(range(batch))
        raw = [None] * batch
        for t in range(max(len(s) for s in sentences)):
            finished = [i for i in compact if len(sentences[i]) == t]
            for i in finished:
                raw[i] = tape.rows(h, compact.index(i))
            alive = [i for i in compact if len(sentences[i]) > t]
            if alive != compact:
                h = tape.rows(h, [compact.index(i) for i in alive])
                compact = alive
            x = tape.rows(table, [int(sentences[i][t]) for i in compact])
            h = self.gru.step(tape, self.store, x, h)
        for i in compact:
            raw[i] = tape.rows(h, compact.index(i))
        return [tape.normalize(v) for v in raw]

    def ranking_loss_node(self, tape, features, sentences):
        """Sum of both hinge directions with all in-batch negatives."""
        if len(features) != len(sentences) or len(features) < 2:
            raise ValueError("ranking loss needs >= 2 aligned pairs")
        n = len(features)
        imgs = [self.image_node(tape, f) for f in features]
        sents = self.sentence_nodes_batch(tape, sentences)
        img_mat = tape.stack(imgs)
        sent_mat = tape.stack(sents)
        total = tape.const(np.asarray(0.0))
        for i in range(n):
            mask = np.ones(n)
            mask[i] = 0.0
            pos = tape.dot(imgs[i], sents[i])
            shift = tape.add(tape.scale(pos, -1.0), self.margin)
            # image anchor: its caption vs the other captions
            row_s = tape.matmul(sent_mat, imgs[i])
            total = tape.add(total, tape.sum(
                tape.mul(tape.relu(tape.add(row_s, shift)), tape.const(mask))))
            # sentence anchor: its image vs the other images
            row_i = tape.matmul(img_mat, sents[i])
            total = tape.add(total, tape.sum(
                tape.mul(tape.relu(tape.add(row_i, shift)), tape.const(mask))))
        return total

    # ---- value-level API ----------------------------------------------

    def embed_sentence(self, tokens):
        try:
            return self.sentence_node(Tape(), tokens).value
        except NonFiniteError as e:
            raise ValueError("zero-norm sentence embedding") from e

    def embed_image(self, feature):
        try:
            return self.image_node(Tape(), feature).value
        except NonFiniteError as e:
            raise ValueError("zero-norm image embedding") from e

    def reward(self, feature, tokens):
        """Cosine similarity between the image and the generated sentence."""
        return cosine(self.embed_image(feature), self.embed_sentence(tokens))


# spec-surface wrappers -----------------------------------------------------

def embed_sentence(model, sentence):
    return model.embed_sentence(sentence)


def embed_image(model, feature):
    return model.embed_image(feature)


def ranking_loss(model, batch):
    """Forward value of the loss on [(feature, sentence), ...]."""
    tape = Tape()
    feats = [f for f, _ in batch]
    sents = [s for _, s in batch]
    return float(model.ranking_loss_node(tape, feats, sents).value)


def reward(model, feature, sentence):
    return model.reward(feature, sentence)


# ---- training ---------------------------------------------------------------

def mean_ranking_loss(model, examples, rng):
    """Per-pair mean loss over non-overlapping batches of 32 scenes."""
    idx = rng.permutation(len(examples))
    losses, pairs = 0.0, 0
    for start in range(0, len(idx) - 1, 32):
        chunk = idx[start:start + 32]
        if len(chunk) < 2:
            continue
        batch = [(examples[i].feature,
                  examples[i].references[rng.integers(len(examples[i].references))])
                 for i in chunk]
        losses += ranking_loss(model, batch)
        pairs += len(chunk)
    return losses / max(pairs, 1)


def train_embedding(train_examples, vocab_size, feature_dim, word_dim,
                    embed_dim, margin, epochs, lr, seed, batch_size=32,
                    val_examples=None):
    """Adam on the in-batch ranking loss; one caption sampled per scene per
    epoch so a batch never pairs a scene against its own captions."""
    rng = np.random.default_rng([seed, 50])
    model = EmbedModel(vocab_size, feature_dim, word_dim, embed_dim, margin, rng)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_examples))
        epoch_loss, epoch_pairs = 0.0, 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < 2:
                continue
            feats, sents = [], []
            for i in chunk:
                ex = train_examples[i]
                feats.append(ex.feature)
                sents.append(ex.references[rng.integers(len(ex.references))])
            tape = Tape()
            loss = model.ranking_loss_node(tape, feats, sents)
            tape.backward(loss)
            adam_update(model.store, lr=lr)
            epoch_loss += float(loss.value)
            epoch_pairs += len(chunk)
        row = {"epoch": epoch, "train_loss": epoch_loss / max(epoch_pairs, 1)}
        if val_examples is not None:
            row["val_loss"] = mean_ranking_loss(
                model, val_examples, np.random.default_rng([seed, 51, epoch]))
        curve.append(row)
    return model, curve


def recall_at_1(model, examples):
    """Sentence-to-image retrieval accuracy using each scene's first caption."""
    imgs = np.stack([model.embed_image(ex.feature) for ex in examples])
    hits = 0
    for i, ex in enumerate(examples):
        s = model.embed_sentence(ex.references[0])
        if int(np.argmax(imgs @ s)) == i:
            hits += 1
    return hits / len(examples)
