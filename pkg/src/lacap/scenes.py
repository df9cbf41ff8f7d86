"""Synthetic scene world: symbolic scenes, a frozen feature encoder, and a
template caption grammar with synonym substitution.

Everything is a pure function of its seed; the encoder's random projection
is frozen per seed, and caption realization depends only on the scene's
attributes, never on its id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

EOS, UNK, PAD = "<eos>", "<unk>", "<pad>"

SHAPES = ("ball", "cube", "disk", "ring", "block", "cone", "star", "pyramid")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
SIZES = ("small", "big")
RELATIONS = ("left-of", "on", "near", "none")

# canonical word first; later entries are interchangeable synonyms
SHAPE_FORMS = {
    "ball": ("ball", "sphere"), "cube": ("cube", "box"),
    "disk": ("disk", "disc"), "ring": ("ring", "hoop"),
    "block": ("block", "brick"), "cone": ("cone", "spike"),
    "star": ("star", "burst"), "pyramid": ("pyramid", "wedge"),
}
COLOR_FORMS = {
    "red": ("red", "crimson"), "blue": ("blue", "azure"),
    "green": ("green", "jade"), "yellow": ("yellow", "gold"),
    "purple": ("purple", "violet"), "orange": ("orange", "amber"),
}
SIZE_FORMS = {"small": ("small", "little", "tiny"), "big": ("big", "large", "huge")}
RELATION_FORMS = {"left-of": (("left", "of"),), "on": (("on",), ("atop",)),
                  "near": (("near",), ("beside",), ("by",))}
ARTICLES = ("a", "the")
VERBS = ("sits", "rests", "lies")

MAX_CAPTION_LEN = 12  # token ids per reference, <eos> included
MIN_REFERENCES = 5


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple
    relation: str

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ValueError(f"scene needs 1-3 objects, got {len(self.objects)}")
        if (self.relation == "none") != (len(self.objects) < 2):
            raise ValueError("relation is 'none' exactly when fewer than 2 objects")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")

    def attr_key(self):
        return (tuple((o.shape, o.color, o.size) for o in self.objects),
                self.relation)


@dataclass
class CaptionedExample:
    scene: Scene
    feature: np.ndarray
    references: list  # token-id sequences, each ending in <eos>


class Vocab:
    """Token/id bijection; ids 0, 1, 2 are <eos>, <unk>, <pad>."""

    def __init__(self, tokens):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens")
        if self.id_to_token[:3] != [EOS, UNK, PAD]:
            raise ValueError("reserved tokens must sit at ids 0, 1, 2")

    eos_id, unk_id, pad_id = 0, 1, 2

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, words):
        return [self.token_to_id.get(w, self.unk_id) for w in words]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]


def build_vocab():
    """The grammar's full surface vocabulary; independent of any dataset."""
    tokens = [EOS, UNK, PAD]
    tokens += list(ARTICLES)
    tokens += ["there", "is"] + list(VERBS) + ["and"]
    for forms in SIZE_FORMS.values():
        tokens += list(forms)
    for forms in COLOR_FORMS.values():
        tokens += list(forms)
    for forms in SHAPE_FORMS.values():
        tokens += list(forms)
    seen = set(tokens)
    for variants in RELATION_FORMS.values():
        for variant in variants:
            for w in variant:
                if w not in seen:
                    tokens.append(w)
                    seen.add(w)
    return Vocab(tokens)


# ---- caption grammar ------------------------------------------------------

def _np_words(obj, rng=None):
    """Noun phrase for one object; canonical when rng is None."""
    if rng is None:
        return ["a", obj.size, obj.color, obj.shape]
    return [ARTICLES[rng.integers(2)],
            SIZE_FORMS[obj.size][rng.integers(len(SIZE_FORMS[obj.size]))],
            COLOR_FORMS[obj.color][rng.integers(len(COLOR_FORMS[obj.color]))],
            SHAPE_FORMS[obj.shape][rng.integers(len(SHAPE_FORMS[obj.shape]))]]


def _relation_words(relation, rng=None):
    variants = RELATION_FORMS[relation]
    pick = variants[0] if rng is None else variants[rng.integers(len(variants))]
    return list(pick)


def _pair_caption(o1, o2, relation, rng=None, verb=None):
    words = _np_words(o1, rng)
    if verb:
        words.append(verb)
    words += _relation_words(relation, rng) + _np_words(o2, rng)
    return words


def realize_captions(scene, grammar_seed):
    """At least five faithful references as word lists ending in <eos>.

    The first reference always uses canonical surface forms. Realization
    depends only on (attributes, seed), so equal-attribute scenes share
    their reference sets.
    """
    attrs_entropy = [grammar_seed]
    for o in scene.objects:
        attrs_entropy += [SHAPES.index(o.shape), COLORS.index(o.color),
                          SIZES.index(o.size)]
    attrs_entropy.append(RELATIONS.index(scene.relation))
    rng = np.random.default_rng(attrs_entropy)

    objs = scene.objects
    refs = []
    if len(objs) == 1:
        o = objs[0]
        refs.append(_np_words(o))
        refs.append(["the"] + _np_words(o)[1:])
        refs.append(["there", "is"] + _np_words(o))
        while len(refs) < MIN_REFERENCES:
            refs.append(_np_words(o, rng))
    else:
        o1, o2 = objs[0], objs[1]
        refs.append(_pair_caption(o1, o2, scene.relation))
        refs.append(["the"] + _pair_caption(o1, o2, scene.relation)[1:])
        refs.append(_pair_caption(o1, o2, scene.relation, rng,
                                  verb=VERBS[rng.integers(len(VERBS))]))
        if len(objs) == 3:
            refs.append(_np_words(objs[2]))
            refs.append(_np_words(objs[2], rng))
        while len(refs) < MIN_REFERENCES:
            refs.append(_pair_caption(o1, o2, scene.relation, rng))
    refs = [r + [EOS] for r in refs]
    assert all(len(r) <= MAX_CAPTION_LEN for r in refs)
    return refs


class CaptionParseError(ValueError):
    pass


def _lookup(table, word):
    for canonical, forms in table.items():
        if word in forms:
            return canonical
    return None


def parse_caption(words):
    """Recover (objects, relation) from one grammar-generated reference.

    Oracle for faithfulness checks: raises CaptionParseError on anything
    the grammar could not have emitted.
    """
    toks = list(words)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    pos = 0

    def eat(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise CaptionParseError("caption ended early")
        w = toks[pos]
        if expected is not None and w != expected:
            raise CaptionParseError(f"expected {expected!r}, got {w!r}")
        pos += 1
        return w

    def eat_np():
        nonlocal pos
        if pos >= len(toks) or toks[pos] not in ARTICLES:
            raise CaptionParseError(f"expected article at position {pos}")
        pos += 1
        size = _lookup(SIZE_FORMS, eat())
        color = _lookup(COLOR_FORMS, eat())
        shape = _lookup(SHAPE_FORMS, eat())
        if None in (size, color, shape):
            raise CaptionParseError(f"bad noun phrase near {toks[max(pos - 3, 0):pos]}")
        return SceneObject(shape=shape, color=color, size=size)

    if toks[pos:pos + 2] == ["there", "is"]:
        pos += 2
    first = eat_np()
    if pos == len(toks):
        return (first,), "none"
    if toks[pos] in VERBS:
        pos += 1
    rel_word = eat()
    if rel_word == "left":
        eat("of")
        relation = "left-of"
    else:
        relation = _lookup({k: tuple(v[0] for v in vs) for k, vs in RELATION_FORMS.items()
                            if k != "left-of"}, rel_word)
        if relation is None:
            raise CaptionParseError(f"unknown relation word {rel_word!r}")
    second = eat_np()
    if pos != len(toks):
        raise CaptionParseError(f"trailing words {toks[pos:]}")
    return (first, second), relation


# ---- frozen feature encoder ----------------------------------------------

_TRIPLE_INDEX = {(s, c, z): i for i, (s, c, z) in enumerate(
    (s, c, z) for s in SHAPES for c in COLORS for z in SIZES)}
ATTR_DIM = len(_TRIPLE_INDEX) + len(RELATIONS)

_projection_cache = {}


def _projection(encoder_seed, feature_dim):
    key = (encoder_seed, feature_dim)
    if key not in _projection_cache:
        rng = np.random.default_rng([encoder_seed, 17])
        proj = rng.normal(0.0, 0.5, size=(ATTR_DIM, feature_dim))
        bias = rng.normal(0.0, 0.1, size=feature_dim)
        _projection_cache[key] = (proj, bias)
    return _projection_cache[key]


def encode_scene(scene, encoder_seed, feature_dim=64, noise_sigma=0.0, rng=None):
    """Bag of joint (shape, color, size) triples plus a relation one-hot,
    pushed through a frozen seeded projection. No call-time randomness
    unless noise is explicitly enabled."""
    bag = np.zeros(ATTR_DIM)
    for o in scene.objects:
        bag[_TRIPLE_INDEX[(o.shape, o.color, o.size)]] += 1.0
    bag[len(_TRIPLE_INDEX) + RELATIONS.index(scene.relation)] = 1.0
    proj, bias = _projection(encoder_seed, feature_dim)
    feat = bag @ proj + bias
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise requires an explicit rng")
        feat = feat + rng.normal(0.0, noise_sigma, size=feature_dim)
    return feat


# ---- dataset generation ----------------------------------------------------

def scene_capacity():
    n = len(_TRIPLE_INDEX)
    pairs_plus = 3 * (n ** 2) + 3 * (n ** 3)  # ordered multi-object scenes
    return n + pairs_plus


def _sample_scene(rng, scene_id, count_probs):
    n_objects = int(rng.choice([1, 2, 3], p=count_probs))
    objects = tuple(SceneObject(shape=SHAPES[rng.integers(len(SHAPES))],
                                color=COLORS[rng.integers(len(COLORS))],
                                size=SIZES[rng.integers(len(SIZES))])
                    for _ in range(n_objects))
    relation = "none" if n_objects < 2 else \
        RELATIONS[rng.integers(3)]
    return Scene(scene_id=scene_id, objects=objects, relation=relation)


def generate_dataset(seed, n_train, n_val, n_test, feature_dim=64,
                     count_probs=(0.4, 0.4, 0.2), noise_sigma=0.0):
    """Three disjoint splits of captioned scenes plus the shared vocab."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one scene")
    total = n_train + n_val + n_test
    if total > scene_capacity():
        raise ValueError(
            f"requested {total} scenes exceeds distinct-scene capacity "
            f"{scene_capacity()}")
    rng = np.random.default_rng([seed, 1])
    seen = set()
    scenes = []
    attempts = 0
    while len(scenes) < total:
        attempts += 1
        if attempts > 1000 * total:
            raise RuntimeError("scene sampling failed to find enough distinct scenes")
        scene = _sample_scene(rng, scene_id=len(scenes), count_probs=count_probs)
        key = scene.attr_key()
        if key in seen:
            continue
        seen.add(key)
        scenes.append(scene)

    vocab = build_vocab()
    noise_rng = np.random.default_rng([seed, 3]) if noise_sigma > 0 else None

    def realize(scene):
        refs = [vocab.encode(r) for r in realize_captions(scene, grammar_seed=seed)]
        feat = encode_scene(scene, encoder_seed=seed, feature_dim=feature_dim,
                            noise_sigma=noise_sigma, rng=noise_rng)
        return CaptionedExample(scene=scene, feature=feat, references=refs)

    examples = [realize(s) for s in scenes]
    train = examples[:n_train]
    val = examples[n_train:n_train + n_val]
    test = examples[n_train + n_val:]
    return train, val, test, vocab


# ---- file formats ----------------------------------------------------------

def scene_to_dict(scene):
    return {"scene_id": scene.scene_id,
            "objects": [{"shape": o.shape, "color": o.color, "size": o.size}
                        for o in scene.objects],
            "relation": scene.relation}


def scene_from_dict(d):
    return Scene(scene_id=d["scene_id"],
                 objects=tuple(SceneObject(**o) for o in d["objects"]),
                 relation=d["relation"])


def write_dataset(path, examples, vocab):
    with open(path, "w") as f:
        for ex in examples:
            line = {"scene": scene_to_dict(ex.scene),
                    "features": list(ex.feature),
                    "captions": [vocab.decode(r) for r in ex.references]}
            f.write(json.dumps(line) + "\n")


def read_dataset(path, vocab):
    examples = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            refs = [vocab.encode(c) for c in d["captions"]]
            examples.append(CaptionedExample(
                scene=scene_from_dict(d["scene"]),
                feature=np.asarray(d["features"], dtype=np.float64),
                references=refs))
    return examples


def write_vocab(path, vocab):
    with open(path, "w") as f:
        json.dump(vocab.token_to_id, f, indent=0, sort_keys=True)


def read_vocab(path):
    with open(path) as f:
        mapping = json.load(f)
    tokens = [None] * len(mapping)
    for tok, i in mapping.items():
        tokens[i] = tok
    return Vocab(tokens)
