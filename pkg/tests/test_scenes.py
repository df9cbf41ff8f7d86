"""Scene world: generation determinism, grammar faithfulness, encoder, IO."""

import json

import numpy as np
import pytest

from lacap import scenes
from lacap.scenes import (
    CaptionParseError, Scene, SceneObject, build_vocab, encode_scene,
    generate_dataset, parse_caption, read_dataset, read_vocab,
    realize_captions, scene_capacity, write_dataset, write_vocab,
)


def serialize(examples, vocab):
    return json.dumps([[scenes.scene_to_dict(e.scene), list(e.feature),
                        e.references] for e in examples])


@pytest.fixture(scope="module")
def small_splits():
    return generate_dataset(seed=11, n_train=500, n_val=100, n_test=100)


class TestVocab:
    def test_reserved_ids(self):
        v = build_vocab()
        assert v.token_to_id["<eos>"] == 0
        assert v.token_to_id["<unk>"] == 1
        assert v.token_to_id["<pad>"] == 2

    def test_size_in_range(self):
        assert 50 <= len(build_vocab()) <= 80

    def test_bijective(self):
        v = build_vocab()
        for i, tok in enumerate(v.id_to_token):
            assert v.token_to_id[tok] == i

    def test_unknown_word_maps_to_unk(self):
        v = build_vocab()
        assert v.encode(["zeppelin"]) == [v.unk_id]


class TestSceneType:
    def test_relation_none_iff_single_object(self):
        with pytest.raises(ValueError):
            Scene(0, (SceneObject("ball", "red", "small"),), "near")
        with pytest.raises(ValueError):
            Scene(0, (SceneObject("ball", "red", "small"),
                      SceneObject("cube", "blue", "big")), "none")

    def test_object_count_bounds(self):
        with pytest.raises(ValueError):
            Scene(0, (), "none")


class TestGeneration:
    def test_same_seed_byte_identical(self):
        a = generate_dataset(seed=3, n_train=30, n_val=5, n_test=5)
        b = generate_dataset(seed=3, n_train=30, n_val=5, n_test=5)
        for sa, sb in zip(a[:3], b[:3]):
            assert serialize(sa, a[3]) == serialize(sb, b[3])

    def test_different_seeds_differ(self):
        a = generate_dataset(seed=1, n_train=30, n_val=5, n_test=5)
        b = generate_dataset(seed=2, n_train=30, n_val=5, n_test=5)
        keys = lambda split: {e.scene.attr_key() for e in split}
        assert keys(a[0]) != keys(b[0])

    def test_splits_disjoint(self, small_splits):
        train, val, test, _ = small_splits
        ids = lambda split: {e.scene.scene_id for e in split}
        assert not ids(train) & ids(val)
        assert not ids(train) & ids(test)
        assert not ids(val) & ids(test)
        assert len(ids(train)) == 500 and len(ids(val)) == 100 == len(ids(test))

    def test_capacity_error(self):
        with pytest.raises(ValueError, match="capacity"):
            generate_dataset(seed=0, n_train=scene_capacity(), n_val=1, n_test=1)

    def test_references_well_formed(self, small_splits):
        train, _, _, vocab = small_splits
        for ex in train:
            assert len(ex.references) >= 5
            for ref in ex.references:
                assert len(ref) <= scenes.MAX_CAPTION_LEN
                assert ref[-1] == vocab.eos_id
                assert vocab.unk_id not in ref
                assert vocab.pad_id not in ref


class TestEncoder:
    def test_deterministic(self):
        s = Scene(0, (SceneObject("ball", "red", "small"),), "none")
        np.testing.assert_array_equal(encode_scene(s, 5), encode_scene(s, 5))

    def test_one_attribute_changes_feature(self):
        s1 = Scene(0, (SceneObject("ball", "red", "small"),), "none")
        s2 = Scene(0, (SceneObject("ball", "blue", "small"),), "none")
        assert not np.allclose(encode_scene(s1, 5), encode_scene(s2, 5))

    def test_feature_dim(self):
        s = Scene(0, (SceneObject("ball", "red", "small"),), "none")
        assert encode_scene(s, 5, feature_dim=64).shape == (64,)

    def test_noise_requires_rng(self):
        s = Scene(0, (SceneObject("ball", "red", "small"),), "none")
        with pytest.raises(ValueError):
            encode_scene(s, 5, noise_sigma=0.01)

    def test_relation_changes_feature(self):
        objs = (SceneObject("ball", "red", "small"),
                SceneObject("cube", "blue", "big"))
        s1 = Scene(0, objs, "on")
        s2 = Scene(0, objs, "near")
        assert not np.allclose(encode_scene(s1, 5), encode_scene(s2, 5))


class TestGrammar:
    def test_red_ball_tokens_present(self):
        s = Scene(0, (SceneObject("ball", "red", "small"),), "none")
        refs = realize_captions(s, grammar_seed=7)
        union = {w for r in refs for w in r}
        assert {"red", "ball"} <= union

    def test_all_end_with_eos(self):
        s = Scene(0, (SceneObject("cube", "blue", "big"),
                      SceneObject("star", "green", "small")), "on")
        for r in realize_captions(s, grammar_seed=7):
            assert r[-1] == "<eos>"

    def test_equal_attributes_equal_references(self):
        objs = (SceneObject("disk", "purple", "big"),)
        s1 = Scene(10, objs, "none")
        s2 = Scene(99, objs, "none")
        assert realize_captions(s1, 7) == realize_captions(s2, 7)

    def test_parser_roundtrip_two_objects(self):
        s = Scene(0, (SceneObject("cone", "orange", "small"),
                      SceneObject("ring", "yellow", "big")), "left-of")
        for r in realize_captions(s, grammar_seed=3):
            objs, rel = parse_caption(r)
            assert objs == s.objects
            assert rel == "left-of"

    def test_parser_recovers_attributes_from_any_reference(self):
        train, _, _, vocab = generate_dataset(seed=21, n_train=80, n_val=1, n_test=1)
        for ex in train:
            scene_objs = list(ex.scene.objects)
            for ref in ex.references:
                objs, rel = parse_caption(vocab.decode(ref))
                for o in objs:
                    assert o in scene_objs
                if len(objs) == 2:
                    assert (objs[0], objs[1]) == ex.scene.objects[:2]
                    assert rel == ex.scene.relation

    def test_parser_rejects_garbage(self):
        with pytest.raises(CaptionParseError):
            parse_caption(["ball", "red", "<eos>"])
        with pytest.raises(CaptionParseError):
            parse_caption(["a", "small", "red", "ball", "on", "<eos>"])


class TestIO:
    def test_dataset_roundtrip_lossless(self, tmp_path, small_splits):
        train, _, _, vocab = small_splits
        path = tmp_path / "train.jsonl"
        write_dataset(path, train[:40], vocab)
        back = read_dataset(path, vocab)
        assert serialize(train[:40], vocab) == serialize(back, vocab)

    def test_vocab_roundtrip(self, tmp_path):
        vocab = build_vocab()
        path = tmp_path / "vocab.json"
        write_vocab(path, vocab)
        back = read_vocab(path)
        assert back.id_to_token == vocab.id_to_token
