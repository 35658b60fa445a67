"""Synthetic corpus: determinism, vocabulary closure, captions, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dimo.corpus import (ADVERBS, FUNCTION_WORDS, NULL, PAD, SEP, MASK, PRIMITIVE_NAMES,
                         VERB_TABLE, VERB_TO_PRIMITIVE, CorpusConfig, VocabularyError,
                         build_vocab, generate_corpus, generate_record, load_corpus,
                         load_vocab, save_corpus, save_vocab, split_of, tokenize_caption,
                         verb_set)


def test_special_token_ids():
    assert (PAD, MASK, SEP, NULL) == (0, 1, 2, 3)
    v = build_vocab()
    assert v.tokens[:4] == ["[PAD]", "[MASK]", "[SEP]", "[NULL]"]


def test_verb_table_is_bijective_onto_primitives():
    assert set(VERB_TABLE) == set(PRIMITIVE_NAMES)
    all_verbs = [v for vs in VERB_TABLE.values() for v in vs]
    assert len(all_verbs) == len(set(all_verbs))  # no verb serves two primitives
    assert set(VERB_TO_PRIMITIVE.values()) == set(PRIMITIVE_NAMES)


def test_vocab_verb_ids_complete():
    v = build_vocab()
    verbs = {v.tokens[i] for i in v.verb_ids}
    assert verbs == set(VERB_TO_PRIMITIVE)
    for w in FUNCTION_WORDS + ADVERBS:
        assert not v.is_verb(v.id_of(w))


def test_generate_record_deterministic_and_order_independent():
    cfg = CorpusConfig()
    v = build_vocab()
    a = generate_record(0, 17, cfg, v)
    b = generate_record(0, 17, cfg, v)
    np.testing.assert_array_equal(a.clip.data, b.clip.data)
    assert a.caption_text == b.caption_text
    # a record does not depend on which other indices were generated before it
    corpus = generate_corpus(0, 20, cfg, v)
    np.testing.assert_array_equal(corpus[17].clip.data, a.clip.data)


def test_records_differ_across_indices_and_seeds():
    cfg = CorpusConfig()
    v = build_vocab()
    a = generate_record(0, 0, cfg, v)
    b = generate_record(0, 1, cfg, v)
    c = generate_record(1, 0, cfg, v)
    assert not np.array_equal(a.clip.data, b.clip.data)
    assert not np.array_equal(a.clip.data, c.clip.data)


def test_caption_verbs_match_primitives(corpus):
    for rec in corpus[:100]:
        caption_prims = [VERB_TO_PRIMITIVE[w] for w in rec.caption_text.split()
                         if w in VERB_TO_PRIMITIVE]
        assert caption_prims == rec.primitives


def test_clip_shapes_and_budget(corpus):
    cfg = CorpusConfig()
    for rec in corpus[:100]:
        assert rec.clip.channels == cfg.channels
        assert rec.clip.frames <= cfg.max_frames
        assert rec.clip.frames >= cfg.min_duration
        assert np.isfinite(rec.clip.data).all()


def test_split_fractions(corpus):
    frac = {s: sum(r.split == s for r in corpus) / len(corpus)
            for s in ("train", "val", "test")}
    assert abs(frac["train"] - 0.8) < 0.06
    assert abs(frac["val"] - 0.1) < 0.05
    assert abs(frac["test"] - 0.1) < 0.05


def test_split_of_stable():
    assert split_of("rec00000") == split_of("rec00000")
    seen = {split_of(f"rec{i:05d}") for i in range(200)}
    assert seen == {"train", "val", "test"}


def test_tokenize_caption_pads_and_truncates():
    v = build_vocab()
    ids = tokenize_caption("a person walks", v, 6)
    assert len(ids) == 6
    assert ids[3:] == [PAD, PAD, PAD]
    assert ids[:3] == [v.id_of("a"), v.id_of("person"), v.id_of("walks")]
    long = tokenize_caption("a person walks then runs", v, 2)
    assert long == [v.id_of("a"), v.id_of("person")]


def test_tokenize_rejects_unknown_word():
    v = build_vocab()
    with pytest.raises(VocabularyError):
        tokenize_caption("a person moonwalks", v, 12)


def test_verb_set_extraction():
    v = build_vocab()
    ids = tokenize_caption("a person walks then walks then jumps", v, 12)
    assert verb_set(ids, v) == {v.id_of("walks"), v.id_of("jumps")}


def test_corpus_tsv_roundtrip(tmp_path, corpus):
    subset = corpus[:20]
    path = str(tmp_path / "c.tsv")
    save_corpus(subset, path)
    loaded = load_corpus(path, build_vocab(), CorpusConfig().max_caption_len)
    assert len(loaded) == len(subset)
    for a, b in zip(subset, loaded):
        assert (a.id, a.split, a.caption_text, a.primitives) == \
               (b.id, b.split, b.caption_text, b.primitives)
        np.testing.assert_array_equal(a.clip.data, b.clip.data)  # float32-exact
        assert a.caption_tokens == b.caption_tokens


def test_vocab_file_roundtrip(tmp_path):
    v = build_vocab()
    path = str(tmp_path / "v.txt")
    save_vocab(v, path)
    assert load_vocab(path).tokens == v.tokens


@given(st.integers(0, 1000), st.integers(0, 50))
@settings(max_examples=20, deadline=None)
def test_caption_length_bounded(seed, index):
    cfg = CorpusConfig()
    v = build_vocab()
    rec = generate_record(seed, index, cfg, v)
    assert len(rec.caption_text.split()) <= cfg.max_caption_len
    assert len(rec.caption_tokens) == cfg.max_caption_len
