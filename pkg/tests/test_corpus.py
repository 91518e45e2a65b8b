import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgvrg.corpus import (
    SPECIALS, CorpusError, ImageRecord, Region, Triple, Vocabularies, build_vocabularies, category_prototypes,
    extract_triples, generate_toy_corpus, generate_toy_records, label_tags, load_corpus, normalize_token,
    relations_between, write_corpus,
)

from conftest import FIXTURE


def _record(image_id="img", bbox=(0, 0, 10, 10), feature=(0.1, 0.2), caption="a cat on a table"):
    return {
        "image_id": image_id, "width": 20, "height": 20,
        "regions": [{"bbox": list(bbox), "label": "cat", "feature": list(feature)}],
        "captions": [caption],
    }


def _write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def fig3_vocab() -> Vocabularies:
    return Vocabularies(list(SPECIALS) + "a woman in hat feeding giraffe".split(),
                        ["giraffe", "hat", "woman"], ["in", "feed"])


# -- loading -------------------------------------------------------------------


def test_load_two_records(tmp_path):
    recs = load_corpus(_write_jsonl(tmp_path / "c.jsonl", [_record("a"), _record("b")]))
    assert [r.image_id for r in recs] == ["a", "b"]
    assert recs[0].captions == [["a", "cat", "on", "a", "table"]]


def test_degenerate_bbox_names_field(tmp_path):
    with pytest.raises(CorpusError, match="bbox"):
        load_corpus(_write_jsonl(tmp_path / "c.jsonl", [_record(bbox=(5, 0, 5, 10))]))


def test_bbox_outside_image(tmp_path):
    with pytest.raises(CorpusError, match="bbox"):
        load_corpus(_write_jsonl(tmp_path / "c.jsonl", [_record(bbox=(0, 0, 30, 10))]))


def test_mixed_feature_dims(tmp_path):
    recs = [_record("a", feature=[0.0] * 32), _record("b", feature=[0.0] * 64)]
    with pytest.raises(CorpusError, match="dimension"):
        load_corpus(_write_jsonl(tmp_path / "c.jsonl", recs))


def test_missing_field_and_empty_caption(tmp_path):
    bad = _record()
    del bad["captions"]
    with pytest.raises(CorpusError, match="captions"):
        load_corpus(_write_jsonl(tmp_path / "c.jsonl", [bad]))
    with pytest.raises(CorpusError, match="captions"):
        load_corpus(_write_jsonl(tmp_path / "d.jsonl", [_record(caption="   ")]))


def test_write_then_load_round_trip(tmp_path):
    recs = load_corpus(FIXTURE)
    write_corpus(recs, tmp_path / "copy.jsonl")
    back = load_corpus(tmp_path / "copy.jsonl")
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    for a, b in zip(recs, back):
        assert a.captions == b.captions
        for ra, rb in zip(a.regions, b.regions):
            assert ra.bbox == rb.bbox and ra.label == rb.label
            np.testing.assert_array_equal(ra.feature, rb.feature)


# -- tokens and vocabularies --------------------------------------------------------


@pytest.mark.parametrize("token,key", [
    ("feeding", "feed"), ("fed", "fed"), ("running", "run"), ("flying", "fly"), ("sits", "sit"),
    ("holds", "hold"), ("glass", "glass"), ("on", "on"), ("rides", "rid"), ("riding", "rid"),
])
def test_normalize_token(token, key):
    assert normalize_token(token) == key


def test_fixture_vocabulary_frozen(toy_corpus, toy_vocab):
    assert toy_vocab.words == list(SPECIALS) + ["a", "book", "cat", "chair", "cup", "dog", "in", "left", "of",
                                                "on", "table"]
    assert toy_vocab.object_categories == ["book", "cat", "chair", "cup", "dog", "table"]
    assert toy_vocab.predicate_lexicon == ["left of", "on", "in"]


def test_vocab_is_pure_function_of_corpus(toy_corpus, toy_vocab):
    again = build_vocabularies(toy_corpus)
    assert again.to_json() == toy_vocab.to_json()


def test_vocab_json_round_trip(tmp_path, toy_vocab):
    toy_vocab.save(tmp_path / "v.json")
    back = Vocabularies.load(tmp_path / "v.json")
    assert back.to_json() == toy_vocab.to_json()
    assert back.eos == SPECIALS.index("<eos>")


def _corpus_with_counts(counts):
    recs = []
    for k, (pred, n) in enumerate(counts):
        for m in range(n):
            regions = [Region((0, 0, 5, 5), "cup", np.zeros(2, np.float32)),
                       Region((5, 5, 9, 9), "desk", np.zeros(2, np.float32))]
            recs.append(ImageRecord(f"{k}-{m}", 10, 10, regions, [["a", "cup", pred, "a", "desk"]]))
    return recs


def test_predicate_cap_by_frequency():
    vocab = build_vocabularies(_corpus_with_counts([("on", 10), ("under", 2)]), predicate_cap=1)
    assert vocab.predicate_lexicon == ["on"]


def test_predicate_cap_tie_break():
    vocab = build_vocabularies(_corpus_with_counts([("on", 3), ("in", 3)]), predicate_cap=1)
    assert vocab.predicate_lexicon == ["in"]


def test_min_word_frequency():
    recs = _corpus_with_counts([("on", 3), ("beneath", 1)])
    vocab = build_vocabularies(recs, min_word_freq=2)
    assert "beneath" not in vocab.words and "on" in vocab.words
    assert vocab.encode(["beneath"]) == [vocab.unk]


# -- triples and tags -------------------------------------------------------------


def test_fig3_triples():
    caption = "a woman in a hat feeding a giraffe".split()
    got = [(t.subject, t.predicate, t.object) for t in extract_triples(caption, fig3_vocab())]
    assert got == [("woman", "in", "hat"), ("woman", "feed", "giraffe")]


def test_no_category_tokens():
    assert extract_triples("a sunny day outside".split(), fig3_vocab()) == []


def test_cake_on_desk():
    vocab = Vocabularies(list(SPECIALS) + ["cake", "on", "desk"], ["cake", "desk"], ["on"])
    assert extract_triples(["cake", "on", "desk"], vocab) == [Triple("cake", "on", "desk", 0)]


def test_ambiguous_span_yields_nothing():
    vocab = Vocabularies(list(SPECIALS), ["cup", "desk"], ["on", "near"])
    assert extract_triples("cup on near desk".split(), vocab) == []


def test_longest_match_wins():
    vocab = Vocabularies(list(SPECIALS), ["bird", "water"], ["over", "flying over"])
    got = extract_triples("a bird flying over water".split(), vocab)
    assert [(t.subject, t.predicate, t.object) for t in got] == [("bird", "flying over", "water")]


def test_label_tags_examples():
    vocab = Vocabularies(list(SPECIALS), ["bird", "water", "woman", "hat"], ["flying over", "in"])
    assert label_tags("a bird flying over water".split(), vocab) == ["none", "object", "predicate", "predicate",
                                                                     "object"]
    assert label_tags("a the of".split(), vocab) == ["none", "none", "none"]
    assert label_tags("woman in hat".split(), vocab) == ["object", "predicate", "object"]


ADJECTIVES = ["big", "small", "red", "old", "striped"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(ADJECTIVES + [None]), min_size=3, max_size=3))
def test_adjectives_do_not_change_triples(adjs):
    base = "a woman in a hat feeding a giraffe".split()
    out = []
    det = 0
    for tok in base:
        out.append(tok)
        if tok == "a":
            if adjs[det] is not None:
                out.append(adjs[det])
            det += 1
    vocab = fig3_vocab()
    assert extract_triples(out, vocab) == extract_triples(base, vocab)


def test_triples_agree_with_tags(toy_corpus, toy_vocab):
    for rec in toy_corpus:
        for cap in rec.captions:
            tags = label_tags(cap, toy_vocab)
            assert len(tags) == len(cap)
            for t in extract_triples(cap, toy_vocab):
                assert tags[cap.index(t.subject)] == "object"
                assert tags[cap.index(t.object)] == "object"
                for tok in t.predicate.split():
                    assert tags[cap.index(tok)] == "predicate"


# -- toy generator ---------------------------------------------------------------


def test_toy_generation_is_byte_identical(tmp_path):
    generate_toy_corpus(tmp_path / "a.jsonl", 7)
    generate_toy_corpus(tmp_path / "b.jsonl", 7)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_committed_fixture_matches_generator(tmp_path):
    generate_toy_corpus(tmp_path / "toy.jsonl", 7, num_images=20, num_categories=6, num_predicates=3, feature_dim=32)
    assert (tmp_path / "toy.jsonl").read_bytes() == FIXTURE.read_bytes()


def test_zero_noise_features_are_prototypes():
    recs = generate_toy_records(3, num_images=5, noise=0.0)
    protos = category_prototypes(3, 6, 32)
    cats = sorted({r.label for rec in recs for r in rec.regions})
    for rec in recs:
        for r in rec.regions:
            idx = [c for c in ("cat", "dog", "table", "chair", "cup", "book")].index(r.label)
            np.testing.assert_allclose(r.feature, np.round(protos[idx], 6), atol=1e-6)
    assert cats


def test_toy_images_have_exactly_one_true_relation():
    for rec in generate_toy_records(11, num_images=30):
        true = [(u, v, p) for u, ru in enumerate(rec.regions) for v, rv in enumerate(rec.regions) if u != v
                for p in relations_between(ru.bbox, rv.bbox, 3)]
        assert len(true) == 1
