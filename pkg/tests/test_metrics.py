import math

import pytest
from hypothesis import assume, given, settings, strategies as st

from cgvrg.metrics import (
    bleu, build_idf, cider_d, cider_d_single, evaluate, gaussian_length_penalty, lcs_length, metric_tokenize, ngrams,
    rouge_l, rouge_l_corpus,
)
from cgvrg.selfcheck import check_metric_oracles

WORDS = ["a", "cat", "dog", "on", "the", "mat", "red", "runs", "sits", "park"]
sentences = st.lists(st.sampled_from(WORDS), min_size=1, max_size=8)
reference_sets = st.lists(sentences, min_size=1, max_size=4)


# -- tokenisation ----------------------------------------------------------------------


@pytest.mark.parametrize("text,tokens", [
    ("A man, eating.", ["a", "man", "eating"]), ("", []), ("Cake on desk", ["cake", "on", "desk"]),
    ("  two\tspaces  ", ["two", "spaces"]),
])
def test_metric_tokenize(text, tokens):
    assert metric_tokenize(text) == tokens


def test_ngrams():
    assert ngrams(["a", "b", "a", "b"], 2) == {("a", "b"): 2, ("b", "a"): 1}
    assert ngrams(["a"], 2) == {}


# -- BLEU ---------------------------------------------------------------------------------


def test_bleu_identical():
    cand = "a cat sits on the mat".split()
    assert bleu([cand], [[cand]]) == [1.0, 1.0, 1.0, 1.0]


def test_bleu_no_shared_unigram():
    assert bleu([["dog"]], [[["a", "cat"]]])[0] == 0.0


def test_bleu_clipping_and_brevity():
    assert round(bleu([["the", "cat"]], [[["the", "the", "cat"]]])[0], 4) == 0.6065
    assert bleu([["the", "cat"]], [[["the", "the", "cat"]]])[0] == pytest.approx(math.exp(1 - 3 / 2))


def test_bleu_clips_repeated_words():
    # "the" appears once in the reference, so only one of the four counts
    assert bleu([["the"] * 4], [[["the", "cat", "on", "mat"]]])[0] == pytest.approx(0.25)


def test_bleu_closest_length_prefers_shorter_on_tie():
    # candidate length 3, references of length 2 and 4: the shorter one sets no penalty
    cand = ["a", "cat", "sits"]
    assert bleu([cand], [[["a", "cat"], ["a", "cat", "sits", "down"]]])[0] == 1.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu([["a"]], [])
    with pytest.raises(ValueError):
        bleu([], [])


def test_bleu_empty_candidate():
    assert bleu([[]], [[["a"]]]) == [0.0] * 4


# -- ROUGE-L --------------------------------------------------------------------------------


def test_lcs():
    assert lcs_length(list("abcbdab"), list("bdcaba")) == 4
    assert lcs_length([], ["a"]) == 0


def test_rouge_identical_and_disjoint():
    s = "a cat on a mat".split()
    assert rouge_l(s, [s]) == pytest.approx(1.0)
    assert rouge_l(["dog"], [s]) == 0.0


def test_rouge_hand_case():
    p, r, b2 = 3 / 4, 1.0, 1.2**2
    expected = (1 + b2) * p * r / (r + b2 * p)
    got = rouge_l(list("abcd"), [list("acd")])
    assert got == pytest.approx(expected)
    assert round(got, 4) == 0.8798


def test_rouge_takes_best_reference():
    cand = "a cat".split()
    assert rouge_l(cand, [["dog"], cand]) == pytest.approx(1.0)


def test_rouge_corpus_is_mean():
    assert rouge_l_corpus([["a"], ["b"]], [[["a"]], [["c"]]]) == pytest.approx(0.5)


def test_rouge_needs_references():
    with pytest.raises(ValueError):
        rouge_l(["a"], [])


# -- IDF and CIDEr-D -------------------------------------------------------------------------


def test_two_image_frequency_table():
    idf = build_idf([[["a", "cat"], ["the", "cat"]], [["a", "dog"]]], max_n=2)
    assert idf.num_docs == 2
    assert idf.doc_freq == {
        ("a",): 2, ("cat",): 1, ("the",): 1, ("dog",): 1,
        ("a", "cat"): 1, ("the", "cat"): 1, ("a", "dog"): 1,
    }
    assert idf.idf(("a",)) == 0.0
    assert idf.idf(("dog",)) == pytest.approx(math.log(2))


def test_build_idf_needs_documents():
    with pytest.raises(ValueError):
        build_idf([])


def test_cider_identical_is_ten():
    cand = "a cat sits on the mat".split()
    idf = build_idf([[cand], [["a", "dog"]], [["two", "birds"]]])
    assert cider_d_single(cand, [cand], idf) == pytest.approx(10.0, abs=1e-6)


def test_cider_without_overlap_is_zero():
    idf = build_idf([[["a", "cat"]], [["two", "birds"]]])
    assert cider_d_single(["two", "birds"], [["a", "cat"]], idf) == 0.0


def test_length_penalty():
    assert round(gaussian_length_penalty(10, 4), 4) == 0.6065
    assert gaussian_length_penalty(7, 7) == 1.0


def test_cider_averages_over_references():
    cand = "a cat sits".split()
    idf = build_idf([[cand], [["a", "dog"]], [["the", "park"]]])
    one = cider_d_single(cand, [cand], idf)
    assert cider_d_single(cand, [cand, ["the", "park"]], idf) == pytest.approx(one / 2)


def test_cider_corpus_mean_and_errors():
    idf = build_idf([[["a", "cat"]], [["a", "dog"]]])
    mean, per = cider_d([["a", "cat"], ["a", "dog"]], [[["a", "cat"]], [["a", "cat"]]], idf)
    assert mean == pytest.approx(sum(per) / 2)
    with pytest.raises(ValueError):
        cider_d([["a"]], [], idf)
    with pytest.raises(ValueError):
        cider_d_single(["a"], [], idf)


def test_oracle_suite():
    res = check_metric_oracles()
    assert res.passed, res.detail


# -- report -----------------------------------------------------------------------------------


def test_evaluate_report_marks_absent_metrics():
    report = evaluate([["a", "cat"], ["a", "dog"]], [[["a", "cat"]], [["a", "dog", "runs"]]], image_ids=["x", "y"])
    assert report["METEOR"] is None and report["SPICE"] is None
    assert report["absent_metrics"] == ["METEOR", "SPICE"]
    assert set(report["per_image_cider_d"]) == {"x", "y"}
    for key in ("BLEU-1", "BLEU-4", "ROUGE-L", "CIDEr-D"):
        assert isinstance(report[key], float)


# -- properties -------------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(sentences, reference_sets, st.lists(reference_sets, max_size=3))
def test_metric_ranges(cand, refs, extra_docs):
    idf = build_idf([refs] + extra_docs)
    assert all(0.0 <= b <= 1.0 + 1e-12 for b in bleu([cand], [refs]))
    assert 0.0 <= rouge_l(cand, refs) <= 1.0 + 1e-12
    assert 0.0 <= cider_d_single(cand, refs, idf) <= 10.0 + 1e-9


@settings(max_examples=200, deadline=None)
@given(sentences, reference_sets, st.randoms(use_true_random=False))
def test_reference_order_invariance(cand, refs, rnd):
    shuffled = list(refs)
    rnd.shuffle(shuffled)
    idf = build_idf([refs, [["zebra"]]])
    assert bleu([cand], [refs]) == bleu([cand], [shuffled])
    assert rouge_l(cand, refs) == rouge_l(cand, shuffled)
    assert cider_d_single(cand, refs, idf) == pytest.approx(cider_d_single(cand, shuffled, idf), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(sentences, reference_sets)
def test_bleu_of_member_is_one(cand, refs):
    assume(len(cand) >= 4)
    assert bleu([cand], [refs + [cand]]) == pytest.approx([1.0] * 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=2, max_size=8, unique=True), reference_sets, st.integers(0, 7))
def test_cider_does_not_increase_when_a_match_is_replaced(cand, refs, k):
    # restricted to candidates without repeated tokens; with repeats, clipping can make a
    # replacement raise the score
    k %= len(cand)
    ref_tokens = {t for r in refs for t in r}
    assume(cand[k] in ref_tokens)
    replaced = list(cand)
    replaced[k] = "zebra"
    idf = build_idf([refs, [["zebra", "a"]], [["the", "park"]]])
    assert cider_d_single(replaced, refs, idf) <= cider_d_single(cand, refs, idf) + 1e-12
