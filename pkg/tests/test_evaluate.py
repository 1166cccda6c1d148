import math
import random

import pytest
from hypothesis import given, settings, strategies as st
from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu
from rouge_score import rouge_scorer

from kgreview.errors import LengthMismatch
from kgreview.evaluate import (aspect_coverage, bleu, covered_aspects, entity_recall, evaluate_texts, rouge,
                               rouge_pair)

WORDS = ["a", "b", "c", "d", "e", "f"]
texts = st.lists(st.sampled_from(WORDS), min_size=1, max_size=12)


def test_identical_text_bleu_one_hundred():
    assert bleu([["a", "b", "c"]], [["a", "b", "c"]], 1) == 100.0


def test_disjoint_text_bleu_zero():
    assert bleu([["a", "b"]], [["c", "d"]], 1) == 0.0


def test_two_of_three_unigrams():
    assert abs(bleu([["a", "x", "c"]], [["a", "b", "c"]], 1) - 200 / 3) < 1e-9


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        bleu([["a"]], [], 1)
    with pytest.raises(LengthMismatch):
        rouge([["a"]], [["a"], ["b"]])


long_texts = st.lists(st.sampled_from(WORDS), min_size=4, max_size=12)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(texts, long_texts), min_size=1, max_size=6))
def test_bleu_matches_reference_implementation(pairs):
    # hypotheses of at least four tokens: there the reference tool and the
    # pooled-count definition agree exactly
    refs = [r for r, _ in pairs]
    hyps = [h for _, h in pairs]
    smooth = SmoothingFunction().method2
    for n in (1, 4):
        weights = tuple([1.0 / n] * n)
        expect = 100 * corpus_bleu([[r] for r in refs], hyps, weights=weights, smoothing_function=smooth)
        assert abs(bleu(refs, hyps, n) - expect) < 1e-9


SCORER = rouge_scorer.RougeScorer(["rouge1", "rouge2", "rougeL"])


@settings(max_examples=300, deadline=None)
@given(texts, texts)
def test_rouge_matches_reference_implementation(ref, hyp):
    scores = SCORER.score(" ".join(ref), " ".join(hyp))
    for v in ("rouge1", "rouge2", "rougeL"):
        assert abs(rouge_pair(ref, hyp, v) - scores[v].fmeasure) < 1e-9


def test_rouge_identical_is_one():
    for v in ("rouge1", "rouge2", "rougeL"):
        assert rouge([["a", "b", "c"]], [["a", "b", "c"]], v) == 1.0


def test_rouge_swapped_pair():
    assert rouge([["b", "a"]], [["a", "b"]], "rouge1") == 1.0
    assert rouge([["b", "a"]], [["a", "b"]], "rougeL") == 0.5


def test_rouge_empty_hypothesis():
    assert rouge([["a"]], [[]], "rouge1") == 0.0
    assert rouge([["a"]], [[]], "rougeL") == 0.0


def test_unknown_rouge_variant():
    with pytest.raises(ValueError):
        rouge_pair(["a"], ["a"], "rouge9")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(texts, texts), min_size=1, max_size=6), st.randoms())
def test_corpus_metrics_ignore_order(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = ([r for r, _ in pairs], [h for _, h in pairs])
    b = ([r for r, _ in shuffled], [h for _, h in shuffled])
    assert math.isclose(bleu(*a, 4), bleu(*b, 4), abs_tol=1e-9)
    assert math.isclose(rouge(*a, "rouge2"), rouge(*b, "rouge2"), abs_tol=1e-12)


@settings(max_examples=200, deadline=None)
@given(texts)
def test_self_scores(x):
    assert rouge([x], [x], "rouge1") == 1.0
    assert abs(bleu([x], [x], 1) - 100.0) < 1e-9


# -- aspect coverage ------------------------------------------------------------------

KEYWORDS = [["plot", "story"], ["acting", "cast"], ["music", "score"], ["price"]]


def test_three_real_aspects_all_covered():
    real = [["plot", "acting", "music"]]
    gen = [["story", "cast", "score", "x"]]
    cov = aspect_coverage(real, gen, KEYWORDS)
    assert (cov.real, cov.generated, cov.covered) == (3.0, 3.0, 3.0)


def test_disjoint_aspects_cover_nothing():
    cov = aspect_coverage([["plot"]], [["price"]], KEYWORDS)
    assert cov.covered == 0.0 and cov.real == 1.0 and cov.generated == 1.0


def test_only_top_keywords_count():
    assert covered_aspects(["story"], KEYWORDS) == {0}
    cov = aspect_coverage([["story"]], [["story"]], KEYWORDS, top=1)
    assert cov.real == 0.0


@pytest.mark.oracle
def test_coverage_matches_set_intersection_oracle():
    rng = random.Random(3)
    vocab = [w for ws in KEYWORDS for w in ws] + ["the", "was", "good"]
    real, gen = [], []
    for _ in range(50):
        real.append(rng.choices(vocab, k=rng.randint(0, 6)))
        gen.append(rng.choices(vocab, k=rng.randint(0, 6)))
    cov = aspect_coverage(real, gen, KEYWORDS)
    rows = []
    for r, g in zip(real, gen):
        ar = {k for k, ws in enumerate(KEYWORDS) for w in ws if w in r}
        ag = {k for k, ws in enumerate(KEYWORDS) for w in ws if w in g}
        rows.append((len(ar), len(ag), len(ar & ag)))
    assert cov.per_review == tuple(rows)
    assert math.isclose(cov.covered, sum(c for _, _, c in rows) / 50, abs_tol=1e-12)
    assert all(c <= min(a, b) for a, b, c in cov.per_review)


# -- entity recall and reports -------------------------------------------------------------

def test_entity_recall():
    refs = [["by", "kalo", "x"], ["mi", "y"], ["z"]]
    hyps = [["kalo"], ["q"], ["kalo"]]
    assert entity_recall(refs, hyps, {"kalo", "mi"}) == 0.5
    assert math.isnan(entity_recall([["x"]], [["x"]], {"kalo"}))


def test_gold_against_gold_report(tmp_path):
    refs = [["the", "plot", "was", "great"], ["acting", "by", "kalo"]]
    rep = evaluate_texts(refs, refs, KEYWORDS, perplexity=1.0, config_hash="abc")
    assert rep.bleu1 == 100.0 and rep.bleu4 == 100.0 and rep.rouge1 == 1.0 and rep.rougeL == 1.0
    assert rep.aspects_real == rep.aspects_covered == 1.0
    rep.save(tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text() == rep.to_json()


def test_short_gold_hypothesis_scores_one_hundred():
    assert bleu([["a"]], [["a"]], 4) == 100.0
