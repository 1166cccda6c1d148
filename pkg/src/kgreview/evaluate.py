"""Corpus BLEU, ROUGE F1, aspect coverage and perplexity."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LengthMismatch

Tokens = Sequence[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(references, hypotheses):
    if len(references) != len(hypotheses):
        raise LengthMismatch(f"{len(references)} references but {len(hypotheses)} hypotheses")


def bleu(references: Sequence[Tokens], hypotheses: Sequence[Tokens], n: int = 4) -> float:
    """Corpus BLEU in percent with uniform weights over 1..n-gram precisions.

    Clipped n-gram counts are pooled over the corpus.  Precisions of order
    two and up get add-one smoothing; unigram precision is left raw.
    """
    _check_aligned(references, hypotheses)
    if not hypotheses:
        raise LengthMismatch("need at least one hypothesis")
    matches = np.zeros(n)
    totals = np.zeros(n)
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for k in range(1, n + 1):
            h, r = _ngrams(hyp, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[k - 1] += max(len(hyp) - k + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for k in range(1, n):
        log_p += math.log((matches[k] + 1) / (totals[k] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / n)


def _lcs(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(overlap: float, hyp_total: float, ref_total: float) -> float:
    if overlap == 0 or hyp_total == 0 or ref_total == 0:
        return 0.0
    p, r = overlap / hyp_total, overlap / ref_total
    return 2 * p * r / (p + r)


def rouge_pair(reference: Tokens, hypothesis: Tokens, variant: str) -> float:
    if variant == "rougeL":
        return _f1(_lcs(reference, hypothesis), len(hypothesis), len(reference))
    if variant not in ("rouge1", "rouge2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant[-1])
    h, r = _ngrams(hypothesis, n), _ngrams(reference, n)
    overlap = sum((h & r).values())
    return _f1(overlap, sum(h.values()), sum(r.values()))


def rouge(references: Sequence[Tokens], hypotheses: Sequence[Tokens], variant: str = "rouge1") -> float:
    """Mean per-pair F1 of ``rouge1``, ``rouge2`` or ``rougeL``."""
    _check_aligned(references, hypotheses)
    if not hypotheses:
        return 0.0
    return float(np.mean([rouge_pair(r, h, variant) for r, h in zip(references, hypotheses)]))


def covered_aspects(tokens: Tokens, keywords: Sequence[Sequence[str]]) -> set[int]:
    present = set(tokens)
    return {k for k, words in enumerate(keywords) if present.intersection(words)}


@dataclass(frozen=True)
class Coverage:
    real: float
    generated: float
    covered: float
    per_review: tuple = ()


def aspect_coverage(real: Sequence[Tokens], generated: Sequence[Tokens], keywords: Sequence[Sequence[str]],
                    top: int = 50) -> Coverage:
    """Mean aspects per review in real and generated text and their overlap.

    An aspect occurs in a text if any of its first ``top`` keywords does.
    """
    _check_aligned(real, generated)
    kws = [list(ws)[:top] for ws in keywords]
    rows = []
    for r, g in zip(real, generated):
        a, b = covered_aspects(r, kws), covered_aspects(g, kws)
        rows.append((len(a), len(b), len(a & b)))
    if not rows:
        return Coverage(0.0, 0.0, 0.0)
    arr = np.array(rows, dtype=float)
    return Coverage(*arr.mean(axis=0).tolist(), per_review=tuple(rows))


def entity_recall(references: Sequence[Tokens], hypotheses: Sequence[Tokens], entities) -> float:
    """Share of entity mentions in the references that the paired hypothesis
    also contains; ``nan`` when the references mention no entity."""
    _check_aligned(references, hypotheses)
    entities = set(entities)
    hit = total = 0
    for r, h in zip(references, hypotheses):
        wanted = Counter(t for t in r if t in entities)
        got = Counter(t for t in h if t in entities)
        total += sum(wanted.values())
        hit += sum((wanted & got).values())
    return hit / total if total else float("nan")


@dataclass
class EvalReport:
    perplexity: float | None
    bleu1: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    aspects_real: float
    aspects_generated: float
    aspects_covered: float
    reviews: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")


def evaluate_texts(references: Sequence[Tokens], hypotheses: Sequence[Tokens], keywords=None,
                   perplexity: float | None = None, config_hash: str = "") -> EvalReport:
    _check_aligned(references, hypotheses)
    cov = aspect_coverage(references, hypotheses, keywords) if keywords else Coverage(0.0, 0.0, 0.0)
    return EvalReport(
        perplexity=perplexity,
        bleu1=bleu(references, hypotheses, 1),
        bleu4=bleu(references, hypotheses, 4),
        rouge1=rouge(references, hypotheses, "rouge1"),
        rouge2=rouge(references, hypotheses, "rouge2"),
        rougeL=rouge(references, hypotheses, "rougeL"),
        aspects_real=cov.real,
        aspects_generated=cov.generated,
        aspects_covered=cov.covered,
        reviews=len(references),
        config_hash=config_hash,
    )


def perplexity(ckpt, dataset, vocab=None) -> float:
    """``exp`` of the mean per-token mixture NLL, END tokens included."""
    from .trainer import loss_report

    return loss_report(ckpt, dataset, vocab).perplexity
