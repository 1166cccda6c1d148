"""Aspect labelling and keyword mining.

Sentences are clustered with a sentence-level topic model: every sentence
draws one aspect, and all of its non-background words come from that aspect's
word distribution (a Dirichlet multinomial mixture).  Words in the stopword
list are routed to a fixed background topic and never influence the aspect.
The model is fitted with collapsed Gibbs sampling.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DegenerateVocabulary, EmptyCorpus, MissingTags

ASPECT_KEYWORDS = 70
OPINION_KEYWORDS = 200
ADJECTIVE_TAGS = frozenset({"JJ", "JJR", "JJS"})
NOUN_TAGS = frozenset({"NN", "NNS", "NNP", "NNPS"})


@dataclass
class AspectModel:
    """Fitted topic-word and topic-sentence counts plus hyperparameters."""

    vocab: list[str]
    topic_word: np.ndarray  # (A, V) counts
    topic_sentences: np.ndarray  # (A,) sentences per topic
    alpha: float
    beta: float
    stopwords: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.topic_word = np.asarray(self.topic_word, dtype=np.float64)
        self.topic_sentences = np.asarray(self.topic_sentences, dtype=np.float64)
        self.word_index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def num_aspects(self) -> int:
        return self.topic_word.shape[0]

    def topic_word_distribution(self) -> np.ndarray:
        V = len(self.vocab)
        num = self.topic_word + self.beta
        return num / (self.topic_word.sum(axis=1, keepdims=True) + V * self.beta)

    def prior(self) -> np.ndarray:
        A = self.num_aspects
        return (self.topic_sentences + self.alpha) / (self.topic_sentences.sum() + A * self.alpha)

    def posterior(self, tokens: Sequence[str]) -> np.ndarray:
        """P(aspect | tokens); stopwords and unknown words are ignored."""
        logp = np.log(self.prior())
        log_phi = np.log(self.topic_word_distribution())
        for t in tokens:
            j = self.word_index.get(t)
            if j is not None and t not in self.stopwords:
                logp = logp + log_phi[:, j]
        return np.exp(logp - logsumexp(logp))

    def ranked_keywords(self, k: int = ASPECT_KEYWORDS) -> list[list[str]]:
        phi = self.topic_word_distribution()
        out = []
        for a in range(self.num_aspects):
            # stable order: probability desc, then spelling
            order = sorted(range(len(self.vocab)), key=lambda j: (-phi[a, j], self.vocab[j]))
            out.append([self.vocab[j] for j in order[:k]])
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.vocab).encode("utf-8"))
        h.update(self.topic_word.tobytes())
        h.update(self.topic_sentences.tobytes())
        h.update(repr((self.alpha, self.beta, sorted(self.stopwords))).encode("utf-8"))
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "topic_word": self.topic_word.tolist(),
            "topic_sentences": self.topic_sentences.tolist(),
            "alpha": self.alpha,
            "beta": self.beta,
            "stopwords": sorted(self.stopwords),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AspectModel":
        return cls(d["vocab"], np.array(d["topic_word"]), np.array(d["topic_sentences"]),
                   d["alpha"], d["beta"], frozenset(d.get("stopwords", ())))


def build_topic_vocab(corpus, stopwords=(), min_count: int = 5, max_size: int = 30_000) -> list[str]:
    stop = set(stopwords)
    counts = Counter(t for s in corpus for t in s if t not in stop)
    ranked = sorted(((w, c) for w, c in counts.items() if c >= min_count), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:max_size]]


def fit_aspect_model(
    corpus: Sequence[Sequence[str]],
    A: int = 10,
    iterations: int = 500,
    seed: int = 0,
    alpha: float | None = None,
    beta: float = 0.01,
    stopwords: Iterable[str] = (),
    min_count: int = 5,
    max_vocab: int = 30_000,
) -> AspectModel:
    """Collapsed Gibbs sampling of one aspect per sentence."""
    if not corpus:
        raise EmptyCorpus("cannot fit an aspect model on an empty corpus")
    if A < 2:
        raise ValueError("need at least two aspects")
    if iterations < 1:
        raise ValueError("need at least one Gibbs iteration")
    alpha = 50.0 / A if alpha is None else alpha
    stop = frozenset(stopwords)
    vocab = build_topic_vocab(corpus, stop, min_count, max_vocab)
    if len(vocab) < A:
        raise DegenerateVocabulary(f"vocabulary of {len(vocab)} words is smaller than A={A}")
    index = {w: i for i, w in enumerate(vocab)}
    V = len(vocab)

    # per sentence: (word ids, counts) of in-vocabulary, non-background tokens
    docs = []
    for s in corpus:
        c = Counter(index[t] for t in s if t in index and t not in stop)
        ids = np.array(sorted(c), dtype=np.int64)
        docs.append((ids, np.array([c[i] for i in ids], dtype=np.int64)))

    rng = np.random.default_rng(seed)
    z = rng.integers(0, A, size=len(docs))
    n_kw = np.zeros((A, V))
    m_k = np.zeros(A)
    for d, (ids, cnt) in enumerate(docs):
        m_k[z[d]] += 1
        n_kw[z[d], ids] += cnt
    n_k = n_kw.sum(axis=1)

    for _ in range(iterations):
        for d, (ids, cnt) in enumerate(docs):
            k = z[d]
            m_k[k] -= 1
            n_kw[k, ids] -= cnt
            n_k[k] -= cnt.sum()
            total = int(cnt.sum())
            # log P(z_d = k | rest) for the Dirichlet multinomial mixture
            logp = np.log(m_k + alpha)
            if total:
                logp = logp + (gammaln(n_kw[:, ids] + beta + cnt) - gammaln(n_kw[:, ids] + beta)).sum(axis=1)
                logp = logp - (gammaln(n_k + V * beta + total) - gammaln(n_k + V * beta))
            p = np.exp(logp - logsumexp(logp))
            k = int(rng.choice(A, p=p))
            z[d] = k
            m_k[k] += 1
            n_kw[k, ids] += cnt
            n_k[k] += total

    model = AspectModel(vocab, n_kw, m_k, alpha, beta, stop)
    model.assignments = z.copy()
    return model


def label_sentence(model: AspectModel, sentence: Sequence[str]) -> int:
    """Aspect with the largest posterior; lowest index wins ties."""
    return int(np.argmax(model.posterior(sentence)))


def extract_opinion_keywords(
    corpus: Iterable[tuple[Sequence[str], Sequence[str] | None]],
    aspect_keywords: Iterable[str],
    k: int = OPINION_KEYWORDS,
    window: int = 2,
) -> list[str]:
    """Adjectives that precede an aspect noun within ``window`` tokens.

    ``corpus`` yields ``(tokens, pos_tags)`` pairs.  Candidates are ranked by
    frequency with ties broken by spelling.
    """
    aspect_keywords = set(aspect_keywords)
    counts = Counter()
    for tokens, tags in corpus:
        if tags is None:
            raise MissingTags("opinion extraction needs POS-tagged sentences")
        if len(tags) != len(tokens):
            raise MissingTags("POS tag count does not match token count")
        for i, (tok, tag) in enumerate(zip(tokens, tags)):
            if tag not in ADJECTIVE_TAGS:
                continue
            for j in range(i + 1, min(i + 1 + window, len(tokens))):
                if tags[j] in NOUN_TAGS and tokens[j] in aspect_keywords:
                    counts[tok] += 1
                    break
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:k]]


@dataclass
class KeywordLexicon:
    aspect_keywords: list[list[str]]
    opinion_keywords: list[str]

    def all_keywords(self) -> set[str]:
        return {w for ws in self.aspect_keywords for w in ws} | set(self.opinion_keywords)

    def top(self, n: int) -> list[list[str]]:
        return [ws[:n] for ws in self.aspect_keywords]

    def to_json(self) -> str:
        return json.dumps({"aspect_keywords": self.aspect_keywords,
                           "opinion_keywords": self.opinion_keywords},
                          ensure_ascii=False, sort_keys=True, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "KeywordLexicon":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["aspect_keywords"], d["opinion_keywords"])


def build_lexicon(model: AspectModel, tagged_corpus, n_aspect: int = ASPECT_KEYWORDS,
                  n_opinion: int = OPINION_KEYWORDS) -> KeywordLexicon:
    aspect_kw = model.ranked_keywords(n_aspect)
    flat = {w for ws in aspect_kw for w in ws}
    return KeywordLexicon(aspect_kw, extract_opinion_keywords(tagged_corpus, flat, n_opinion))
