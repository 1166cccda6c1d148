"""Seeded synthetic review worlds with planted structure.

Every aspect owns a few nouns and a KG relation whose tail entities are the
"people" of that aspect (actors, composers, ...).  Items link to one entity per
aspect.  Users prefer a couple of aspects; at least ``preference_rate`` of a
user's sentences talk about a preferred aspect, and each sentence mentions the
item's entity for its aspect with probability ``mention_rate``.  Entity
mentions always follow an aspect noun, so they are reachable through the
graph from an earlier token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import ReviewRecord, Sentence, write_corpus

ASPECT_NOUNS = [
    ["acting", "performance", "cast", "role"],
    ["story", "plot", "script", "ending"],
    ["music", "soundtrack", "score", "song"],
    ["visuals", "effects", "cinematography", "scenery"],
    ["direction", "pacing", "editing", "tone"],
    ["dialogue", "humor", "jokes", "lines"],
    ["costumes", "makeup", "sets", "design"],
    ["action", "stunts", "fights", "chases"],
    ["characters", "villain", "hero", "romance"],
    ["price", "packaging", "edition", "release"],
]
ASPECT_RELATIONS = [
    "film.starring", "film.written_by", "film.music", "film.cinematographer",
    "film.directed_by", "film.screenplay", "film.costume_design", "film.stunt_coordinator",
    "film.characters", "film.distributor",
]
POSITIVE = ["great", "brilliant", "perfect", "charming", "superb"]
NEGATIVE = ["dull", "weak", "boring", "poor", "bland"]
STOPWORDS = ["the", "was", "by", "of", "i", "found", "a", "and", "is"]
SYLLABLES = ["ka", "lo", "mi", "ren", "sto", "vel", "dor", "ami", "bel", "tus", "gra", "no", "pi", "zel"]

TAGS = {w: "DT" for w in ("the", "a")}
TAGS.update({"was": "VBD", "found": "VBD", "is": "VBZ", "by": "IN", "of": "IN", "i": "PRP", "and": "CC"})


@dataclass
class SynthConfig:
    num_users: int = 20
    num_items: int = 15
    num_aspects: int = 4
    entities_per_aspect: int = 5
    reviews_per_user: int = 4
    max_sentences: int = 3
    preferred_per_user: int = 2
    preference_rate: float = 0.85
    mention_rate: float = 0.5
    nationality_links: bool = True
    nouns_per_aspect: int = 4  # fewer nouns make every entity-noun pair common
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_aspects <= len(ASPECT_NOUNS):
            raise ValueError(f"num_aspects must be in 1..{len(ASPECT_NOUNS)}")
        if not 1 <= self.nouns_per_aspect <= len(ASPECT_NOUNS[0]):
            raise ValueError(f"nouns_per_aspect must be in 1..{len(ASPECT_NOUNS[0])}")
        if self.reviews_per_user > self.num_items:
            raise ValueError("a user cannot review more items than exist")

    def aspect_nouns(self) -> list[list[str]]:
        return [list(ns[: self.nouns_per_aspect]) for ns in ASPECT_NOUNS[: self.num_aspects]]


@dataclass
class SynthWorld:
    config: SynthConfig
    reviews: list[ReviewRecord]
    triples: list[tuple[str, str, str]]
    interactions: list[tuple[str, str, int]]
    alignment: dict[str, str]
    entity_names: dict[str, str]
    preferences: dict[str, list[int]]
    item_entities: dict[str, dict[int, str]]

    def entity_surfaces(self) -> set[str]:
        return set(self.entity_names.values())

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_corpus(out / "corpus.jsonl", self.reviews)
        _write_tsv(out / "triples.tsv", self.triples)
        _write_tsv(out / "interactions.tsv", self.interactions)
        _write_tsv(out / "alignment.tsv", sorted(self.alignment.items()))
        _write_tsv(out / "entities.tsv", sorted(self.entity_names.items()))
        (out / "stopwords.txt").write_text("\n".join(STOPWORDS) + "\n", encoding="utf-8")
        truth = {
            "config": asdict(self.config),
            "preferences": self.preferences,
            "aspect_nouns": self.config.aspect_nouns(),
            "item_entities": {i: {str(a): e for a, e in m.items()} for i, m in self.item_entities.items()},
        }
        (out / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def _names(rng, n):
    names = set()
    while len(names) < n:
        names.add("".join(rng.choice(SYLLABLES, size=rng.integers(2, 4))))
    return sorted(names)


def make_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng(cfg.seed)
    A = cfg.num_aspects
    nouns = cfg.aspect_nouns()
    names = _names(rng, A * cfg.entities_per_aspect)
    rng.shuffle(names)
    pools = [
        [f"m.a{a}e{k}" for k in range(cfg.entities_per_aspect)] for a in range(A)
    ]
    entity_names = {}
    for a in range(A):
        for k, e in enumerate(pools[a]):
            entity_names[e] = names[a * cfg.entities_per_aspect + k]

    items = [f"i{k}" for k in range(cfg.num_items)]
    alignment = {it: f"m.{it}" for it in items}
    for it in items:
        entity_names[alignment[it]] = f"title_{it}"
    triples = []
    item_entities: dict[str, dict[int, str]] = {}
    for it in items:
        item_entities[it] = {}
        for a in range(A):
            e = pools[a][int(rng.integers(cfg.entities_per_aspect))]
            item_entities[it][a] = e
            triples.append((alignment[it], ASPECT_RELATIONS[a], e))
    if cfg.nationality_links:
        countries = ["m.country0", "m.country1", "m.country2"]
        for c in countries:
            entity_names[c] = c.split(".")[1]
        for a in range(A):
            for e in pools[a]:
                triples.append((e, "people.nationality", countries[int(rng.integers(3))]))

    users = [f"u{k}" for k in range(cfg.num_users)]
    preferences = {}
    reviews, interactions = [], []
    for u in users:
        pref = sorted(rng.choice(A, size=min(cfg.preferred_per_user, A), replace=False).tolist())
        preferences[u] = pref
        others = [a for a in range(A) if a not in pref]
        chosen = rng.choice(len(items), size=cfg.reviews_per_user, replace=False)
        counts = rng.integers(1, cfg.max_sentences + 1, size=len(chosen))
        total = int(counts.sum())
        n_off = int(np.floor(total * (1 - cfg.preference_rate))) if others else 0
        off = set(rng.choice(total, size=n_off, replace=False).tolist()) if n_off else set()
        slot = 0
        for idx, n in zip(chosen, counts):
            it = items[int(idx)]
            rating = int(rng.choice([1, 2, 3, 4, 5], p=[0.1, 0.1, 0.2, 0.3, 0.3]))
            sents = []
            for _ in range(int(n)):
                pool = others if slot in off else pref
                a = int(pool[int(rng.integers(len(pool)))])
                slot += 1
                ent = entity_names[item_entities[it][a]]
                mention = rng.random() < cfg.mention_rate
                sents.append(_sentence(rng, a, nouns[a], rating, ent if mention else None))
            reviews.append(ReviewRecord(u, it, rating, sents))
            interactions.append((u, it, rating))
    return SynthWorld(cfg, reviews, triples, interactions, alignment, entity_names, preferences, item_entities)


def _sentence(rng, aspect: int, nouns: list[str], rating: int, entity: str | None) -> Sentence:
    noun = nouns[int(rng.integers(len(nouns)))]
    if rating >= 4:
        adjs = POSITIVE
    elif rating <= 2:
        adjs = NEGATIVE
    else:
        adjs = POSITIVE if rng.random() < 0.5 else NEGATIVE
    adj = adjs[int(rng.integers(len(adjs)))]
    if entity is None:
        templates = [["the", noun, "was", adj], [adj, noun], ["i", "found", "the", noun, adj]]
    else:
        templates = [[adj, noun, "by", entity], ["the", noun, "of", entity, "was", adj]]
    tokens = templates[int(rng.integers(len(templates)))]
    pos = []
    for t in tokens:
        if t == noun:
            pos.append("NN")
        elif t == adj:
            pos.append("JJ")
        elif t == entity:
            pos.append("NNP")
        else:
            pos.append(TAGS[t])
    return Sentence(list(tokens), pos, aspect)


TOY_CONFIG = SynthConfig(
    num_users=10, num_items=10, num_aspects=4, entities_per_aspect=5,
    reviews_per_user=5, max_sentences=3, nationality_links=False, seed=7,
)
