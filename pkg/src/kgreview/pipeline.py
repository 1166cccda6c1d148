"""Glue shared by the CLI and the experiments: graph building from raw
inputs, aspect mining over a corpus, and the graph ablations."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .aspects import AspectModel, KeywordLexicon, build_lexicon, fit_aspect_model, label_sentence
from .data import ReviewRecord, Sentence
from .hkg import (HKG, build_hkg, find_entity_mentions, make_entity_word_links, read_alignment,
                  read_entity_names, read_interactions, read_triples, without_kg, without_users_and_words)
from .model import ModelConfig

ABLATIONS = ("full", "no_kg", "no_hkg_keep_kg", "rgcn_only", "gat_like_attention", "no_copy")


@dataclass
class GraphInputs:
    triples: list
    interactions: list
    alignment: dict
    entity_names: dict

    @classmethod
    def read(cls, triples, interactions, alignment, entity_names=None) -> "GraphInputs":
        names = read_entity_names(entity_names) if entity_names and Path(entity_names).exists() else {}
        return cls(read_triples(triples), read_interactions(interactions), read_alignment(alignment), names)


def build_graph(inputs: GraphInputs, corpus: list[ReviewRecord], keywords) -> HKG:
    """Full HKG: KG triples, user-item interactions and entity-keyword links
    mined from the review sentences."""
    surface_to_entity = {}
    for ent, name in sorted(inputs.entity_names.items()):
        surface_to_entity.setdefault(name, ent)
    item_entities = set(inputs.alignment.values())
    sentences = [s.tokens for r in corpus for s in r.sentences]
    mentions = find_entity_mentions(sentences, surface_to_entity)
    mentions = [{e for e in m if e not in item_entities} for m in mentions]
    links = make_entity_word_links(sentences, mentions, keywords)
    return build_hkg(inputs.triples, inputs.interactions, links, inputs.alignment, inputs.entity_names)


def mine_aspects(corpus: list[ReviewRecord], num_aspects: int = 10, iterations: int = 500, seed: int = 0,
                 stopwords=(), min_count: int = 5):
    """Fit the sentence-level topic model, label every sentence, build the lexicon.

    Returns ``(labeled_corpus, model, lexicon)``.
    """
    sentences = [s.tokens for r in corpus for s in r.sentences]
    model = fit_aspect_model(sentences, num_aspects, iterations, seed, stopwords=stopwords, min_count=min_count)
    labeled = []
    for r in corpus:
        sents = [Sentence(list(s.tokens), s.pos, label_sentence(model, s.tokens)) for s in r.sentences]
        labeled.append(ReviewRecord(r.user, r.item, r.rating, sents))
    tagged = [(s.tokens, s.pos) for r in corpus for s in r.sentences]
    lexicon = build_lexicon(model, tagged)
    return labeled, model, lexicon


def apply_ablation(name: str, graph: HKG, cfg: ModelConfig) -> tuple[HKG, ModelConfig]:
    """Graph and model configuration for one ablation variant."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    if name == "no_kg":
        return without_kg(graph), cfg
    if name == "no_hkg_keep_kg":
        return without_users_and_words(graph), cfg
    if name == "rgcn_only":
        return graph, replace(cfg, encoder="rgcn")
    if name == "gat_like_attention":
        return graph, replace(cfg, encoder="gat")
    if name == "no_copy":
        return graph, replace(cfg, copy=False)
    return graph, cfg


__all__ = ["ABLATIONS", "AspectModel", "GraphInputs", "KeywordLexicon", "apply_ablation", "build_graph",
           "mine_aspects"]
