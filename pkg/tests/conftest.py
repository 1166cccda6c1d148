import pytest
import torch

from kgreview.data import Vocabulary
from kgreview.hkg import build_hkg
from kgreview.model import ModelConfig, ReviewModel
from kgreview.synth import SynthConfig, make_world

torch.set_num_threads(1)


def small_config(**kw) -> ModelConfig:
    base = dict(num_aspects=4, d_e=8, d_h=8, d_c=4, num_graph_capsules=3, d_a=8, d_w=8, d_s=8,
                gcn_layers=2, gru_layers=2, routing_iterations=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def world_graph(world):
    """HKG of a synthetic world with every entity linked to its aspect nouns."""
    from kgreview.synth import ASPECT_NOUNS

    links = []
    for ent in world.entity_names:
        if ent.startswith("m.a"):
            a = int(ent[3:ent.index("e", 3)])
            links.extend((ent, w) for w in ASPECT_NOUNS[a][:2])
    return build_hkg(world.triples, world.interactions, links, world.alignment, world.entity_names)


@pytest.fixture(scope="session")
def tiny_world():
    cfg = SynthConfig(num_users=4, num_items=4, num_aspects=4, entities_per_aspect=2, reviews_per_user=2,
                      max_sentences=2, nationality_links=False, seed=3)
    world = make_world(cfg)
    graph = world_graph(world)
    vocab = Vocabulary.build(s.tokens for r in world.reviews for s in r.sentences)
    return world, graph, vocab


def make_model(tiny_world, seed=0, **kw):
    world, graph, vocab = tiny_world
    torch.manual_seed(seed)
    return ReviewModel(small_config(**kw), graph, vocab, users=[r.user for r in world.reviews])


def pytest_collection_modifyitems(items):
    for item in items:
        if getattr(getattr(item, "function", None), "is_hypothesis_test", False):
            item.add_marker(pytest.mark.property)
