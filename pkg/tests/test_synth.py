import filecmp
from collections import defaultdict

import pytest

from kgreview.data import read_corpus
from kgreview.synth import ASPECT_NOUNS, TOY_CONFIG, SynthConfig, make_world


@pytest.fixture(scope="module")
def big_world():
    return make_world(SynthConfig(num_users=60, num_items=30, reviews_per_user=10, seed=1))


def test_mention_rate_close_to_half(big_world):
    surfaces = big_world.entity_surfaces()
    sents = [s for r in big_world.reviews for s in r.sentences]
    assert len(sents) >= 1000
    rate = sum(any(t in surfaces for t in s.tokens) for s in sents) / len(sents)
    assert abs(rate - 0.5) <= 0.05


def test_users_mostly_talk_about_preferred_aspects(big_world):
    counts = defaultdict(lambda: [0, 0])
    for r in big_world.reviews:
        for s in r.sentences:
            counts[r.user][0] += s.aspect in big_world.preferences[r.user]
            counts[r.user][1] += 1
    assert all(hit / total >= 0.7 for hit, total in counts.values())


def test_mentions_follow_an_aspect_noun(big_world):
    surfaces = big_world.entity_surfaces()
    for r in big_world.reviews:
        for s in r.sentences:
            for k, t in enumerate(s.tokens):
                if t in surfaces:
                    assert any(w in ASPECT_NOUNS[s.aspect] for w in s.tokens[:k])
                    assert big_world.entity_names[big_world.item_entities[r.item][s.aspect]] == t


def test_same_seed_gives_identical_files(tmp_path):
    make_world(TOY_CONFIG).save(tmp_path / "a")
    make_world(TOY_CONFIG).save(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == 7


def test_bundled_fixture_matches_generator(tmp_path):
    from importlib.resources import files

    make_world(TOY_CONFIG).save(tmp_path)
    fixture = files("kgreview") / "fixtures" / "toy"
    for name in ("corpus.jsonl", "triples.tsv", "interactions.tsv", "alignment.tsv", "entities.tsv"):
        assert (tmp_path / name).read_bytes() == (fixture / name).read_bytes()
    assert len(read_corpus(tmp_path / "corpus.jsonl")) == 50


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(num_aspects=11)
    with pytest.raises(ValueError):
        SynthConfig(num_items=2, reviews_per_user=3)
    with pytest.raises(ValueError):
        SynthConfig(nouns_per_aspect=0)


def test_single_noun_per_aspect():
    world = make_world(SynthConfig(nouns_per_aspect=1, seed=2))
    nouns = {n for ns in ASPECT_NOUNS for n in ns}
    for r in world.reviews:
        for s in r.sentences:
            assert [t for t in s.tokens if t in nouns] == [ASPECT_NOUNS[s.aspect][0]]
