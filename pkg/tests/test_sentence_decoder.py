import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kgreview.errors import ShapeMismatch
from kgreview.sentence_decoder import (NEG, BeamConfig, SentenceDecoder, attend, beam_search, exhaustive_search,
                                       greedy_search, mix)


@pytest.fixture(autouse=True, scope="module")
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def make_decoder(vocab_size=3, d=2, d_c=2, d_node=2, copy=True, seed=0):
    torch.manual_seed(seed)
    return SentenceDecoder(vocab_size, d, d, d_c, d, d_node, layers=1, dropout=0.0, copy=copy).eval()


def step_pieces(dec, n_nodes=3, cand=(0, 1), seed=0, nodes=None):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(1, 1, 2, generator=g)
    memory = torch.randn(1, 4, 2, generator=g)
    mask = torch.ones(1, 1, 4, dtype=torch.bool)
    nodes = torch.randn(n_nodes, 2, generator=g) if nodes is None else nodes
    cmask = torch.zeros(1, 1, n_nodes, dtype=torch.bool)
    cmask[0, 0, list(cand)] = True
    return dec.distribution(s, memory, mask, nodes, cmask)


# -- decoder input ---------------------------------------------------------------------

def test_identity_projection_passes_word_embedding():
    dec = make_decoder()
    with torch.no_grad():
        dec.aspect_projection.weight.zero_()
        dec.aspect_projection.weight[:, 0] = 1.0
    q = torch.tensor([[1.0, 5.0]])
    ids = torch.tensor([[2, 1]])
    assert torch.equal(dec.inputs(ids, q), dec.embedding(ids))


def test_zero_aspect_capsule_annihilates_input():
    dec = make_decoder()
    assert torch.equal(dec.inputs(torch.tensor([[1]]), torch.zeros(1, 2)), torch.zeros(1, 1, 2))


def test_hand_set_elementwise_input():
    dec = make_decoder()
    with torch.no_grad():
        dec.embedding.weight[1] = torch.tensor([2.0, -3.0])
        dec.aspect_projection.weight.copy_(torch.eye(2))
    x = dec.inputs(torch.tensor([[1]]), torch.tensor([[0.5, 4.0]]))
    assert torch.equal(x, torch.tensor([[[1.0, -12.0]]]))


def test_dimension_sharing_is_enforced():
    with pytest.raises(ShapeMismatch):
        SentenceDecoder(3, 4, 2, 2, 2, 2)


# -- attention --------------------------------------------------------------------------

def test_single_memory_item():
    m = torch.tensor([[0.3, -0.7]])
    c, w = attend(torch.randn(2), m)
    assert torch.equal(c, m[0]) and torch.equal(w, torch.ones(1))


def test_uniform_scores_average():
    m = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    c, w = attend(torch.tensor([2.0, 2.0]), m)
    assert torch.allclose(c, torch.tensor([0.5, 0.5]), atol=1e-12)


def test_scores_zero_and_log_three():
    m = torch.tensor([[0.0, 1.0], [math.log(3.0), 1.0]])
    _, w = attend(torch.tensor([1.0, 0.0]), m)
    assert torch.allclose(w, torch.tensor([0.25, 0.75]), atol=1e-12, rtol=0)


def test_masked_slots_get_no_weight():
    m = torch.randn(3, 2)
    c, w = attend(torch.randn(2), m, torch.tensor([True, False, True]))
    assert w[1].item() == 0.0


# -- generation route ----------------------------------------------------------------------

def test_zero_output_layer_is_uniform():
    dec = make_decoder(vocab_size=5)
    with torch.no_grad():
        dec.W3.weight.zero_()
        dec.W3.bias.zero_()
    st_ = step_pieces(dec)
    assert torch.allclose(st_.logp_vocab.exp(), torch.full((1, 1, 5), 0.2), atol=1e-12)


def test_logits_zero_zero_log_two():
    dec = make_decoder()
    with torch.no_grad():
        dec.W3.weight.zero_()
        dec.W3.bias.copy_(torch.tensor([0.0, 0.0, math.log(2.0)]))
    st_ = step_pieces(dec)
    assert torch.allclose(st_.logp_vocab.exp()[0, 0], torch.tensor([0.25, 0.25, 0.5]), atol=1e-12, rtol=0)


def test_generation_route_formula():
    dec = make_decoder(vocab_size=4)
    s = torch.randn(1, 1, 2)
    memory = torch.randn(1, 3, 2)
    st_ = dec.distribution(s, memory, torch.ones(1, 1, 3, dtype=torch.bool), torch.randn(2, 2),
                           torch.zeros(1, 1, 2, dtype=torch.bool))
    w = torch.softmax(memory[0] @ s[0, 0], 0)
    c = w @ memory[0]
    s_tilde = torch.tanh(dec.W2.weight @ torch.cat([c, s[0, 0]]))
    expect = torch.softmax(dec.W3.weight @ s_tilde + dec.W3.bias, 0)
    assert torch.allclose(st_.logp_vocab.exp()[0, 0], expect, atol=1e-12)


# -- copy route -------------------------------------------------------------------------------

def test_singleton_candidate_gets_all_copy_mass():
    st_ = step_pieces(make_decoder(), cand=(1,))
    p = st_.logp_copy.exp()[0, 0]
    assert torch.allclose(p, torch.tensor([0.0, 1.0, 0.0]), atol=1e-12)


def test_equal_embeddings_split_copy_mass():
    nodes = torch.tensor([[0.3, 0.2], [0.3, 0.2], [1.0, 1.0]])
    st_ = step_pieces(make_decoder(), cand=(0, 1), nodes=nodes)
    assert torch.allclose(st_.logp_copy.exp()[0, 0], torch.tensor([0.5, 0.5, 0.0]), atol=1e-12)


def test_copy_score_formula():
    dec = make_decoder()
    g = torch.Generator().manual_seed(4)
    s = torch.randn(1, 1, 2, generator=g)
    memory = torch.randn(1, 2, 2, generator=g)
    nodes = torch.randn(3, 2, generator=g)
    cmask = torch.tensor([[[True, True, False]]])
    st_ = dec.distribution(s, memory, torch.ones(1, 1, 2, dtype=torch.bool), nodes, cmask)
    c = torch.softmax(memory[0] @ s[0, 0], 0) @ memory[0]
    scores = torch.stack([dec.W5(torch.tanh(dec.W4.weight @ torch.cat([c, s[0, 0], nodes[k]])))[0]
                          for k in range(2)])
    assert torch.allclose(st_.logp_copy.exp()[0, 0, :2], torch.softmax(scores, 0), atol=1e-12)
    alpha = torch.sigmoid(dec.gate(torch.cat([c, s[0, 0]])))[0]
    assert torch.allclose(st_.log_alpha.exp()[0, 0], alpha, atol=1e-12)


def test_no_candidates_forces_gate_open():
    dec = make_decoder()
    st_ = step_pieces(dec, cand=())
    assert st_.log_alpha.item() == 0.0
    assert st_.log_one_minus_alpha.item() <= NEG
    target = torch.tensor([[2]])
    lp = dec.target_log_prob(st_, target, torch.ones(1, 1, dtype=torch.bool), torch.zeros(1, 1, 3, dtype=torch.bool))
    assert lp.item() == st_.logp_vocab[0, 0, 2].item()


def test_copy_off_forces_gate_open_even_with_candidates():
    st_ = step_pieces(make_decoder(copy=False), cand=(0, 1))
    assert st_.log_alpha.item() == 0.0 and not st_.has_candidates.item()


def test_shared_token_collects_both_masses():
    dec = make_decoder()
    st_ = step_pieces(dec, cand=(0, 1), seed=2)
    lp = dec.target_log_prob(st_, torch.tensor([[1]]), torch.ones(1, 1, dtype=torch.bool),
                             torch.tensor([[[False, True, False]]]))
    a = st_.log_alpha.exp().item()
    expect = a * st_.logp_vocab.exp()[0, 0, 1] + (1 - a) * st_.logp_copy.exp()[0, 0, 1]
    assert abs(lp.exp().item() - expect.item()) < 1e-12


# -- mixture ------------------------------------------------------------------------------------

def test_mix_gate_one_is_generation_route():
    m = mix(1.0, [0.2, 0.8], ["a", "b"], [1.0], ["c"])
    assert np.allclose(m.probs[:2], [0.2, 0.8]) and m.prob("c") == 0.0


def test_mix_half_with_disjoint_supports():
    m = mix(0.5, [0.2, 0.8], ["a", "b"], [0.4, 0.6], ["c", "d"])
    assert m.tokens == ["a", "b", "c", "d"]
    assert np.allclose(m.probs, [0.1, 0.4, 0.2, 0.3], atol=1e-12)
    assert abs(m.probs.sum() - 1.0) < 1e-12


def test_mix_shared_surface_word():
    m = mix(0.25, [0.2, 0.8], ["performance", "x"], [0.6, 0.4], ["performance", "y"])
    assert abs(m.prob("performance") - (0.25 * 0.2 + 0.75 * 0.6)) < 1e-12
    assert abs(m.prob("performance") - 0.5) < 1e-12


def test_mix_without_candidates_is_exact_generation_route():
    pr1 = np.array([0.1, 0.3, 0.6])
    m = mix(0.3, pr1, ["a", "b", "c"])
    assert m.alpha == 1.0 and np.array_equal(m.probs, pr1)


@settings(max_examples=1000, deadline=None)
@given(st.floats(0, 1), st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_mixture_sums_to_one(alpha, v, c, seed):
    rng = np.random.default_rng(seed)
    pr1 = rng.dirichlet(np.ones(v))
    pr2 = rng.dirichlet(np.ones(c)) if c else None
    vocab = [f"w{k}" for k in range(v)]
    cands = [f"w{k}" for k in rng.integers(0, v + 3, size=c)]
    m = mix(alpha, pr1, vocab, pr2, cands)
    assert abs(m.probs.sum() - 1.0) < 1e-9


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_decoder_distributions_normalise(n_nodes, seed):
    dec = shared_decoder()
    rng = np.random.default_rng(seed)
    cand = tuple(k for k in range(n_nodes) if rng.random() < 0.5)
    st_ = step_pieces(dec, n_nodes=n_nodes, cand=cand, seed=seed)
    pr1 = st_.logp_vocab.exp()
    pr2 = st_.logp_copy.exp()
    assert abs(pr1.sum().item() - 1.0) < 1e-9
    outside = [k for k in range(n_nodes) if k not in cand]
    assert pr2[0, 0, outside].sum().item() == 0.0
    if cand:
        assert abs(pr2.sum().item() - 1.0) < 1e-9
        a = st_.log_alpha.exp().item()
        assert 0.0 < a < 1.0
        total = a * pr1.sum() + st_.log_one_minus_alpha.exp() * pr2.sum()
        assert abs(total.item() - 1.0) < 1e-9


_DECODERS = []


def shared_decoder():
    if not _DECODERS:
        _DECODERS.append(make_decoder(vocab_size=6, seed=9))
    return _DECODERS[0]


# -- search ---------------------------------------------------------------------------------------

END = "<end>"


def table_model(seed, vocab=("a", "b", END), depth=3, sharp=2.0):
    """Step function whose log-probabilities depend on the whole prefix."""
    rng = np.random.default_rng(seed)
    tokens = list(vocab)
    cache = {}

    def step(state, prefix):
        key = tuple(prefix)
        if key not in cache:
            logits = rng.normal(size=len(tokens)) * sharp
            cache[key] = logits - np.logaddexp.reduce(logits)
        return tokens, cache[key], state + 1, None

    return step


@pytest.mark.oracle
def test_beam_matches_exhaustive_on_tiny_models():
    cfg = BeamConfig(width=8, max_len=3, length_penalty=0.7)
    for seed in range(20):
        step = table_model(seed)
        b = beam_search(step, 0, cfg, END)
        e = exhaustive_search(step, 0, cfg, END)
        assert (b.tokens, b.finished) == (e.tokens, e.finished)
        assert abs(b.logp - e.logp) < 1e-12


@pytest.mark.oracle
def test_beam_width_one_is_greedy():
    for seed in range(50):
        step = table_model(seed, vocab=("a", "b", "c", END), sharp=1.5)
        b = beam_search(step, 0, BeamConfig(width=1, max_len=12), END)
        g = greedy_search(step, 0, 12, END)
        assert b.tokens == g.tokens and b.finished == g.finished


def test_end_first_gives_empty_sentence():
    def step(state, prefix):
        return ["a", END], np.log([0.1, 0.9]), state, None

    assert beam_search(step, None, BeamConfig(), END).tokens == []
    assert greedy_search(step, None, 50, END).tokens == []


def test_generation_stops_at_max_length():
    def step(state, prefix):
        return ["a", END], np.log([0.99, 0.01]), state, None

    hyp = beam_search(step, None, BeamConfig(width=2, max_len=5), END)
    assert hyp.tokens == ["a"] * 5 and not hyp.finished


def test_beam_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(width=0)
    assert BeamConfig() == BeamConfig(width=8, max_len=50, max_aspects=10, length_penalty=0.7)
