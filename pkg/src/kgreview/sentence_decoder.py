"""Aspect-conditioned sentence decoder with a graph-restricted copy route,
plus the beam search used to decode it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch

NEG = -1e30


def attend(query: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor | None = None):
    """Dot-product attention; returns ``(context, weights)``.

    ``query`` is ``(..., d)`` and ``memory`` is ``(..., M, d)``; ``mask`` marks
    the memory slots each query may see.
    """
    scores = (memory * query.unsqueeze(-2)).sum(-1)
    if mask is not None:
        scores = scores.masked_fill(~mask, NEG)
    w = torch.softmax(scores, dim=-1)
    return (w.unsqueeze(-1) * memory).sum(-2), w


@dataclass
class MixtureOutput:
    alpha: float
    pr1: np.ndarray
    pr2: np.ndarray | None
    tokens: list[str]
    probs: np.ndarray

    def prob(self, token: str) -> float:
        try:
            return float(self.probs[self.tokens.index(token)])
        except ValueError:
            return 0.0


def mix(alpha: float, pr1, vocab_tokens: Sequence[str], pr2=None, candidate_tokens: Sequence[str] = ()) -> MixtureOutput:
    """``alpha * Pr1 + (1 - alpha) * Pr2`` over the union of both supports.

    A surface token reachable through both routes collects both masses;
    candidate tokens outside the vocabulary are appended after it.  Without
    copy candidates the gate is pinned to 1.
    """
    pr1 = np.asarray(pr1, dtype=np.float64)
    if pr2 is None or len(candidate_tokens) == 0:
        return MixtureOutput(1.0, pr1, None, list(vocab_tokens), pr1.copy())
    pr2 = np.asarray(pr2, dtype=np.float64)
    probs = alpha * pr1
    tokens = list(vocab_tokens)
    index = {t: i for i, t in enumerate(tokens)}
    extra: dict[str, float] = {}
    for tok, p in zip(candidate_tokens, pr2):
        share = (1.0 - alpha) * p
        if tok in index:
            probs[index[tok]] += share
        else:
            extra[tok] = extra.get(tok, 0.0) + share
    if extra:
        names = sorted(extra)
        tokens += names
        probs = np.concatenate([probs, [extra[t] for t in names]])
    return MixtureOutput(float(alpha), pr1, pr2, tokens, probs)


@dataclass
class StepTensors:
    """Per-position pieces of the output distribution."""

    logp_vocab: torch.Tensor  # (..., V)
    logp_copy: torch.Tensor  # (..., N), NEG outside the candidate set
    log_alpha: torch.Tensor  # (...,)
    log_one_minus_alpha: torch.Tensor  # (...,), NEG when copying is off
    has_candidates: torch.Tensor  # (...,) bool


class SentenceDecoder(nn.Module):
    """GRU decoder over ``v_{w_prev} * proj(q)`` with a copy route.

    Attention memory is the context embeddings followed by the embeddings of
    the tokens generated so far in the sentence, so the context, word and
    state sizes must agree.
    """

    def __init__(self, vocab_size, d_w, d_s, d_c, d_e, d_node, layers=2, dropout=0.2, copy=True):
        super().__init__()
        if not d_w == d_s == d_e:
            raise ShapeMismatch(f"attention memory needs d_W == d_S == d_E, got {d_w}, {d_s}, {d_e}")
        self.layers = layers
        self.copy = copy
        self.embedding = nn.Embedding(vocab_size, d_w)
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        self.aspect_projection = nn.Linear(d_c, d_w, bias=False)
        self.init_state = nn.Linear(3 * d_e + d_c, d_s)
        self.gru = nn.GRU(d_w, d_s, layers, dropout=dropout if layers > 1 else 0.0)
        self.dropout = nn.Dropout(dropout)
        self.W2 = nn.Linear(2 * d_s, d_s, bias=False)
        self.W3 = nn.Linear(d_s, vocab_size)
        self.W4 = nn.Linear(2 * d_s + d_node, d_s, bias=False)
        self.W5 = nn.Linear(d_s, 1)
        self.gate = nn.Linear(2 * d_s, 1)

    def initial_hidden(self, context: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """``(layers, B, d_s)`` from the stacked context ``(B, 3, d_e)`` and capsules ``(B, d_c)``."""
        h = torch.tanh(self.init_state(torch.cat([context.flatten(-2), q], dim=-1)))
        return h.unsqueeze(0).expand(self.layers, *h.shape).contiguous()

    def inputs(self, prev_ids: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """``v_{w_prev} * proj(q)`` for ``prev_ids`` ``(B, T)`` and ``q`` ``(B, d_c)``."""
        return self.embedding(prev_ids) * self.aspect_projection(q).unsqueeze(-2)

    def distribution(self, s, memory, memory_mask, node_features, candidate_mask) -> StepTensors:
        """Output pieces for states ``s`` ``(B, T, d_s)``.

        ``memory`` is ``(B, M, d)`` with ``memory_mask`` ``(B, T, M)``;
        ``node_features`` ``(N, d_node)`` holds the graph encoder's node
        vectors and ``candidate_mask`` ``(B, T, N)`` the copyable nodes.
        """
        c, _ = attend(s, memory.unsqueeze(1), memory_mask)
        cs = torch.cat([c, s], dim=-1)
        s_tilde = self.dropout(torch.tanh(self.W2(cs)))
        logp_vocab = torch.log_softmax(self.W3(s_tilde), dim=-1)

        has = candidate_mask.any(-1) if self.copy else torch.zeros(s.shape[:-1], dtype=torch.bool)
        d2 = cs.shape[-1]
        w_state, w_node = self.W4.weight[:, :d2], self.W4.weight[:, d2:]
        hidden = torch.tanh((cs @ w_state.T).unsqueeze(-2) + node_features @ w_node.T)
        scores = self.W5(hidden).squeeze(-1).masked_fill(~candidate_mask, NEG)
        logp_copy = torch.log_softmax(scores, dim=-1).masked_fill(~candidate_mask, NEG)

        g = self.gate(cs).squeeze(-1)
        log_alpha = nn.functional.logsigmoid(g).masked_fill(~has, 0.0)
        log_beta = nn.functional.logsigmoid(-g).masked_fill(~has, NEG)
        return StepTensors(logp_vocab, logp_copy, log_alpha, log_beta, has)

    def target_log_prob(self, st: StepTensors, vocab_target, vocab_route, copy_match) -> torch.Tensor:
        """Mixture log-probability of each target.

        ``vocab_target`` holds the vocabulary id scored by the generation
        route and ``vocab_route`` whether that route applies; ``copy_match``
        ``(..., N)`` marks candidate nodes whose surface equals the target.
        """
        gen = st.logp_vocab.gather(-1, vocab_target.unsqueeze(-1)).squeeze(-1)
        gen = (st.log_alpha + gen).masked_fill(~vocab_route, NEG)
        copy = torch.logsumexp(st.logp_copy.masked_fill(~copy_match, NEG), dim=-1)
        copy = (st.log_one_minus_alpha + copy).masked_fill(~copy_match.any(-1), NEG)
        return torch.logaddexp(gen, copy)


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class BeamConfig:
    width: int = 8
    max_len: int = 50
    max_aspects: int = 10
    length_penalty: float = 0.7

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be at least 1")


@dataclass
class Hypothesis:
    tokens: list[str]
    logp: float
    finished: bool
    events: list = field(default_factory=list)

    def score(self, length_penalty: float) -> float:
        return normalized_score(self.logp, len(self.tokens) + int(self.finished), length_penalty)


def normalized_score(logp: float, length: int, length_penalty: float) -> float:
    return logp / (max(length, 1) ** length_penalty)


# step_fn(state, prefix) -> (tokens, logp array, new_state, events or None)
StepFn = Callable[[object, list], tuple]


def _ranked(logp: np.ndarray) -> np.ndarray:
    return np.argsort(-logp, kind="stable")


def beam_search(step_fn: StepFn, init_state, cfg: BeamConfig = BeamConfig(), end_token: str = "<end>") -> Hypothesis:
    """Beam search scored by length-normalised log-probability.

    A hypothesis finishes when it emits ``end_token`` (not included in its
    tokens) or reaches ``cfg.max_len`` tokens.  The length used for
    normalisation counts the END symbol.  Search stops early once ``width``
    hypotheses have finished and none of the live ones currently scores
    better than the best finished one.
    """
    live = [(Hypothesis([], 0.0, False), init_state)]
    finished: list[Hypothesis] = []
    for t in range(cfg.max_len):
        expansions = []
        for hyp, state in live:
            tokens, logp, new_state, events = step_fn(state, hyp.tokens)
            for k in _ranked(logp)[: cfg.width]:
                expansions.append((hyp.logp + float(logp[k]), hyp, tokens[k], new_state, events))
        order = sorted(range(len(expansions)), key=lambda i: -expansions[i][0])
        live = []
        for i in order[: cfg.width]:
            total, hyp, tok, state, events = expansions[i]
            ev = list(hyp.events)
            if events and tok in events:
                ev.append(dict(events[tok], step=len(hyp.tokens)))
            if tok == end_token:
                finished.append(Hypothesis(list(hyp.tokens), total, True, ev))
            else:
                live.append((Hypothesis(hyp.tokens + [tok], total, False, ev), state))
        if not live:
            break
        if len(finished) >= cfg.width:
            best_done = max(h.score(cfg.length_penalty) for h in finished)
            if max(h.score(cfg.length_penalty) for h, _ in live) < best_done:
                break
    finished.extend(h for h, _ in live if len(h.tokens) >= cfg.max_len)
    best = max(range(len(finished)), key=lambda i: (finished[i].score(cfg.length_penalty), -i))
    return finished[best]


def greedy_search(step_fn: StepFn, init_state, max_len: int = 50, end_token: str = "<end>") -> Hypothesis:
    state, tokens, total, events_out = init_state, [], 0.0, []
    for _ in range(max_len):
        toks, logp, state, events = step_fn(state, tokens)
        k = int(np.argmax(logp))
        total += float(logp[k])
        if events and toks[k] in events:
            events_out.append(dict(events[toks[k]], step=len(tokens)))
        if toks[k] == end_token:
            return Hypothesis(tokens, total, True, events_out)
        tokens.append(toks[k])
    return Hypothesis(tokens, total, False, events_out)


def exhaustive_search(step_fn: StepFn, init_state, cfg: BeamConfig, end_token: str = "<end>") -> Hypothesis:
    """Enumerate every sequence up to ``cfg.max_len``; the oracle for beam search."""
    best = None

    def visit(state, tokens, total, events):
        nonlocal best
        toks, logp, new_state, ev = step_fn(state, tokens)
        for k, tok in enumerate(toks):
            lp = total + float(logp[k])
            e = list(events)
            if ev and tok in ev:
                e.append(dict(ev[tok], step=len(tokens)))
            if tok == end_token:
                cand = Hypothesis(list(tokens), lp, True, e)
            elif len(tokens) + 1 >= cfg.max_len:
                cand = Hypothesis(tokens + [tok], lp, False, e)
            else:
                visit(new_state, tokens + [tok], lp, e)
                continue
            if best is None or cand.score(cfg.length_penalty) > best.score(cfg.length_penalty):
                best = cand

    visit(init_state, [], 0.0, [])
    return best
