"""Recurrent aspect decoder that reads graph capsules through attention and
turns them into aspect capsules with a second round of routing."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .capsules import DynamicRouting
from .errors import MissingEmbedding, ShapeMismatch, UnknownLabel


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m_minus < m_plus < 1")


def capsule_norms(Q: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(Q, dim=-1)


def margin_loss(Q: torch.Tensor, gold, cfg: MarginLossConfig = MarginLossConfig()) -> torch.Tensor:
    """Hinge loss on capsule lengths, summed over the leading (step) axes.

    ``Q`` is ``(..., K, d)`` and ``gold`` holds one label per leading index.
    """
    norms = capsule_norms(Q)
    gold = torch.as_tensor(gold, device=Q.device).long()
    onehot = nn.functional.one_hot(gold, norms.shape[-1]).to(norms.dtype)
    present = torch.clamp(cfg.m_plus - norms, min=0) ** 2
    absent = torch.clamp(norms - cfg.m_minus, min=0) ** 2
    per_capsule = onehot * present + cfg.lam * (1 - onehot) * absent
    return per_capsule.sum()


def predict_aspect(Q: torch.Tensor) -> int:
    """Index of the longest capsule; the first one wins ties."""
    return int(torch.argmax(capsule_norms(Q)).item())


def reweight_capsules(P: torch.Tensor, scores: torch.Tensor):
    """Scale each capsule by the softmax of its attention score over capsules.

    ``scores`` is either one scalar per capsule, shaped like ``P`` without
    its last axis, or one score per capsule dimension, shaped like ``P``;
    the softmax then runs over capsules separately for every dimension.
    Returns ``(P_tilde, weights)``; works over any leading batch axes.
    """
    if scores.shape == P.shape[:-1]:
        w = torch.softmax(scores, dim=-1)
        return w.unsqueeze(-1) * P, w
    if scores.shape == P.shape:
        w = torch.softmax(scores, dim=-2)
        return w * P, w
    raise ShapeMismatch(f"scores {tuple(scores.shape)} do not match capsules {tuple(P.shape)}")


class AspectDecoder(nn.Module):
    """Labels ``0..A-1`` are aspects, ``A`` is END and ``A+1`` is START.

    END owns an aspect capsule of its own so stopping is decided by the same
    capsule-length argmax as every other label.

    ``attention="scalar"`` scores each graph capsule with one number, so the
    decoder state steers the read through a single projection;
    ``attention="vector"`` lets ``W_1`` emit one score per capsule dimension.
    """

    def __init__(self, num_aspects, d_e, d_h, d_a, d_c, num_graph_capsules,
                 layers=2, iterations=3, dropout=0.2, pairwise_routing=True, attention="vector"):
        super().__init__()
        if attention not in ("scalar", "vector"):
            raise ValueError(f"unknown attention {attention!r}")
        self.num_aspects = num_aspects
        self.num_graph_capsules = num_graph_capsules
        self.d_c = d_c
        self.layers = layers
        self.context_mlp = nn.Sequential(
            nn.Linear(3 * d_e, d_h), nn.Tanh(), nn.Linear(d_h, d_h), nn.Tanh()
        )
        self.label_embedding = nn.Embedding(num_aspects + 2, d_a)
        nn.init.uniform_(self.label_embedding.weight, -0.1, 0.1)
        self.gru = nn.GRU(d_a, d_h, layers, dropout=dropout if layers > 1 else 0.0)
        self.dropout = nn.Dropout(dropout)
        self.attention = nn.Linear(d_c + d_h, 1 if attention == "scalar" else d_c, bias=False)
        self.vector_attention = attention == "vector"
        self.routing = DynamicRouting(d_c, num_aspects + 1, d_c, iterations,
                                      num_in=num_graph_capsules if pairwise_routing else None)

    @property
    def end(self) -> int:
        return self.num_aspects

    @property
    def start(self) -> int:
        return self.num_aspects + 1

    def init_state(self, v_u, v_i, v_s) -> torch.Tensor:
        """``(layers, d_h)`` initial hidden state from the context embedding."""
        if v_u is None or v_i is None or v_s is None:
            raise MissingEmbedding("context needs user, item and rating embeddings")
        v_c = self.context_mlp(torch.cat([v_u, v_i, v_s], dim=-1))
        return v_c.unsqueeze(0).expand(self.layers, -1).contiguous()

    def _check_labels(self, labels):
        for a in labels:
            if not 0 <= int(a) <= self.start or int(a) == self.end:
                raise UnknownLabel(f"label {a} is not an aspect or START")

    def step(self, h: torch.Tensor, a_prev: int):
        """One GRU step; returns ``(top_layer_output, new_hidden)``."""
        self._check_labels([a_prev])
        x = self.dropout(self.label_embedding.weight[a_prev]).view(1, 1, -1)
        out, h_new = self.gru(x, h.unsqueeze(1))
        return out[0, 0], h_new[:, 0]

    def attention_scores(self, P: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """``tanh(W_1 [p_z; h])`` for every capsule; ``h`` may carry step axes."""
        if P.shape[-1] != self.d_c:
            raise ShapeMismatch(f"graph capsules have dim {P.shape[-1]}, expected {self.d_c}")
        hs = h.unsqueeze(-2).expand(*h.shape[:-1], P.shape[-2], h.shape[-1])
        Ps = P.expand(*h.shape[:-1], *P.shape[-2:])
        scores = torch.tanh(self.attention(torch.cat([Ps, hs], dim=-1)))
        return scores if self.vector_attention else scores.squeeze(-1)

    def adapt_capsules(self, P, h):
        return reweight_capsules(P.expand(*h.shape[:-1], *P.shape[-2:]), self.attention_scores(P, h))

    def aspect_capsules(self, P_tilde: torch.Tensor) -> torch.Tensor:
        return self.routing(P_tilde)

    def teacher_forced(self, P: torch.Tensor, h0: torch.Tensor, gold: list[int]) -> torch.Tensor:
        """Aspect capsules for every step of a gold sequence.

        Inputs are ``START, a_1..a_m``; the ``m+1`` outputs score
        ``a_1..a_m, END``.  Returns ``(m+1, A+1, d_c)``.
        """
        inputs = [self.start] + [int(a) for a in gold]
        self._check_labels(inputs)
        x = self.dropout(self.label_embedding(torch.tensor(inputs, device=P.device)))
        out, _ = self.gru(x.unsqueeze(1), h0.unsqueeze(1))
        P_tilde, _ = self.adapt_capsules(P, out[:, 0])
        return self.aspect_capsules(P_tilde)

    @torch.no_grad()
    def greedy(self, P: torch.Tensor, h0: torch.Tensor, max_len: int = 10):
        """Free-running decode; returns ``[(label, capsule), ...]`` without END."""
        h, prev, out = h0, self.start, []
        for _ in range(max_len):
            top, h = self.step(h, prev)
            P_tilde, _ = self.adapt_capsules(P, top)
            Q = self.aspect_capsules(P_tilde)
            a = predict_aspect(Q)
            if a == self.end:
                break
            out.append((a, Q[a]))
            prev = a
        return out
