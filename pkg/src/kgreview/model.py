"""The full review generator: graph encoder, aspect decoder, sentence decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .aspect_decoder import AspectDecoder, MarginLossConfig, capsule_norms, margin_loss
from .capsules import CapsGNN, CapsuleCache, parameter_version, subgraph_edges
from .data import END, ReviewRecord, Vocabulary
from .errors import InputFileError, UnknownNode
from .hkg import HKG, CopyIndex, UserSubgraph, context_subgraph, user_id
from .sentence_decoder import BeamConfig, SentenceDecoder, beam_search, greedy_search, mix


@dataclass
class ModelConfig:
    num_aspects: int = 10
    d_e: int = 512
    d_h: int = 512
    d_c: int = 100
    num_graph_capsules: int = 10
    d_a: int = 512
    d_w: int = 512
    d_s: int = 512
    gcn_layers: int = 3
    gru_layers: int = 2
    routing_iterations: int = 3
    dropout: float = 0.2
    num_ratings: int = 5
    encoder: str = "capsule"
    copy: bool = True
    subgraph_cap: int = 512
    pairwise_aspect_routing: bool = True
    aspect_attention: str = "vector"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GenerationContext:
    """One ``(user, item, rating)`` context plus its graph neighbourhood."""

    user: str
    item: str
    rating: int
    subgraph: UserSubgraph
    edges: torch.Tensor
    rows: torch.Tensor
    user_row: int
    item_row: int
    copy_index: CopyIndex

    @property
    def root(self) -> str:
        return self.subgraph.root.id


@dataclass
class SentenceBatch:
    """Teacher-forcing tensors for all sentences of one review."""

    prev_ids: torch.Tensor  # (B, T)
    token_ids: torch.Tensor  # (B, T) memory token ids
    vocab_target: torch.Tensor  # (B, T)
    vocab_route: torch.Tensor  # (B, T) bool
    candidate_mask: torch.Tensor  # (B, T, N) bool
    copy_match: torch.Tensor  # (B, T, N) bool
    memory_mask: torch.Tensor  # (B, T, 3 + T) bool
    valid: torch.Tensor  # (B, T) bool

    @property
    def num_tokens(self) -> int:
        return int(self.valid.sum())


@dataclass
class GeneratedReview:
    aspects: list[int]
    sentences: list[list[str]]
    copy_events: list[dict] = field(default_factory=list)

    @property
    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s]


class ReviewModel(nn.Module):
    """Parameter groups: ``theta1`` (graph and aspect side) and ``theta2``
    (sentence side)."""

    def __init__(self, cfg: ModelConfig, graph: HKG, vocab: Vocabulary, users=()):
        super().__init__()
        self.cfg = cfg
        self.graph = graph
        self.vocab = vocab
        extra = sorted({user_id(u) for u in users} - set(graph.nodes))
        self.node_keys = list(graph.nodes) + extra
        self.node_index = {k: i for i, k in enumerate(self.node_keys)}
        self.relation_ids = sorted(graph.relations)
        self.relation_index = {r: i for i, r in enumerate(self.relation_ids)}

        self.node_embedding = nn.Embedding(len(self.node_keys), cfg.d_e)
        nn.init.uniform_(self.node_embedding.weight, -0.1, 0.1)
        self.rating_embedding = nn.Embedding(cfg.num_ratings, cfg.d_e)
        nn.init.uniform_(self.rating_embedding.weight, -0.1, 0.1)
        self.graph_encoder = CapsGNN(
            len(self.relation_ids), cfg.d_e, cfg.gcn_layers, cfg.num_graph_capsules,
            cfg.d_c, cfg.routing_iterations, cfg.encoder,
        )
        self.aspect_decoder = AspectDecoder(
            cfg.num_aspects, cfg.d_e, cfg.d_h, cfg.d_a, cfg.d_c, cfg.num_graph_capsules,
            cfg.gru_layers, cfg.routing_iterations, cfg.dropout, cfg.pairwise_aspect_routing,
            cfg.aspect_attention,
        )
        self.sentence_decoder = SentenceDecoder(
            len(vocab), cfg.d_w, cfg.d_s, cfg.d_c, cfg.d_e, cfg.gcn_layers * cfg.d_e,
            cfg.gru_layers, cfg.dropout, cfg.copy,
        )
        self.margin_cfg = MarginLossConfig()
        self.capsule_cache = CapsuleCache()
        self._contexts: dict[tuple, GenerationContext] = {}
        self._batches: dict[tuple, SentenceBatch] = {}

    # -- parameter groups -------------------------------------------------
    def theta1(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("sentence_decoder.")]

    def theta2(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("sentence_decoder.")]

    def graph_parameters_version(self) -> str:
        parts = nn.ModuleDict({"emb": self.node_embedding, "enc": self.graph_encoder})
        return parameter_version(parts)

    def load_pretrained(self, path):
        """Overwrite embedding rows from a TSV of ``node_id`` followed by floats."""
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 2:
                    continue
                if len(parts) - 1 != self.cfg.d_e:
                    raise InputFileError(path, f"expected {self.cfg.d_e} floats, got {len(parts) - 1}", lineno)
                row = self.node_index.get(parts[0])
                if row is not None:
                    with torch.no_grad():
                        self.node_embedding.weight[row] = torch.tensor([float(x) for x in parts[1:]])

    # -- contexts ---------------------------------------------------------
    def context(self, user: str, item: str, rating: int) -> GenerationContext:
        key = (user, item)
        ctx = self._contexts.get(key)
        if ctx is None:
            sub = context_subgraph(self.graph, user, item, self.cfg.subgraph_cap)
            if item not in self.graph.alignment:
                raise UnknownNode(f"item {item!r} is not in the graph")
            ctx = GenerationContext(
                user=user, item=item, rating=rating, subgraph=sub,
                edges=subgraph_edges(sub, self.relation_index),
                rows=torch.tensor([self.node_index[n] for n in sub.node_ids], dtype=torch.long),
                user_row=self.node_index[user_id(user)],
                item_row=self.node_index[self.graph.alignment[item]],
                copy_index=CopyIndex(sub),
            )
            self._contexts[key] = ctx
        if ctx.rating != rating:
            ctx = GenerationContext(**{**ctx.__dict__, "rating": rating})
        return ctx

    def context_embeddings(self, ctx: GenerationContext) -> torch.Tensor:
        """``(3, d_e)``: user, item and rating embeddings."""
        rating = min(max(int(ctx.rating), 1), self.cfg.num_ratings) - 1
        return torch.stack([
            self.node_embedding.weight[ctx.user_row],
            self.node_embedding.weight[ctx.item_row],
            self.rating_embedding.weight[rating],
        ])

    def encode_graph(self, ctx: GenerationContext):
        """``(P, primary)`` for the context subgraph."""
        x0 = self.node_embedding(ctx.rows)
        return self.graph_encoder(x0, ctx.edges)

    def initial_aspect_state(self, ctx, context=None):
        context = self.context_embeddings(ctx) if context is None else context
        return self.aspect_decoder.init_state(context[0], context[1], context[2])

    # -- losses -----------------------------------------------------------
    def sentence_batch(self, ctx: GenerationContext, sentences: list[list[str]]) -> SentenceBatch:
        vocab = self.vocab
        N = ctx.subgraph.size
        B = len(sentences)
        T = max(len(s) for s in sentences) + 1
        prev = np.full((B, T), vocab.start, dtype=np.int64)
        tok_ids = np.full((B, T), vocab.end, dtype=np.int64)
        vt = np.full((B, T), vocab.end, dtype=np.int64)
        vroute = np.ones((B, T), dtype=bool)
        cand = np.zeros((B, T, N), dtype=bool)
        match = np.zeros((B, T, N), dtype=bool)
        mem = np.zeros((B, T, 3 + T), dtype=bool)
        mem[:, :, :3] = True
        valid = np.zeros((B, T), dtype=bool)
        surfaces = np.array(ctx.copy_index.surfaces, dtype=object)
        for b, toks in enumerate(sentences):
            seen: set[int] = set()
            for t in range(len(toks) + 1):
                valid[b, t] = True
                if t > 0:
                    prev[b, t] = vocab.id(toks[t - 1])
                    tok_ids[b, t - 1] = vocab.id(toks[t - 1])
                    mem[b, t, 3:3 + t] = True
                    if self.cfg.copy:
                        seen |= ctx.copy_index.for_token(toks[t - 1])
                target = toks[t] if t < len(toks) else END
                if seen:
                    idx = sorted(seen)
                    cand[b, t, idx] = True
                    match[b, t, idx] = surfaces[idx] == target
                in_vocab = target in vocab
                vt[b, t] = vocab.id(target)
                vroute[b, t] = in_vocab or not match[b, t].any()
        return SentenceBatch(
            torch.from_numpy(prev), torch.from_numpy(tok_ids), torch.from_numpy(vt),
            torch.from_numpy(vroute), torch.from_numpy(cand), torch.from_numpy(match),
            torch.from_numpy(mem), torch.from_numpy(valid),
        )

    def sentence_log_probs(self, batch: SentenceBatch, q: torch.Tensor, context: torch.Tensor,
                           primary: torch.Tensor) -> torch.Tensor:
        """Per-token mixture log-probabilities ``(B, T)``; padding is zero."""
        dec = self.sentence_decoder
        B = q.shape[0]
        ctx_mem = context.unsqueeze(0).expand(B, -1, -1)
        x = dec.dropout(dec.inputs(batch.prev_ids, q))
        h0 = dec.initial_hidden(ctx_mem, q)
        out, _ = dec.gru(x.transpose(0, 1), h0)
        s = out.transpose(0, 1)
        memory = torch.cat([ctx_mem, dec.embedding(batch.token_ids)], dim=1)
        st = dec.distribution(s, memory, batch.memory_mask, primary, batch.candidate_mask)
        logp = dec.target_log_prob(st, batch.vocab_target, batch.vocab_route, batch.copy_match)
        return logp.masked_fill(~batch.valid, 0.0)

    def review_losses(self, record: ReviewRecord, aspect: bool = True, sentence: bool = True,
                      theta1_grad: bool = True, memo: dict | None = None, encoded: dict | None = None) -> dict:
        """Margin loss and token NLL of one teacher-forced review.

        With ``theta1_grad=False`` the graph/aspect side runs without
        gradients; ``memo`` then caches its outputs across calls.
        ``encoded`` shares graph encodings between reviews with the same
        subgraph root while the parameters stay fixed (one minibatch).
        """
        ctx = self.context(record.user, record.item, record.rating)
        gold = [int(a) for a in record.aspects]
        out = {}

        def theta1_outputs():
            context = self.context_embeddings(ctx)
            if encoded is None:
                P, primary = self.encode_graph(ctx)
            else:
                if ctx.root not in encoded:
                    encoded[ctx.root] = self.encode_graph(ctx)
                P, primary = encoded[ctx.root]
            Q = self.aspect_decoder.teacher_forced(P, self.initial_aspect_state(ctx, context), gold)
            return context, primary, Q

        if theta1_grad:
            context, primary, Q = theta1_outputs()
        else:
            key = _record_key(record)
            if memo is not None and key in memo:
                context, primary, Q = memo[key]
            else:
                with torch.no_grad():
                    context, primary, Q = theta1_outputs()
                if memo is not None:
                    memo[key] = (context, primary, Q)

        if aspect:
            targets = gold + [self.aspect_decoder.end]
            out["margin"] = margin_loss(Q, targets, self.margin_cfg)
            pred = capsule_norms(Q).argmax(-1)
            out["aspect_correct"] = int((pred == torch.tensor(targets)).sum())
            out["aspect_steps"] = len(targets)
        if sentence:
            key = _record_key(record)
            batch = self._batches.get(key)
            if batch is None:
                batch = self.sentence_batch(ctx, [s.tokens for s in record.sentences])
                self._batches[key] = batch
            q = Q[torch.arange(len(gold)), torch.tensor(gold, dtype=torch.long)]
            logp = self.sentence_log_probs(batch, q, context, primary)
            out["nll"] = -logp.sum()
            out["tokens"] = batch.num_tokens
        return out

    def clear_caches(self):
        self._contexts.clear()
        self._batches.clear()
        self.capsule_cache = CapsuleCache()

    # -- generation -------------------------------------------------------
    def sentence_step_fn(self, ctx, q, context, primary):
        dec = self.sentence_decoder
        vocab = self.vocab
        surfaces = ctx.copy_index.surfaces
        kinds = [n.kind.value for n in ctx.subgraph.nodes]
        node_ids = ctx.subgraph.node_ids
        qb = q.unsqueeze(0)
        ctx_mem = context.unsqueeze(0)

        def step(hidden, prefix):
            prev = vocab.start if not prefix else vocab.id(prefix[-1])
            x = dec.inputs(torch.tensor([[prev]]), qb)
            out, new_hidden = dec.gru(x.transpose(0, 1), hidden)
            s = out.transpose(0, 1)
            tok_ids = torch.tensor([vocab.encode(prefix)], dtype=torch.long)
            memory = torch.cat([ctx_mem, dec.embedding(tok_ids)], dim=1)
            mem_mask = torch.ones((1, 1, memory.shape[1]), dtype=torch.bool)
            cands = sorted(ctx.copy_index.candidates(prefix)) if self.cfg.copy else []
            cmask = torch.zeros((1, 1, len(surfaces)), dtype=torch.bool)
            cmask[0, 0, cands] = True
            st = dec.distribution(s, memory, mem_mask, primary, cmask)
            pr1 = st.logp_vocab[0, 0].exp().double().numpy()
            if cands:
                alpha = float(st.log_alpha[0, 0].exp())
                pr2 = st.logp_copy[0, 0, cands].exp().double().numpy()
                m = mix(alpha, pr1, vocab.itos, pr2, [surfaces[c] for c in cands])
                events = _copy_events(m, [surfaces[c] for c in cands], cands, node_ids, kinds, vocab)
            else:
                m = mix(1.0, pr1, vocab.itos)
                events = None
            with np.errstate(divide="ignore"):
                logp = np.log(m.probs)
            return m.tokens, logp, new_hidden, events

        return step

    @torch.no_grad()
    def generate_review(self, ctx: GenerationContext, beam: BeamConfig = BeamConfig(),
                        greedy: bool = False, zero_capsules: bool = False,
                        version: str | None = None) -> GeneratedReview:
        """Infer the aspect sequence, then decode one sentence per aspect."""
        context = self.context_embeddings(ctx)
        if version is not None:
            P = self.capsule_cache.get(ctx.root, version, lambda: self.encode_graph(ctx)[0])
            primary = self.capsule_cache.get(ctx.root + "#nodes", version, lambda: self.encode_graph(ctx)[1])
        else:
            P, primary = self.encode_graph(ctx)
        if zero_capsules:
            P = torch.zeros_like(P)
        aspects = self.aspect_decoder.greedy(P, self.initial_aspect_state(ctx, context), beam.max_aspects)
        out = GeneratedReview([], [], [])
        for j, (a, q) in enumerate(aspects):
            h0 = self.sentence_decoder.initial_hidden(context.unsqueeze(0), q.unsqueeze(0))
            step = self.sentence_step_fn(ctx, q, context, primary)
            if greedy:
                hyp = greedy_search(step, h0, beam.max_len, END)
            else:
                hyp = beam_search(step, h0, beam, END)
            out.aspects.append(a)
            out.sentences.append(hyp.tokens)
            out.copy_events.extend(dict(e, sentence=j) for e in hyp.events)
        return out


def _copy_events(m, cand_surfaces, cands, node_ids, kinds, vocab):
    """Tokens whose mixture mass comes mostly from the copy route."""
    copy_mass: dict[str, float] = {}
    for tok, p in zip(cand_surfaces, m.pr2):
        copy_mass[tok] = copy_mass.get(tok, 0.0) + (1 - m.alpha) * p
    events = {}
    for c, tok in zip(cands, cand_surfaces):
        gen = m.alpha * m.pr1[vocab.stoi[tok]] if tok in vocab else 0.0
        if copy_mass[tok] > gen and tok not in events:
            events[tok] = {"node": node_ids[c], "kind": kinds[c]}
    return events



def _record_key(record: ReviewRecord) -> tuple:
    return (record.user, record.item, record.rating, tuple(tuple(s.tokens) for s in record.sentences),
            tuple(record.aspects))
