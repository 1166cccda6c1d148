"""Relational graph convolution, capsule squashing and dynamic routing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import EmptyInput, ShapeMismatch
from .hkg import UserSubgraph

ENCODERS = ("capsule", "rgcn", "gat")


def squash(s: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Scale ``s`` to norm ``|s| / (1 + |s|)``; zero stays zero."""
    norm = torch.linalg.vector_norm(s, dim=dim, keepdim=True)
    return s / (1.0 + norm)


def route(u_hat: torch.Tensor, iterations: int = 3, return_couplings: bool = False):
    """Routing by agreement over prediction vectors.

    ``u_hat`` has shape ``(..., N, Z, d)``: the prediction of input capsule
    ``j`` for output capsule ``z``.  Logits start at zero, coupling
    coefficients are a softmax over the outputs for each input, and the
    logits grow by the agreement ``u_hat . p`` after every iteration.
    Returns the ``(..., Z, d)`` output capsules and, optionally, the coupling
    matrix of every iteration.
    """
    if u_hat.shape[-3] == 0:
        raise EmptyInput("routing needs at least one input capsule")
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    b = u_hat.new_zeros(u_hat.shape[:-1])
    couplings = []
    for it in range(iterations):
        c = torch.softmax(b, dim=-1)
        couplings.append(c)
        s = (c.unsqueeze(-1) * u_hat).sum(dim=-3)
        p = squash(s)
        if it + 1 < iterations:
            b = b + (u_hat * p.unsqueeze(-3)).sum(dim=-1)
    if return_couplings:
        return p, couplings
    return p


class DynamicRouting(nn.Module):
    """Input capsules -> ``num_out`` output capsules.

    By default one transform per output capsule is shared by every input, so
    the parameter count does not depend on how many nodes a subgraph has.
    With a fixed number of inputs (``num_in``) each input/output pair gets
    its own transform instead.
    """

    def __init__(self, in_dim: int, num_out: int, out_dim: int, iterations: int = 3, num_in: int | None = None):
        super().__init__()
        self.iterations = iterations
        self.num_in = num_in
        shape = (num_out, out_dim, in_dim) if num_in is None else (num_in, num_out, out_dim, in_dim)
        self.weight = nn.Parameter(torch.empty(shape))
        fan = self.weight.view(-1, out_dim, in_dim)
        for w in fan:
            nn.init.xavier_uniform_(w)

    def predictions(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[-1]:
            raise ShapeMismatch(f"capsule dim {x.shape[-1]} != {self.weight.shape[-1]}")
        if self.num_in is None:
            return torch.einsum("zcd,...nd->...nzc", self.weight, x)
        if x.shape[-2] != self.num_in:
            raise ShapeMismatch(f"expected {self.num_in} input capsules, got {x.shape[-2]}")
        return torch.einsum("nzcd,...nd->...nzc", self.weight, x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return route(self.predictions(x), self.iterations)


class MeanPooling(DynamicRouting):
    """Uniform aggregation of predictions; the plain R-GCN read-out."""

    def forward(self, x):
        if x.shape[-2] == 0:
            raise EmptyInput("pooling needs at least one input capsule")
        return squash(self.predictions(x).mean(dim=-3))


class AttentionPooling(DynamicRouting):
    """Per-output attention over inputs, a GAT-style stand-in for routing."""

    def __init__(self, in_dim, num_out, out_dim, iterations=3):
        super().__init__(in_dim, num_out, out_dim, iterations)
        self.query = nn.Parameter(torch.empty(num_out, out_dim).uniform_(-0.1, 0.1))

    def forward(self, x):
        if x.shape[-2] == 0:
            raise EmptyInput("pooling needs at least one input capsule")
        u_hat = self.predictions(x)  # (..., N, Z, d)
        scores = torch.nn.functional.leaky_relu((u_hat * self.query).sum(-1), 0.2)
        w = torch.softmax(scores, dim=-2).unsqueeze(-1)
        return squash((w * u_hat).sum(dim=-3))


def make_readout(kind: str, in_dim: int, num_out: int, out_dim: int, iterations: int) -> DynamicRouting:
    cls = {"capsule": DynamicRouting, "rgcn": MeanPooling, "gat": AttentionPooling}[kind]
    return cls(in_dim, num_out, out_dim, iterations)


class RGCNLayer(nn.Module):
    """``relu(sum_r sum_k W_r v_k + W_0 v_j)`` with unnormalised neighbor sums."""

    def __init__(self, num_relations: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_relations, dim, dim))
        self.self_weight = nn.Parameter(torch.empty(dim, dim))
        bound = 1.0 / np.sqrt(dim)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.self_weight, -bound, bound)

    def forward(self, h: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        """``edges`` is a ``(3, E)`` long tensor of (src, dst, relation)."""
        if h.shape[-1] != self.self_weight.shape[0]:
            raise ShapeMismatch(f"embedding dim {h.shape[-1]} != {self.self_weight.shape[0]}")
        out = h @ self.self_weight.T
        if edges.shape[1]:
            src, dst, rel = edges
            per_relation = torch.einsum("rij,nj->rni", self.weight, h)
            msg = per_relation[rel, src]
            out = out.index_add(0, dst, msg)
        return torch.relu(out)


class RGCN(nn.Module):
    def __init__(self, num_relations: int, dim: int, layers: int = 3):
        super().__init__()
        if layers < 1:
            raise ValueError("R-GCN needs at least one layer")
        self.layers = nn.ModuleList(RGCNLayer(num_relations, dim) for _ in range(layers))

    def forward(self, h, edges) -> list[torch.Tensor]:
        outs = []
        for layer in self.layers:
            h = layer(h, edges)
            outs.append(h)
        return outs


class CapsGNN(nn.Module):
    """Subgraph node embeddings -> primary capsules -> graph capsules."""

    def __init__(self, num_relations, d_e, layers=3, num_capsules=10, d_c=100, iterations=3, encoder="capsule"):
        super().__init__()
        if encoder not in ENCODERS:
            raise ValueError(f"unknown graph encoder {encoder!r}")
        self.rgcn = RGCN(num_relations, d_e, layers)
        self.readout = make_readout(encoder, layers * d_e, num_capsules, d_c, iterations)

    def primary_capsules(self, x0, edges) -> torch.Tensor:
        return torch.cat(self.rgcn(x0, edges), dim=-1)

    def forward(self, x0, edges):
        """Returns ``(P, primary)``: graph capsules and per-node primary capsules."""
        primary = self.primary_capsules(x0, edges)
        return self.readout(primary), primary


def subgraph_edges(sub: UserSubgraph, relation_index: dict[str, int]) -> torch.Tensor:
    """Both directions of every subgraph triple as a ``(3, E)`` tensor."""
    local = sub.index()
    rows = []
    for t in sub.triples:
        h, d, r = local[t.head.id], local[t.tail.id], relation_index[t.relation.id]
        rows.append((h, d, r))
        rows.append((d, h, r))
    rows = sorted(set(rows))
    if not rows:
        return torch.zeros((3, 0), dtype=torch.long)
    return torch.tensor(rows, dtype=torch.long).T.contiguous()


def parameter_version(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class CapsuleCache:
    """Write-once store of graph capsules keyed by (user, parameter version).

    With a ``directory`` every entry is also written as ``<key>.npy`` and
    listed in ``manifest.json``.
    """

    def __init__(self, directory=None):
        self._mem: dict[tuple[str, str], torch.Tensor] = {}
        self.directory = Path(directory) if directory else None
        self.hits = 0
        self.misses = 0
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _file(self, user, version):
        key = hashlib.sha256(f"{user}\0{version}".encode()).hexdigest()[:24]
        return self.directory / f"{key}.npy"

    def get(self, user: str, version: str, compute):
        key = (user, version)
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        if self.directory and self._file(user, version).exists():
            self.hits += 1
            value = torch.from_numpy(np.load(self._file(user, version)))
            self._mem[key] = value
            return value
        self.misses += 1
        value = compute().detach()
        self._mem[key] = value
        if self.directory:
            np.save(self._file(user, version), value.cpu().numpy())
            self._write_manifest()
        return value

    def _write_manifest(self):
        manifest = sorted(
            ({"user": u, "version": v, "file": self._file(u, v).name, "shape": list(t.shape)}
             for (u, v), t in self._mem.items()),
            key=lambda e: (e["user"], e["version"]),
        )
        (self.directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    def __len__(self):
        return len(self._mem)
