"""Incremental training: aspect side, then sentence side, then both jointly.

Checkpoints are directories holding ``manifest.json``, the graph, and one
raw little-endian blob per parameter group plus one for optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ReviewRecord, Vocabulary
from .errors import EmptyDataset, UnlabeledSentence, VocabularyMismatch
from .hkg import HKG
from .model import ModelConfig, ReviewModel

CHECKPOINT_VERSION = 1
PHASES = ("aspect", "sentence", "joint")


@dataclass
class TrainConfig:
    lr_aspect: float = 2e-5
    lr_sentence: float = 2e-4
    batch_aspect: int = 1024
    batch_sentence: int = 64
    lr_decay: float = 0.8
    decay_every: int = 2
    dropout: float = 0.2
    epochs_aspect: int = 10
    epochs_sentence: int = 10
    epochs_joint: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    vocab_min_count: int = 1  # rarer words are only reachable through copying

    def __post_init__(self):
        if self.lr_aspect <= 0 or self.lr_sentence <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        if self.batch_aspect < 1 or self.batch_sentence < 1 or self.decay_every < 1:
            raise ValueError("batch sizes and decay interval must be positive")
        if self.vocab_min_count < 1:
            raise ValueError("vocab_min_count must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def check_dataset(dataset: list[ReviewRecord]):
    if not dataset:
        raise EmptyDataset("training needs at least one review")
    for r in dataset:
        if not r.sentences:
            raise EmptyDataset(f"review ({r.user}, {r.item}) has no sentences")
        for j, s in enumerate(r.sentences):
            if s.aspect is None:
                raise UnlabeledSentence(f"review ({r.user}, {r.item}) sentence {j} has no aspect label")


@dataclass
class Checkpoint:
    model: ReviewModel
    train_cfg: TrainConfig
    opt_aspect: torch.optim.Adam
    opt_sentence: torch.optim.Adam
    epochs: dict
    aspect_model_hash: str = ""
    log: list = None

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab

    def sentence_lr(self) -> float:
        return sentence_lr(self.train_cfg, self.epochs.get("sentence_total", 0))

    def save(self, directory):
        save_checkpoint(self, directory)


def sentence_lr(cfg: TrainConfig, epochs_done: int) -> float:
    return cfg.lr_sentence * cfg.lr_decay ** (epochs_done // cfg.decay_every)


def new_checkpoint(dataset, graph: HKG, vocab: Vocabulary, model_cfg: ModelConfig,
                   cfg: TrainConfig, aspect_model_hash: str = "") -> Checkpoint:
    torch.manual_seed(cfg.seed)
    model_cfg = replace(model_cfg, dropout=cfg.dropout)
    model = ReviewModel(model_cfg, graph, vocab, users=sorted({r.user for r in dataset}))
    opt1 = torch.optim.Adam([p for _, p in model.theta1()], lr=cfg.lr_aspect, betas=(0.9, 0.999), eps=1e-8)
    opt2 = torch.optim.Adam([p for _, p in model.theta2()], lr=cfg.lr_sentence, betas=(0.9, 0.999), eps=1e-8)
    epochs = {"aspect": 0, "sentence": 0, "joint": 0, "sentence_total": 0}
    return Checkpoint(model, cfg, opt1, opt2, epochs, aspect_model_hash, [])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _clip_and_step(params, optimizer, clip):
    nn.utils.clip_grad_norm_(params, clip)
    optimizer.step()


def _log_row(phase, epoch, margin, reviews, nll, tokens, lr):
    row = {"phase": phase, "epoch": epoch, "lr": lr,
           "margin_loss": margin / reviews if margin is not None else None,
           "nll": nll / tokens if nll is not None else None}
    row["perplexity"] = math.exp(row["nll"]) if row["nll"] is not None else None
    return row


def train(dataset: list[ReviewRecord], graph: HKG, vocab: Vocabulary, model_cfg: ModelConfig,
          cfg: TrainConfig, log_path=None, aspect_model_hash: str = "", checkpoint: Checkpoint | None = None,
          progress=None) -> Checkpoint:
    """Run all three phases and return the trained checkpoint.

    Minibatches are reviews; the margin loss is averaged per review and the
    token NLL per token.  Each epoch appends a row to the checkpoint log and,
    when ``log_path`` is given, to a JSON-lines file.
    """
    check_dataset(dataset)
    ckpt = checkpoint or new_checkpoint(dataset, graph, vocab, model_cfg, cfg, aspect_model_hash)
    # a resumed checkpoint follows the new schedule; the sentence decay keeps counting epochs
    ckpt.train_cfg = cfg
    for g in ckpt.opt_aspect.param_groups:
        g["lr"] = cfg.lr_aspect
    model = ckpt.model
    rng = np.random.default_rng(cfg.seed)
    theta1 = [p for _, p in model.theta1()]
    theta2 = [p for _, p in model.theta2()]
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(row):
        ckpt.log.append(row)
        if log_fh:
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
        if progress:
            progress(row)

    try:
        # phase 1: aspect group on the margin loss
        model.train()
        for epoch in range(cfg.epochs_aspect):
            margin_sum = 0.0
            for idx in _batches(len(dataset), cfg.batch_aspect, rng):
                ckpt.opt_aspect.zero_grad(set_to_none=True)
                total, encoded = 0.0, {}
                for i in idx:
                    out = model.review_losses(dataset[i], aspect=True, sentence=False, encoded=encoded)
                    total = total + out["margin"]
                    margin_sum += float(out["margin"].detach())
                (total / len(idx)).backward()
                _clip_and_step(theta1, ckpt.opt_aspect, cfg.clip_norm)
            ckpt.epochs["aspect"] += 1
            emit(_log_row("aspect", ckpt.epochs["aspect"], margin_sum, len(dataset), None, 0, cfg.lr_aspect))

        # phase 2: sentence group, aspect side frozen and memoised
        if cfg.epochs_sentence:
            memo: dict = {}
            model.eval()
            for r in dataset:
                model.review_losses(r, aspect=False, sentence=False, theta1_grad=False, memo=memo)
            model.train()
            for _ in range(cfg.epochs_sentence):
                lr = ckpt.sentence_lr()
                for g in ckpt.opt_sentence.param_groups:
                    g["lr"] = lr
                nll_sum, tokens = 0.0, 0
                for idx in _batches(len(dataset), cfg.batch_sentence, rng):
                    ckpt.opt_sentence.zero_grad(set_to_none=True)
                    total, n_tok = 0.0, 0
                    for i in idx:
                        out = model.review_losses(dataset[i], aspect=False, sentence=True,
                                                  theta1_grad=False, memo=memo)
                        total = total + out["nll"]
                        n_tok += out["tokens"]
                        nll_sum += float(out["nll"].detach())
                    tokens += n_tok
                    (total / n_tok).backward()
                    _clip_and_step(theta2, ckpt.opt_sentence, cfg.clip_norm)
                ckpt.epochs["sentence"] += 1
                ckpt.epochs["sentence_total"] += 1
                emit(_log_row("sentence", ckpt.epochs["sentence"], None, len(dataset), nll_sum, tokens, lr))

        # phase 3: both groups on margin + NLL
        for _ in range(cfg.epochs_joint):
            lr = ckpt.sentence_lr()
            for g in ckpt.opt_sentence.param_groups:
                g["lr"] = lr
            margin_sum, nll_sum, tokens = 0.0, 0.0, 0
            for idx in _batches(len(dataset), cfg.batch_sentence, rng):
                ckpt.opt_aspect.zero_grad(set_to_none=True)
                ckpt.opt_sentence.zero_grad(set_to_none=True)
                margin, nll, n_tok, encoded = 0.0, 0.0, 0, {}
                for i in idx:
                    out = model.review_losses(dataset[i], encoded=encoded)
                    margin = margin + out["margin"]
                    nll = nll + out["nll"]
                    n_tok += out["tokens"]
                    margin_sum += float(out["margin"].detach())
                    nll_sum += float(out["nll"].detach())
                tokens += n_tok
                (margin / len(idx) + nll / n_tok).backward()
                _clip_and_step(theta1, ckpt.opt_aspect, cfg.clip_norm)
                _clip_and_step(theta2, ckpt.opt_sentence, cfg.clip_norm)
            ckpt.epochs["joint"] += 1
            ckpt.epochs["sentence_total"] += 1
            emit(_log_row("joint", ckpt.epochs["joint"], margin_sum, len(dataset), nll_sum, tokens, lr))
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return ckpt


@dataclass(frozen=True)
class LossReport:
    margin_loss: float
    nll: float
    perplexity: float
    aspect_accuracy: float
    tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def loss_report(ckpt: Checkpoint, dataset: list[ReviewRecord], vocab: Vocabulary | None = None) -> LossReport:
    """Mean margin loss per review, mean token NLL and perplexity, in eval mode.

    Passing ``vocab`` checks it against the checkpoint's vocabulary.
    """
    if vocab is not None and vocab.digest() != ckpt.vocab.digest():
        raise VocabularyMismatch("dataset vocabulary does not match the checkpoint")
    check_dataset(dataset)
    model = ckpt.model
    was_training = model.training
    model.eval()
    margin, nll, tokens, correct, steps = 0.0, 0.0, 0, 0, 0
    encoded: dict = {}
    for r in dataset:
        out = model.review_losses(r, encoded=encoded)
        margin += float(out["margin"])
        nll += float(out["nll"])
        tokens += out["tokens"]
        correct += out["aspect_correct"]
        steps += out["aspect_steps"]
    model.train(was_training)
    mean_nll = nll / tokens
    return LossReport(margin / len(dataset), mean_nll, math.exp(mean_nll), correct / steps, tokens)


# ---------------------------------------------------------------------------
# persistence


def _pack(named: list[tuple[str, torch.Tensor]]):
    """Concatenate tensors into one little-endian blob plus its index."""
    index, chunks, offset = [], [], 0
    for name, t in named:
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), index


def _unpack(blob: bytes, index: list[dict]) -> dict[str, torch.Tensor]:
    out = {}
    for e in index:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out


def _optimizer_tensors(opt: torch.optim.Adam, names: list[str]):
    state = opt.state_dict()["state"]
    tensors, steps = [], {}
    for i, name in enumerate(names):
        s = state.get(i)
        if not s:
            continue
        steps[name] = float(s["step"])
        tensors.append((f"{name}.exp_avg", s["exp_avg"]))
        tensors.append((f"{name}.exp_avg_sq", s["exp_avg_sq"]))
    return tensors, steps


def _restore_optimizer(opt: torch.optim.Adam, names: list[str], tensors: dict, steps: dict, lr: float):
    sd = opt.state_dict()
    sd["state"] = {}
    for i, name in enumerate(names):
        if name in steps:
            sd["state"][i] = {"step": torch.tensor(steps[name]),
                              "exp_avg": tensors[f"{name}.exp_avg"],
                              "exp_avg_sq": tensors[f"{name}.exp_avg_sq"]}
    for g in sd["param_groups"]:
        g["lr"] = lr
    opt.load_state_dict(sd)


def save_checkpoint(ckpt: Checkpoint, directory, provenance: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    names1 = [n for n, _ in model.theta1()]
    names2 = [n for n, _ in model.theta2()]
    blob1, idx1 = _pack(model.theta1())
    blob2, idx2 = _pack(model.theta2())
    t1, s1 = _optimizer_tensors(ckpt.opt_aspect, names1)
    t2, s2 = _optimizer_tensors(ckpt.opt_sentence, names2)
    blob3, idx3 = _pack(t1 + t2)
    (d / "theta1.bin").write_bytes(blob1)
    (d / "theta2.bin").write_bytes(blob2)
    (d / "optimizer.bin").write_bytes(blob3)
    model.graph.save(d / "graph.json")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": ckpt.train_cfg.to_dict(),
        "seed": ckpt.train_cfg.seed,
        "epochs": ckpt.epochs,
        "vocab_hash": model.vocab.digest(),
        "aspect_model_hash": ckpt.aspect_model_hash,
        "graph_hash": model.graph.digest(),
        "node_keys": model.node_keys,
        "vocab": model.vocab.to_list(),
        "blobs": {
            "theta1": {"file": "theta1.bin", "sha256": hashlib.sha256(blob1).hexdigest(), "tensors": idx1},
            "theta2": {"file": "theta2.bin", "sha256": hashlib.sha256(blob2).hexdigest(), "tensors": idx2},
            "optimizer": {"file": "optimizer.bin", "sha256": hashlib.sha256(blob3).hexdigest(), "tensors": idx3,
                          "steps": {"aspect": s1, "sentence": s2}},
        },
        "log": ckpt.log or [],
        "provenance": provenance or {},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(directory, expected_vocab: Vocabulary | None = None) -> Checkpoint:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
    vocab = Vocabulary.from_list(manifest["vocab"])
    if vocab.digest() != manifest["vocab_hash"]:
        raise VocabularyMismatch("checkpoint vocabulary is corrupt")
    if expected_vocab is not None and expected_vocab.digest() != manifest["vocab_hash"]:
        raise VocabularyMismatch("vocabulary hash differs from the checkpoint's")
    graph = HKG.load(d / "graph.json")
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    cfg = TrainConfig.from_dict(manifest["train_config"])
    extra = [k for k in manifest["node_keys"] if k not in graph.nodes]
    model = ReviewModel(model_cfg, graph, vocab, users=[k.split("/", 1)[1] for k in extra])
    if model.node_keys != manifest["node_keys"]:
        raise ValueError("checkpoint node table does not match its graph")

    blobs = {}
    for key, meta in manifest["blobs"].items():
        raw = (d / meta["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise ValueError(f"checkpoint blob {meta['file']} is corrupt")
        blobs[key] = _unpack(raw, meta["tensors"])
    params = dict(model.named_parameters())
    with torch.no_grad():
        for key in ("theta1", "theta2"):
            for name, t in blobs[key].items():
                params[name].copy_(t)
    opt1 = torch.optim.Adam([p for _, p in model.theta1()], lr=cfg.lr_aspect, betas=(0.9, 0.999), eps=1e-8)
    opt2 = torch.optim.Adam([p for _, p in model.theta2()], lr=cfg.lr_sentence, betas=(0.9, 0.999), eps=1e-8)
    steps = manifest["blobs"]["optimizer"]["steps"]
    ckpt = Checkpoint(model, cfg, opt1, opt2, dict(manifest["epochs"]), manifest["aspect_model_hash"],
                      list(manifest["log"]))
    _restore_optimizer(opt1, [n for n, _ in model.theta1()], blobs["optimizer"], steps["aspect"], cfg.lr_aspect)
    _restore_optimizer(opt2, [n for n, _ in model.theta2()], blobs["optimizer"], steps["sentence"],
                       ckpt.sentence_lr())
    model.eval()
    return ckpt
