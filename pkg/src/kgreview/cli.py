"""Command line entry points.

Every command reads an optional JSON config (sections ``model``, ``train``,
``beam``, ``aspects`` and a top-level ``seed``); flags override it.  Outputs
carry the hash of the effective config.  Failures print a JSON object to
stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .aspects import KeywordLexicon
from .data import ReviewRecord, Vocabulary, read_corpus
from .errors import InputFileError, KGReviewError
from .evaluate import entity_recall, evaluate_texts
from .hkg import HKG, read_entity_names
from .model import ModelConfig
from .pipeline import ABLATIONS, GraphInputs, apply_ablation, build_graph, mine_aspects
from .sentence_decoder import BeamConfig
from .synth import TOY_CONFIG, SynthConfig, make_world
from .trainer import TrainConfig, load_checkpoint, loss_report, save_checkpoint, train


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _dump_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_jsonl(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def load_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputFileError(p, "config file not found")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFileError(p, f"bad JSON: {exc.msg}", exc.lineno) from None


def _section(cfg: dict, name: str, cls, overrides: dict):
    values = dict(cfg.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {name} settings: {', '.join(sorted(unknown))}")
    return cls(**values)


def _effective(args, cfg: dict):
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    model = _section(cfg, "model", ModelConfig, {})
    train_cfg = _section(cfg, "train", TrainConfig, {"seed": seed})
    beam = _section(cfg, "beam", BeamConfig, {
        "width": getattr(args, "beam_width", None),
        "max_len": getattr(args, "max_len", None),
    })
    return model, train_cfg, beam


def _stopwords(path):
    if not path:
        return ()
    p = Path(path)
    if not p.exists():
        raise InputFileError(p, "stopword file not found")
    return tuple(w.strip() for w in p.read_text(encoding="utf-8").split() if w.strip())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = TOY_CONFIG if args.toy else SynthConfig()
    over = {k: getattr(args, k) for k in ("num_users", "num_items", "num_aspects", "reviews_per_user",
                                          "entities_per_aspect", "nouns_per_aspect", "preferred_per_user",
                                          "mention_rate", "preference_rate", "seed")}
    cfg = SynthConfig(**{**asdict(cfg), **{k: v for k, v in over.items() if v is not None}})
    world = make_world(cfg)
    world.save(args.out)
    return {"out": str(args.out), "reviews": len(world.reviews), "config_hash": config_hash(asdict(cfg))}


def cmd_mine_aspects(args):
    cfg = load_config(args.config)
    aspects = dict(cfg.get("aspects", {}))
    for key in ("num_aspects", "iterations", "min_count"):
        if getattr(args, key) is not None:
            aspects[key] = getattr(args, key)
    aspects.setdefault("num_aspects", 10)
    aspects.setdefault("iterations", 500)
    aspects.setdefault("min_count", 5)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    corpus = read_corpus(args.corpus)
    labeled, model, lexicon = mine_aspects(corpus, aspects["num_aspects"], aspects["iterations"], seed,
                                           _stopwords(args.stopwords), aspects["min_count"])
    h = config_hash({"aspects": aspects, "seed": seed, "corpus": _file_hash(args.corpus)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "labeled.jsonl", ({**r.to_dict(), "config_hash": h} for r in labeled))
    lex = json.loads(lexicon.to_json())
    lex["config_hash"] = h
    _dump_json(out / "lexicon.json", lex)
    _dump_json(out / "aspect_model.json", {**model.to_dict(), "config_hash": h})
    return {"out": str(out), "aspects": len(lexicon.aspect_keywords), "sentences": sum(len(r.sentences) for r in labeled),
            "aspect_model_hash": model.digest(), "config_hash": h}


def _lexicon(path) -> KeywordLexicon:
    if not Path(path).exists():
        raise InputFileError(path, "lexicon file not found")
    return KeywordLexicon.load(path)


def _file_hash(path) -> str:
    p = Path(path)
    if not p.exists():
        raise InputFileError(p, "file not found")
    return hashlib.sha256(p.read_bytes()).hexdigest()[:16]


def cmd_build_graph(args):
    inputs = GraphInputs.read(args.triples, args.interactions, args.alignment, args.entities)
    corpus = read_corpus(args.corpus) if args.corpus else []
    keywords = _lexicon(args.lexicon).all_keywords() if args.lexicon else set()
    g = build_graph(inputs, corpus, keywords)
    h = config_hash({name: _file_hash(p) for name, p in
                     (("triples", args.triples), ("interactions", args.interactions),
                      ("alignment", args.alignment), ("entities", args.entities),
                      ("corpus", args.corpus), ("lexicon", args.lexicon)) if p})
    write_graph(g, args.out, h)
    return {"out": str(args.out), "digest": g.digest(), "config_hash": h, **g.stats()}


def write_graph(g: HKG, path, h: str):
    payload = json.loads(g.to_json())
    payload["provenance"] = {"config_hash": h}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n", encoding="utf-8")


def _load_graph(path) -> HKG:
    if not Path(path).exists():
        raise InputFileError(path, "graph file not found")
    return HKG.load(path)


def _train(args, cfg, graph, corpus, model_cfg, train_cfg, out, h, aspect_hash=""):
    vocab = Vocabulary.build([s.tokens for r in corpus for s in r.sentences], min_count=train_cfg.vocab_min_count)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(corpus, graph, vocab, model_cfg, train_cfg, log_path=out / "train_log.jsonl",
                 aspect_model_hash=aspect_hash)
    save_checkpoint(ckpt, out, provenance={"config_hash": h})
    return ckpt


def cmd_train(args):
    cfg = load_config(args.config)
    model_cfg, train_cfg, _ = _effective(args, cfg)
    graph = _load_graph(args.graph)
    corpus = read_corpus(args.corpus)
    h = config_hash({"model": asdict(model_cfg), "train": asdict(train_cfg), "graph": graph.digest(),
                     "corpus": _file_hash(args.corpus)})
    ckpt = _train(args, cfg, graph, corpus, model_cfg, train_cfg, Path(args.out), h)
    report = loss_report(ckpt, corpus)
    return {"out": str(args.out), "config_hash": h, **report.to_dict()}


def generate_all(ckpt, contexts: list[ReviewRecord], beam: BeamConfig, greedy: bool = False,
                 zero_capsules: bool = False) -> list[dict]:
    model = ckpt.model
    model.eval()
    rows = []
    for r in contexts:
        gen = model.generate_review(model.context(r.user, r.item, r.rating), beam, greedy=greedy,
                                    zero_capsules=zero_capsules)
        rows.append({"user": r.user, "item": r.item, "rating": int(r.rating), "aspects": gen.aspects,
                     "sentences": gen.sentences, "copy_events": gen.copy_events})
    return rows


def cmd_generate(args):
    cfg = load_config(args.config)
    _, _, beam = _effective(args, cfg)
    if args.greedy:
        beam = BeamConfig(1, beam.max_len, beam.max_aspects, beam.length_penalty)
    ckpt = load_checkpoint(args.checkpoint)
    contexts = read_corpus(args.corpus)
    rows = generate_all(ckpt, contexts, beam, greedy=False)
    h = config_hash({"beam": asdict(beam), "checkpoint": _checkpoint_hash(args.checkpoint),
                     "contexts": _file_hash(args.corpus)})
    _write_jsonl(args.out, ({**row, "config_hash": h} for row in rows))
    return {"out": str(args.out), "reviews": len(rows), "config_hash": h}


def _checkpoint_hash(directory) -> str:
    return _file_hash(Path(directory) / "manifest.json")


def read_generations(path) -> list[list[str]]:
    p = Path(path)
    if not p.exists():
        raise InputFileError(p, "generations file not found")
    out = []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append([t for s in row["sentences"] for t in s])
            except (ValueError, KeyError, TypeError) as exc:
                raise InputFileError(p, f"bad generation record: {exc}", lineno) from None
    return out


def cmd_evaluate(args):
    gold = read_corpus(args.corpus)
    refs = [r.tokens for r in gold]
    hyps = read_generations(args.generations) if args.generations else refs
    keywords = _lexicon(args.lexicon).aspect_keywords if args.lexicon else None
    ppl = None
    parts = {"corpus": _file_hash(args.corpus)}
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        ppl = loss_report(ckpt, gold).perplexity
        parts["checkpoint"] = _checkpoint_hash(args.checkpoint)
    if args.generations:
        parts["generations"] = _file_hash(args.generations)
    h = config_hash(parts)
    report = evaluate_texts(refs, hyps, keywords, ppl, h)
    if args.out:
        report.save(args.out)
    return report.to_dict()


def cmd_ablate(args):
    cfg = load_config(args.config)
    model_cfg, train_cfg, beam = _effective(args, cfg)
    graph, model_cfg = apply_ablation(args.variant, _load_graph(args.graph), model_cfg)
    corpus = read_corpus(args.corpus)
    test = read_corpus(args.test_corpus) if args.test_corpus else corpus
    h = config_hash({"variant": args.variant, "model": asdict(model_cfg), "train": asdict(train_cfg),
                     "beam": asdict(beam), "graph": graph.digest(), "corpus": _file_hash(args.corpus)})
    out = Path(args.out)
    ckpt = _train(args, cfg, graph, corpus, model_cfg, train_cfg, out / "checkpoint", h)
    rows = generate_all(ckpt, test, beam)
    _write_jsonl(out / "generations.jsonl", ({**row, "config_hash": h} for row in rows))
    refs = [r.tokens for r in test]
    hyps = [[t for s in row["sentences"] for t in s] for row in rows]
    keywords = _lexicon(args.lexicon).aspect_keywords if args.lexicon else None
    report = evaluate_texts(refs, hyps, keywords, loss_report(ckpt, test).perplexity, h).to_dict()
    report["variant"] = args.variant
    if args.entities:
        names = set(read_entity_names(args.entities).values())
        report["entity_recall"] = entity_recall(refs, hyps, names)
    _dump_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgreview", description="Knowledge-graph-aware review generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--toy", action="store_true", help="use the small fixture-sized world")
    s.add_argument("--num-users", type=int)
    s.add_argument("--num-items", type=int)
    s.add_argument("--num-aspects", type=int)
    s.add_argument("--reviews-per-user", type=int)
    s.add_argument("--entities-per-aspect", type=int)
    s.add_argument("--nouns-per-aspect", type=int)
    s.add_argument("--preferred-per-user", type=int)
    s.add_argument("--mention-rate", type=float)
    s.add_argument("--preference-rate", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mine-aspects", help="label sentences with aspects and build the keyword lexicon")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--stopwords")
    s.add_argument("--num-aspects", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--min-count", type=int)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_mine_aspects)

    s = sub.add_parser("build-graph", help="assemble the heterogeneous graph")
    s.add_argument("--triples", required=True)
    s.add_argument("--interactions", required=True)
    s.add_argument("--alignment", required=True)
    s.add_argument("--entities")
    s.add_argument("--corpus")
    s.add_argument("--lexicon")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_graph)

    for name, func, helptext in (("train", cmd_train, "train a checkpoint"),
                                 ("ablate", cmd_ablate, "train, generate and evaluate one ablation variant")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--corpus", required=True, help="aspect-labeled training corpus")
        s.add_argument("--graph", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        if name == "ablate":
            s.add_argument("--variant", required=True, choices=ABLATIONS)
            s.add_argument("--test-corpus")
            s.add_argument("--lexicon")
            s.add_argument("--entities")
            s.add_argument("--beam-width", type=int)
            s.add_argument("--max-len", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("generate", help="generate reviews for (user, item, rating) contexts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True, help="JSON-lines contexts; sentences are ignored")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--beam-width", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--greedy", action="store_true", help="greedy decoding (beam width 1)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score generations against gold reviews")
    s.add_argument("--corpus", required=True, help="gold reviews")
    s.add_argument("--generations")
    s.add_argument("--checkpoint", help="also report perplexity on the gold reviews")
    s.add_argument("--lexicon")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except KGReviewError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": "invalid_argument", "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
