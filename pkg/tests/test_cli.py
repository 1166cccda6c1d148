import json
from importlib.resources import files
from pathlib import Path

import pytest

from kgreview.cli import main

FIXTURE = Path(str(files("kgreview") / "fixtures" / "toy"))
TINY_TRAIN = {
    "model": {"num_aspects": 4, "d_e": 8, "d_h": 8, "d_c": 4, "num_graph_capsules": 3, "d_a": 8, "d_w": 8,
              "d_s": 8, "gcn_layers": 2},
    "train": {"epochs_aspect": 1, "epochs_sentence": 1, "epochs_joint": 0, "batch_aspect": 10,
              "batch_sentence": 10},
    "beam": {"max_len": 6},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def graph_args(out):
    return ["build-graph", "--triples", FIXTURE / "triples.tsv", "--interactions", FIXTURE / "interactions.tsv",
            "--alignment", FIXTURE / "alignment.tsv", "--entities", FIXTURE / "entities.tsv", "--out", out]


def test_missing_triples_file_exits_with_path_error(tmp_path, capsys):
    argv = graph_args(tmp_path / "g.json")
    argv[2] = tmp_path / "missing.tsv"
    code, _, err = run(capsys, *argv)
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == "input_file" and "missing.tsv" in payload["path"]


def test_build_graph_stats_and_idempotence(tmp_path, capsys):
    code, first, _ = run(capsys, *graph_args(tmp_path / "a.json"))
    assert code == 0
    assert first["edges_by_kind"]["interaction"] == 50
    assert first["edges_by_kind"]["kg"] == 40
    assert first["nodes_by_kind"]["user"] == 10
    code, second, _ = run(capsys, *graph_args(tmp_path / "b.json"))
    assert first["digest"] == second["digest"]
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_mine_aspects_is_seeded(tmp_path, capsys):
    common = ["mine-aspects", "--corpus", FIXTURE / "corpus.jsonl", "--stopwords", FIXTURE / "stopwords.txt",
              "--iterations", 30, "--min-count", 1, "--seed", 4]
    run(capsys, *common, "--out", tmp_path / "a", "--num-aspects", 4)
    run(capsys, *common, "--out", tmp_path / "b", "--num-aspects", 4)
    for name in ("lexicon.json", "labeled.jsonl", "aspect_model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    code, summary, _ = run(capsys, *common, "--out", tmp_path / "c", "--num-aspects", 10)
    assert code == 0 and summary["aspects"] == 10
    lex = json.loads((tmp_path / "c" / "lexicon.json").read_text())
    assert len(lex["aspect_keywords"]) == 10


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY_TRAIN))
    assert main([str(a) for a in graph_args(root / "g.json")]) == 0
    assert main(["train", "--corpus", str(FIXTURE / "corpus.jsonl"), "--graph", str(root / "g.json"),
                 "--out", str(root / "ckpt"), "--config", str(root / "cfg.json"), "--seed", "0"]) == 0
    return root


def test_beam_width_one_equals_greedy(trained, capsys):
    base = ["generate", "--checkpoint", trained / "ckpt", "--corpus", FIXTURE / "corpus.jsonl",
            "--config", trained / "cfg.json"]
    assert run(capsys, *base, "--out", trained / "beam1.jsonl", "--beam-width", 1)[0] == 0
    assert run(capsys, *base, "--out", trained / "greedy.jsonl", "--greedy")[0] == 0
    assert (trained / "beam1.jsonl").read_bytes() == (trained / "greedy.jsonl").read_bytes()
    rows = [json.loads(line) for line in (trained / "greedy.jsonl").read_text().splitlines()]
    assert len(rows) == 50 and all(len(s) <= 6 for r in rows for s in r["sentences"])


def test_evaluate_gold_against_itself(trained, tmp_path, capsys):
    gold = tmp_path / "gold.jsonl"
    with gold.open("w") as fh:
        for line in (FIXTURE / "corpus.jsonl").read_text().splitlines():
            r = json.loads(line)
            fh.write(json.dumps({"sentences": [s["tokens"] for s in r["sentences"]]}) + "\n")
    code, report, _ = run(capsys, "evaluate", "--corpus", FIXTURE / "corpus.jsonl", "--generations", gold,
                          "--checkpoint", trained / "ckpt", "--out", tmp_path / "r.json")
    assert code == 0
    assert report["bleu1"] == pytest.approx(100.0) and report["rougeL"] == pytest.approx(1.0)
    assert report["perplexity"] > 1.0
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_train_log_rows(trained):
    rows = [json.loads(line) for line in (trained / "ckpt" / "train_log.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in rows] == ["aspect", "sentence"]


def test_synth_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--toy", "--out", tmp_path / name, "--seed", 5)[0] == 0
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"epochs": 3}}))
    code, _, err = run(capsys, "train", "--corpus", FIXTURE / "corpus.jsonl", "--graph", tmp_path / "g.json",
                       "--out", tmp_path / "o", "--config", tmp_path / "bad.json")
    assert code == 2 and "epochs" in err
