import json

import pytest

from qedistill.cli import main


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """Small synthetic benchmark generated through the CLI."""
    root = tmp_path_factory.mktemp("bench")
    rc = main(
        [
            "gen-synthetic",
            "--out-dir", str(root),
            "--seed", "0",
            "--docs", "200",
            "--topics", "6",
            "--write-config",
        ]
    )
    assert rc == 0
    return root


def test_gen_synthetic_writes_config(bench):
    config = json.loads((bench / "config.json").read_text())
    assert config["corpus"] == "corpus.jsonl"
    assert "sft" in config and "dpo" in config


def test_index_retrieve_eval_ttest(bench, tmp_path, capsys):
    index = tmp_path / "idx.bin"
    rc = main(
        ["index", "--corpus", str(bench / "corpus.jsonl"), "--index", str(index),
         "--stemmer", "none"]
    )
    assert rc == 0
    run = tmp_path / "run.trec"
    rc = main(
        ["retrieve", "--index", str(index), "--queries", str(bench / "queries.tsv"),
         "--k", "50", "--output", str(run)]
    )
    assert rc == 0
    lines = run.read_text().splitlines()
    assert lines and len(lines[0].split()) == 6

    rc = main(["eval", "--run", str(run), "--qrels", str(bench / "qrels.txt")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "means over" in out
    assert "ndcg@10=" in out

    rc = main(
        ["ttest", "--run-a", str(run), "--run-b", str(run),
         "--qrels", str(bench / "qrels.txt")]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "t=0.000000 p=1" in out
    assert "all-zero-differences" in out


def test_expand_build_prefs_sft_dpo_generate(bench, tmp_path, capsys):
    index = tmp_path / "idx.bin"
    main(["index", "--corpus", str(bench / "corpus.jsonl"), "--index", str(index),
          "--stemmer", "none"])

    expansions = tmp_path / "exp.jsonl"
    rc = main(
        ["expand", "--queries", str(bench / "queries.tsv"), "--source", "toy",
         "--index", str(index), "--out", str(expansions)]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "s/query" in out  # latency report
    n_queries = len((bench / "queries.tsv").read_text().splitlines())
    assert len(expansions.read_text().splitlines()) == n_queries

    pairs = tmp_path / "pairs.jsonl"
    report = tmp_path / "pairs_report.json"
    rc = main(
        ["build-prefs", "--expansions", str(expansions), "--index", str(index),
         "--qrels", str(bench / "qrels.txt"), "--delta", "0.0001",
         "--out", str(pairs), "--report", str(report)]
    )
    assert rc == 0
    rep = json.loads(report.read_text())
    assert rep["kept"] + rep["skipped"] == n_queries

    sft_ckpt = tmp_path / "sft.ckpt"
    rc = main(
        ["sft", "--data", str(expansions), "--out", str(sft_ckpt),
         "--lr", "0.1", "--epochs", "1"]
    )
    assert rc == 0
    assert sft_ckpt.exists()

    if rep["kept"] > 0:
        dpo_ckpt = tmp_path / "dpo.ckpt"
        rc = main(
            ["dpo", "--model", str(sft_ckpt), "--pairs", str(pairs),
             "--out", str(dpo_ckpt), "--lr", "0.05", "--epochs", "1"]
        )
        assert rc == 0
        assert dpo_ckpt.exists()

    gen = tmp_path / "gen.jsonl"
    rc = main(
        ["generate", "--model", str(sft_ckpt), "--queries", str(bench / "queries.tsv"),
         "--out", str(gen), "--max-len", "32"]
    )
    assert rc == 0
    rows = [json.loads(l) for l in gen.read_text().splitlines()]
    assert len(rows) == n_queries
    assert all("expansion" in r for r in rows)


def test_sft_e1_only_flag(bench, tmp_path):
    index = tmp_path / "idx.bin"
    main(["index", "--corpus", str(bench / "corpus.jsonl"), "--index", str(index),
          "--stemmer", "none"])
    expansions = tmp_path / "exp.jsonl"
    main(["expand", "--queries", str(bench / "queries.tsv"), "--source", "toy",
          "--index", str(index), "--out", str(expansions)])
    out = tmp_path / "m.ckpt"
    rc = main(["sft", "--data", str(expansions), "--out", str(out),
               "--e1-only", "--lr", "0.1", "--epochs", "1"])
    assert rc == 0


def test_expand_api_source_requires_endpoint(bench, tmp_path, capsys):
    rc = main(
        ["expand", "--queries", str(bench / "queries.tsv"), "--source", "api",
         "--out", str(tmp_path / "x.jsonl")]
    )
    assert rc == 2


def test_latency_mean_equals_total_over_queries(bench, tmp_path, capsys):
    index = tmp_path / "idx.bin"
    main(["index", "--corpus", str(bench / "corpus.jsonl"), "--index", str(index),
          "--stemmer", "none"])
    capsys.readouterr()
    rc = main(
        ["expand", "--queries", str(bench / "queries.tsv"), "--source", "toy",
         "--index", str(index), "--out", str(tmp_path / "exp2.jsonl")]
    )
    assert rc == 0
    out = capsys.readouterr().out
    import re

    total = float(re.search(r"\[([\d.]+)s total", out).group(1))
    mean = float(re.search(r"([\d.]+)s/query", out).group(1))
    n = len((bench / "queries.tsv").read_text().splitlines())
    assert mean == pytest.approx(total / n, abs=5e-5)  # printed at 4 decimals
