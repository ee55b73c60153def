from __future__ import annotations

import json
from pathlib import Path

import pytest

from patmatch.cli import dispatch

from conftest import FIXTURES


def write_config(tmp_path: Path, run_dir: Path, **extra) -> Path:
    config = {
        "corpus_path": str(FIXTURES / "corpus_small.jsonl"),
        "questions_path": str(FIXTURES / "questions_eight.jsonl"),
        "run_dir": str(run_dir),
        "embedder": {"backend": "mock", "dim": 12, "seed": 4},
        "llm": {"backend": "scripted", "rules_path": str(FIXTURES / "rules_eight.jsonl")},
        "variants": ["vanilla", "cot", "rag", "memgraph:all"],
        "k": 3,
    }
    config.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_ingest_ok(tmp_path, capsys):
    config = write_config(tmp_path, tmp_path / "run")
    assert dispatch(["--config", str(config), "ingest"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["corpus_count"] == 14
    assert out["question_count"] == 8
    assert (tmp_path / "run" / "config.json").exists()


def test_ingest_bad_corpus_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "P1"}\n')  # missing abstract
    config = write_config(tmp_path, tmp_path / "run", corpus_path=str(bad))
    assert dispatch(["--config", str(config), "ingest"]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_flag_exits_two(tmp_path):
    config = write_config(tmp_path, tmp_path / "run")
    with pytest.raises(SystemExit) as exit_info:
        dispatch(["--config", str(config), "run", "--bogus-flag"])
    assert exit_info.value.code == 2


def test_invalid_variant_exits_one_naming_it(tmp_path, capsys):
    config = write_config(tmp_path, tmp_path / "run")
    assert dispatch(["--config", str(config), "run", "--variant", "memgraph:bogus"]) == 1
    assert "bogus" in capsys.readouterr().err


def test_run_requires_index_first(tmp_path, capsys):
    config = write_config(tmp_path, tmp_path / "run")
    assert dispatch(["--config", str(config), "run", "--variant", "rag"]) == 1
    assert "build-index" in capsys.readouterr().err


def test_full_workflow(tmp_path, capsys):
    run_dir = tmp_path / "run"
    config = write_config(tmp_path, run_dir)

    assert dispatch(["--config", str(config), "build-index"]) == 0
    assert (run_dir / "index" / "manifest.json").exists()

    for variant in ("vanilla", "cot", "rag", "memgraph:all"):
        assert dispatch(["--config", str(config), "run", "--variant", variant]) == 0
    results = (run_dir / "results" / "memgraph_all.jsonl").read_text().splitlines()
    assert len(results) == 8
    assert (run_dir / "retrieval" / "raw_query.jsonl").exists()
    assert (run_dir / "extraction" / "entities.jsonl").exists()

    assert dispatch(["--config", str(config), "eval"]) == 0
    out = capsys.readouterr().out
    assert "vanilla: accuracy=" in out
    assert (run_dir / "eval" / "memgraph_all.json").exists()
    assert (run_dir / "eval" / "scenario.json").exists()

    assert dispatch(["--config", str(config), "compare", "--a", "memgraph:all", "--b", "rag"]) == 0
    compare = json.loads(capsys.readouterr().out)
    assert "p_value" in compare
    assert 0.0 <= compare["p_value"] <= 1.0

    assert dispatch(["--config", str(config), "judge", "--variants", "rag", "memgraph:all"]) == 0
    judged = json.loads(capsys.readouterr().out)
    assert "win_rates" in judged

    assert dispatch(["--config", str(config), "report"]) == 0
    table = capsys.readouterr().out
    assert "English" in table and "Chinese" in table
    assert (run_dir / "eval" / "report.txt").exists()
    assert (run_dir / "eval" / "report.json").exists()


def test_run_is_resume_safe(tmp_path, capsys):
    run_dir = tmp_path / "run"
    config = write_config(tmp_path, run_dir, variants=["vanilla"])
    assert dispatch(["--config", str(config), "run", "--variant", "vanilla"]) == 0
    first = (run_dir / "results" / "vanilla.jsonl").read_bytes()
    assert dispatch(["--config", str(config), "run", "--variant", "vanilla"]) == 0
    assert (run_dir / "results" / "vanilla.jsonl").read_bytes() == first


def test_extract_entities_command(tmp_path):
    run_dir = tmp_path / "run"
    config = write_config(tmp_path, run_dir)
    assert dispatch(["--config", str(config), "extract", "entities"]) == 0
    records = [
        json.loads(l)
        for l in (run_dir / "extraction" / "entities.jsonl").read_text().splitlines()
    ]
    assert len(records) == 8 * 5
    assert all(r["entities"] for r in records)


def test_flag_overrides_win_over_config(tmp_path, capsys):
    other_questions = FIXTURES / "questions_table6.jsonl"
    config = write_config(tmp_path, tmp_path / "run")
    assert (
        dispatch(
            [
                "--config", str(config),
                "--questions", str(other_questions),
                "--corpus", str(FIXTURES / "corpus_small.jsonl"),
                "ingest",
            ]
        )
        == 0
    )
    out = json.loads(capsys.readouterr().out)
    assert out["question_count"] == 1


def test_unknown_config_field_rejected(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"bogus_field": 1}))
    assert dispatch(["--config", str(config), "ingest"]) == 1
    assert "bogus_field" in capsys.readouterr().err
