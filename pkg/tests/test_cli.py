import json
import shutil
from pathlib import Path

import pytest
from typer.testing import CliRunner

from isg.cli import EXIT_SCHEMA, app

runner = CliRunner()


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("ISG_CACHE_DIR", raising=False)


def run_eval(corpus: Path, answers: Path, out: Path, fixture: Path, *extra: str):
    return runner.invoke(
        app,
        [
            "eval",
            "--corpus", str(corpus),
            "--answers", str(answers),
            "--out", str(out),
            "--backend", "mock",
            "--fixture", str(fixture),
            *extra,
        ],
    )


def test_eval_is_reproducible(tmp_path, fixtures_dir):
    corpus, answers = fixtures_dir / "corpus", fixtures_dir / "answers"
    fixture = fixtures_dir / "mock_judge.json"
    first = run_eval(corpus, answers, tmp_path / "a", fixture, "--format", "markdown")
    second = run_eval(corpus, answers, tmp_path / "b", fixture)

    assert first.exit_code == 0, first.output
    assert second.exit_code == 0, second.output
    assert "structural:" in first.output
    assert (tmp_path / "a" / "report.md").exists()
    assert not (tmp_path / "a" / "ledger.json").exists()
    assert {p.name for p in (tmp_path / "b").glob("*.*")} == {"report.json", "report.md", "ledger.json"}
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_schema_error_exits_with_code_2(tmp_path, fixtures_dir):
    samples = tmp_path / "corpus" / "samples"
    samples.mkdir(parents=True)
    (samples / "0009.json").write_text(json.dumps({"id": "0009", "category": "Image-Text Complementation"}))

    result = run_eval(tmp_path / "corpus", tmp_path / "answers", tmp_path / "out", fixtures_dir / "mock_judge.json")
    assert result.exit_code == EXIT_SCHEMA
    assert not (tmp_path / "out" / "report.json").exists()


def test_unknown_report_format_exits_with_code_2(tmp_path, fixtures_dir):
    result = run_eval(
        fixtures_dir / "corpus", fixtures_dir / "answers", tmp_path / "out",
        fixtures_dir / "mock_judge.json", "--format", "pdf",
    )
    assert result.exit_code == EXIT_SCHEMA


def test_agent_answer_scores_full_marks(tmp_path, fixtures_dir):
    fixture = fixtures_dir / "mock_judge.json"
    answer_path = tmp_path / "answers" / "0001.json"
    agent = runner.invoke(
        app,
        [
            "agent", "run",
            "--query", str(fixtures_dir / "corpus" / "samples" / "0001.json"),
            "--backend", "mock",
            "--fixture", str(fixture),
            "--out", str(answer_path),
        ],
    )
    assert agent.exit_code == 0, agent.output
    summary = json.loads(agent.output.strip().splitlines()[-1])
    assert summary["blocks"] == 8
    assert summary["flags"] == []
    # the scripted smoothing reply drops the image markers, so the captions stay
    assert summary["smoothing"] == "rejected"
    assert len(list((tmp_path / "answers" / "images").iterdir())) == 4
    assert answer_path.with_suffix(".plan.json").exists()

    corpus = tmp_path / "corpus"
    (corpus / "samples").mkdir(parents=True)
    shutil.copy(fixtures_dir / "corpus" / "samples" / "0001.json", corpus / "samples")
    shutil.copytree(fixtures_dir / "corpus" / "images", corpus / "images")

    result = run_eval(corpus, tmp_path / "answers", tmp_path / "out", fixture)
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    levels = {name: row["avg_by_sample"] for name, row in report["levels"].items()}
    assert levels == {"structural": 1.0, "block": 10.0, "image": 1.0, "holistic": 10.0}
    assert report["failures_by_category"] == {}
