"""Tests for the sgstream command-line interface."""

import json
import logging

import pytest

from src import __version__
from src.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from src.pipeline import PipelineError


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    yield tmp_path
    root = logging.getLogger()
    for handler in list(root.handlers):
        if type(handler) in (logging.FileHandler, logging.StreamHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yml"
    path.write_text(
        "pipeline:\n"
        "  latency_profile: kv-cache\n"
        "logging:\n"
        "  level: DEBUG\n"
        f"  file: {tmp_path / 'logs' / 'cli.log'}\n",
        encoding="utf-8",
    )
    return path


def gen(tmp_path, seed: int, name: str) -> str:
    path = tmp_path / "traces" / name
    assert main(["gen-trace", "--seed", str(seed), "--frames", "24", "--out", str(path)]) == EXIT_OK
    return str(path)


class TestGenTraceAndValidate:
    def test_generated_trace_validates(self, tmp_path, capsys):
        path = gen(tmp_path, 5, "t5.jsonl")
        assert main(["validate", "--trace", path]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Trace validation passed" in out
        assert "Trace ID: synthetic-000005" in out

    def test_gen_trace_to_stdout(self, capsys):
        assert main(["gen-trace", "--seed", "1", "--frames", "8", "--window", "2"]) == EXIT_OK
        records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert records[0]["kind"] == "meta"
        assert sum(1 for r in records if r["kind"] == "frame") == 8

    def test_gen_trace_bad_frames(self):
        assert main(["gen-trace", "--seed", "1", "--frames", "0"]) == EXIT_VALIDATION

    def test_validate_with_config(self, tmp_path, config_file, capsys):
        path = gen(tmp_path, 2, "t2.jsonl")
        assert main(["validate", "--trace", path, "--config", str(config_file)]) == EXIT_OK
        assert "Configuration validation passed" in capsys.readouterr().out

    def test_invalid_trace(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind": "frame", "index": 0}\n', encoding="utf-8")
        assert main(["validate", "--trace", str(path)]) == EXIT_VALIDATION
        assert "missing meta" in capsys.readouterr().err

    def test_missing_trace(self, tmp_path):
        assert main(["validate", "--trace", str(tmp_path / "none.jsonl")]) == EXIT_VALIDATION


class TestRun:
    def test_json_to_stdout(self, tmp_path, config_file, capsys):
        path = gen(tmp_path, 3, "t3.jsonl")
        capsys.readouterr()
        assert main(["run", "--trace", path, "--config", str(config_file)]) == EXIT_OK
        record = json.loads(capsys.readouterr().out)
        assert record["kind"] == "run"
        assert record["settings"]["latency_profile"]["trigger_ms"] == 204.0
        assert [s["trace_id"] for s in record["sessions"]] == ["synthetic-000003"]

    def test_csv_report_file(self, tmp_path, config_file):
        path = gen(tmp_path, 4, "t4.jsonl")
        report = tmp_path / "out" / "run.csv"
        assert main(["run", "-t", path, "-c", str(config_file), "-f", "csv", "-o", str(report)]) == EXIT_OK
        lines = report.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("config,sessions,scored,timing_accuracy")
        assert lines[1].startswith("run,1,")

    def test_trace_directory_markdown(self, tmp_path, capsys):
        for seed in (7, 8):
            gen(tmp_path, seed, f"t{seed}.jsonl")
        capsys.readouterr()
        assert main(["run", "--trace", str(tmp_path / "traces"), "--format", "markdown"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "| synthetic-000007 |" in out
        assert "| synthetic-000008 |" in out
        assert (tmp_path / "logs" / "sgstream.log").exists()

    def test_invalid_config(self, tmp_path):
        path = gen(tmp_path, 3, "t3.jsonl")
        bad = tmp_path / "bad.yml"
        bad.write_text("pipeline:\n  top_k: 0\n", encoding="utf-8")
        assert main(["run", "--trace", path, "--config", str(bad)]) == EXIT_VALIDATION

    def test_invalid_trace(self, tmp_path, config_file):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind": "meta", "total_frames": 2}\n{"kind": "frame", "index": 1}\n', encoding="utf-8")
        assert main(["run", "--trace", str(path), "--config", str(config_file)]) == EXIT_VALIDATION

    def test_runtime_failure(self, tmp_path, config_file, monkeypatch):
        path = gen(tmp_path, 3, "t3.jsonl")

        def explode(*args, **kwargs):
            raise PipelineError("session exploded")

        monkeypatch.setattr("src.cli.run_suite", explode)
        assert main(["run", "--trace", path, "--config", str(config_file)]) == EXIT_RUNTIME

    def test_unknown_format(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--trace", "t.jsonl", "--format", "xml"])
        assert exc.value.code == 2


class TestSweep:
    def test_grid_rows(self, tmp_path, config_file, capsys):
        for seed in range(3):
            gen(tmp_path, seed, f"t{seed}.jsonl")
        grid = tmp_path / "grid.yml"
        grid.write_text("K: [1, 3]\nembed_mode: [graph_text, original_text]\n", encoding="utf-8")
        capsys.readouterr()

        code = main(["sweep", "--traces", str(tmp_path / "traces"), "--grid", str(grid), "-c", str(config_file)])

        assert code == EXIT_OK
        record = json.loads(capsys.readouterr().out)
        assert record["kind"] == "sweep"
        assert len(record["rows"]) == 4
        assert all(row["aggregates"]["sessions"] == 3 for row in record["rows"])

    def test_empty_grid(self, tmp_path, capsys):
        gen(tmp_path, 0, "t0.jsonl")
        grid = tmp_path / "grid.yml"
        grid.write_text("", encoding="utf-8")
        capsys.readouterr()
        assert main(["sweep", "--traces", str(tmp_path / "traces"), "--grid", str(grid), "-f", "csv"]) == EXIT_OK
        assert capsys.readouterr().out.splitlines() == [
            "config,sessions,scored,timing_accuracy,premature_rate,missed_rate,"
            "answer_match_rate,mean_decision_latency_ms,evidence_top1_rate"
        ]

    def test_unknown_dimension(self, tmp_path):
        gen(tmp_path, 0, "t0.jsonl")
        grid = tmp_path / "grid.yml"
        grid.write_text("beam: [1]\n", encoding="utf-8")
        assert main(["sweep", "--traces", str(tmp_path / "traces"), "--grid", str(grid)]) == EXIT_VALIDATION

    def test_missing_directory(self, tmp_path):
        grid = tmp_path / "grid.yml"
        grid.write_text("K: [1]\n", encoding="utf-8")
        assert main(["sweep", "--traces", str(tmp_path / "nope"), "--grid", str(grid)]) == EXIT_VALIDATION


class TestParser:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_VALIDATION
        assert "usage: sgstream" in capsys.readouterr().out

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip() == f"sgstream {__version__}"
