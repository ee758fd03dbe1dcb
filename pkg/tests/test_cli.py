from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from capfuse.cli import main
from capfuse.datamodel import DatasetManifest, Split, TaskKind, read_samples, write_samples
from capfuse.evaluation import MetricReport
from capfuse.pipeline import read_records

from conftest import make_sample


@pytest.fixture
def runner():
    return CliRunner()


def _write_pool(path: Path, task: TaskKind, n: int) -> None:
    write_samples(path, [make_sample(task, i, Split.TRAIN) for i in range(n)])


def _run_config(
    tmp_path: Path, server, dataset_files: list[Path], strategy: str = "mv", **extra
) -> Path:
    endpoint = lambda model, vision=False: {
        "base_url": server.base_url,
        "model": model,
        "vision": vision,
        "timeout": 5.0,
        "backoff_base": 0.01,
    }
    config = {
        "dataset": [str(p) for p in dataset_files],
        "strategy": strategy,
        "cache_dir": str(tmp_path / "cache"),
        "concurrency": 4,
        "endpoints": {
            "captioner": endpoint("captioner", vision=True),
            "task_model": endpoint("taskmodel"),
            "voters": [endpoint(f"voter-{i}") for i in range(3)],
        },
    }
    config.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


# --- curate ----------------------------------------------------------------


def test_curate_writes_splits_and_manifest(runner, tmp_path):
    raw = {}
    for task in (TaskKind.AP, TaskKind.SA):
        pool = tmp_path / f"{task.value}_pool.jsonl"
        _write_pool(pool, task, 60)
        raw[task.value] = {"ind": str(pool)}
    raw_path = tmp_path / "raw.json"
    raw_path.write_text(json.dumps(raw), encoding="utf-8")

    out = tmp_path / "dataset"
    result = runner.invoke(
        main,
        ["curate", "--raw", str(raw_path), "--out", str(out),
         "--train-cap", "40", "--val-cap", "6", "--test-cap", "6"],
    )
    assert result.exit_code == 0, result.output
    manifest = DatasetManifest.from_json(
        json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    )
    assert manifest.seed == 42
    for task in (TaskKind.AP, TaskKind.SA):
        for split in (Split.TRAIN, Split.VALIDATION, Split.IND_TEST):
            samples = list(read_samples(out / f"{task.value}_{split.value}.jsonl"))
            assert samples
            assert manifest.entries[(task, split)].count == len(samples)
    assert "label ratio" in result.output


def test_curate_bad_source_exits_2(runner, tmp_path):
    raw_path = tmp_path / "raw.json"
    raw_path.write_text(json.dumps({"nope": {"ind": "x.jsonl"}}), encoding="utf-8")
    result = runner.invoke(main, ["curate", "--raw", str(raw_path), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "error:" in result.output


# --- run -------------------------------------------------------------------


def _dataset_file(tmp_path: Path, n: int = 6) -> Path:
    path = tmp_path / "data.jsonl"
    write_samples(path, [make_sample(TaskKind.SA, i) for i in range(n)])
    return path


def test_run_produces_records_and_manifest(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path)
    config = _run_config(tmp_path, mock_server, [data])
    out = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    records = read_records(out / "records.jsonl")
    assert len(records) == 6
    manifest = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
    assert manifest["strategy"] == "mv"
    assert manifest["samples"] == 6


def test_run_strategy_override(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path, 2)
    config = _run_config(tmp_path, mock_server, [data], strategy="mv")
    out = tmp_path / "out"
    result = runner.invoke(
        main, ["run", "--config", str(config), "--out", str(out), "--strategy", "uia"]
    )
    assert result.exit_code == 0, result.output
    records = read_records(out / "records.jsonl")
    assert all(r.verdicts[0].strategy == "uia" for r in records)


def test_run_single_voter_strategy_by_name(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path, 2)
    config = _run_config(tmp_path, mock_server, [data], strategy="single:voter-1")
    out = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    records = read_records(out / "records.jsonl")
    for record in records:
        assert record.verdicts[0].strategy == "single"
        assert [v.voter for v in record.verdicts[0].votes] == ["voter-1"]


def test_run_unknown_strategy_exits_2(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path, 1)
    config = _run_config(tmp_path, mock_server, [data], strategy="coin-flip")
    result = runner.invoke(main, ["run", "--config", str(config), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "unknown strategy" in result.output


def test_run_dry_run_makes_no_network_calls(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path, 3)
    config = _run_config(tmp_path, mock_server, [data])
    out = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", str(config), "--out", str(out), "--dry-run"])
    assert result.exit_code == 0, result.output
    assert mock_server.request_count == 0
    bundles = sorted((out / "prompts").glob("*.json"))
    assert len(bundles) == 3
    bundle = json.loads(bundles[0].read_text(encoding="utf-8"))
    assert bundle["captioning"] and bundle["task_without_caption"]


def test_run_resume_skips_completed_calls(runner, tmp_path, mock_server):
    data = _dataset_file(tmp_path, 4)
    config = _run_config(tmp_path, mock_server, [data])
    out = tmp_path / "out"
    assert runner.invoke(main, ["run", "--config", str(config), "--out", str(out)]).exit_code == 0
    first_count = mock_server.request_count
    result = runner.invoke(
        main, ["run", "--config", str(config), "--out", str(out), "--resume"]
    )
    assert result.exit_code == 0, result.output
    assert mock_server.request_count == first_count  # all served from cache


# --- eval / diff / export --------------------------------------------------


def _records_and_dataset(runner, tmp_path, mock_server) -> tuple[Path, Path]:
    data = _dataset_file(tmp_path, 5)
    config = _run_config(tmp_path, mock_server, [data], strategy="uia")
    out = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out / "records.jsonl", data


def test_eval_prints_table_and_saves_report(runner, tmp_path, mock_server):
    records, data = _records_and_dataset(runner, tmp_path, mock_server)
    report_path = tmp_path / "report.json"
    result = runner.invoke(
        main,
        ["eval", "--records", str(records), "--dataset", str(data), "--out", str(report_path)],
    )
    assert result.exit_code == 0, result.output
    assert "#failed" in result.output
    report = MetricReport.load(report_path)
    assert TaskKind.SA in report.tasks


def test_eval_mismatched_dataset_exits_2(runner, tmp_path, mock_server):
    records, _ = _records_and_dataset(runner, tmp_path, mock_server)
    other = tmp_path / "other.jsonl"
    write_samples(other, [make_sample(TaskKind.AP, 0)])
    result = runner.invoke(main, ["eval", "--records", str(records), "--dataset", str(other)])
    assert result.exit_code == 2


def test_diff_command(runner, tmp_path, mock_server):
    records, data = _records_and_dataset(runner, tmp_path, mock_server)
    report = tmp_path / "report.json"
    assert (
        runner.invoke(
            main,
            ["eval", "--records", str(records), "--dataset", str(data), "--out", str(report)],
        ).exit_code
        == 0
    )
    result = runner.invoke(main, ["diff", str(report), str(report)])
    assert result.exit_code == 0, result.output
    assert "+0.0000" in result.output or "0.0000" in result.output


def test_export_finetune_pairs(runner, tmp_path, mock_server):
    records, data = _records_and_dataset(runner, tmp_path, mock_server)
    out = tmp_path / "finetune.jsonl"
    result = runner.invoke(
        main,
        ["export-finetune", "--records", str(records), "--dataset", str(data), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    lines = [json.loads(l) for l in out.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == 5
    for line in lines:
        assert set(line) == {"prompt", "gold"}
        assert line["gold"] == "negative"


def test_credentials_never_accepted_as_flags(runner):
    for command in ("run", "curate", "eval", "diff", "export-finetune"):
        result = runner.invoke(main, [command, "--help"])
        assert result.exit_code == 0
        lowered = result.output.lower()
        assert "--api-key" not in lowered
        assert "--token" not in lowered
