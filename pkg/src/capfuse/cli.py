"""Operator commands: curate, run, eval, diff, export-finetune.

Exit codes: 0 success, 1 runtime failure, 2 configuration or data error.
Credentials are taken only from environment variables named in the config
file, never from flags.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import curation, evaluation
from .curation import CurationError, SplitPlan
from .datamodel import (
    Sample,
    Split,
    TaskKind,
    read_samples,
    write_samples,
)
from .inference import ConfigurationError, EndpointConfig
from .pipeline import (
    GateStrategy,
    PipelineConfig,
    PipelineRunner,
    read_records,
    write_records,
)
from .prompting import PromptError, Stage, TemplateId, TemplateStore

CONFIG_ERRORS = (CurationError, ConfigurationError, PromptError, KeyError, ValueError)


def _load_dataset(paths: tuple[str, ...]) -> list[Sample]:
    samples: list[Sample] = []
    for path in paths:
        samples.extend(read_samples(path))
    return samples


def _endpoint(data: dict) -> EndpointConfig:
    return EndpointConfig(
        base_url=data["base_url"],
        model=data["model"],
        api_key_env=data.get("api_key_env"),
        vision=data.get("vision", False),
        timeout=data.get("timeout", 30.0),
        max_retries=data.get("max_retries", 3),
        max_in_flight=data.get("max_in_flight", 8),
        temperature=data.get("temperature", 0.0),
        max_output_tokens=data.get("max_output_tokens", 256),
        backoff_base=data.get("backoff_base", 0.5),
    )


def _strategy(spec: str, voters: list[EndpointConfig]) -> GateStrategy:
    if spec == "uia":
        return GateStrategy.uia()
    if spec == "mv":
        if not voters:
            raise ConfigurationError("strategy mv requires at least one voter endpoint")
        return GateStrategy.mv(voters)
    if spec.startswith("single:"):
        name = spec.split(":", 1)[1]
        for voter in voters:
            if voter.model == name:
                return GateStrategy.single(voter)
        raise ConfigurationError(f"single-voter strategy: no voter named {name!r}")
    raise ConfigurationError(f"unknown strategy: {spec!r}")


@click.group()
def main() -> None:
    """Captioning / gating / fusion pipeline tooling."""


@main.command()
@click.option("--raw", "raw_config", required=True, type=click.Path(exists=True),
              help="JSON file mapping task to its raw pool files: "
                   '{"ap": {"ind": "pool.jsonl", "ood": "..."}, ...}')
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--train-cap", default=8000, show_default=True, type=int)
@click.option("--val-cap", default=1000, show_default=True, type=int)
@click.option("--test-cap", default=1000, show_default=True, type=int)
@click.option("--ood-cap", default=1000, show_default=True, type=int)
def curate(raw_config, out_dir, seed, train_cap, val_cap, test_cap, ood_cap) -> None:
    """Build per-(task, split) dataset files and a manifest from raw pools."""
    try:
        spec = json.loads(Path(raw_config).read_text(encoding="utf-8"))
        plan = SplitPlan(
            train_cap=train_cap, val_cap=val_cap, test_cap=test_cap,
            ood_cap=ood_cap, seed=seed,
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        datasets: dict[TaskKind, dict[Split, list[Sample]]] = {}
        for task_s, paths in spec.items():
            task = TaskKind(task_s)
            ind_pool = list(read_samples(paths["ind"]))
            ood_pool = list(read_samples(paths["ood"])) if paths.get("ood") else []
            datasets[task] = curation.curate_task(task, ind_pool, plan, ood_pool)
            for split, samples in datasets[task].items():
                write_samples(out / f"{task.value}_{split.value}.jsonl", samples)
            for label, fraction in curation.label_ratio(
                datasets[task][Split.TRAIN]
            ).items():
                click.echo(f"{task.value} train label ratio: {label}={fraction:.3f}")
        manifest = curation.build_manifest(datasets, seed)
        (out / "manifest.json").write_text(
            json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        click.echo(f"wrote {manifest.total} samples to {out}")
    except CONFIG_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--strategy", "strategy_spec", default=None,
              help="Override: uia, mv, or single:<voter model>.")
@click.option("--dry-run", is_flag=True, help="Render prompt bundles; no network calls.")
@click.option("--resume", is_flag=True,
              help="Reuse the cache directory; completed calls are not re-issued.")
def run(config_path, out_dir, strategy_spec, dry_run, resume) -> None:
    """Run the caption / gate / fuse pipeline over a dataset."""
    try:
        config_data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        samples = _load_dataset(tuple(config_data["dataset"]))
        voters = [_endpoint(v) for v in config_data["endpoints"].get("voters", [])]
        strategy = _strategy(strategy_spec or config_data.get("strategy", "mv"), voters)
        cache_dir = config_data.get("cache_dir")
        pipeline_config = PipelineConfig(
            captioner=_endpoint(config_data["endpoints"]["captioner"]),
            task_model=_endpoint(config_data["endpoints"]["task_model"]),
            strategy=strategy,
            cache_dir=Path(cache_dir) if cache_dir else None,
            template_dir=config_data.get("template_dir"),
            concurrency=config_data.get("concurrency", 8),
            seed=config_data.get("seed", 42),
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if dry_run:
            _dry_run(samples, pipeline_config, out)
            return
    except CONFIG_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    try:
        with PipelineRunner(pipeline_config) as runner:
            records, manifest = runner.run(samples)
        write_records(out / "records.jsonl", records)
        (out / "run_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        click.echo(f"wrote {len(records)} records to {out / 'records.jsonl'}")
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(1)


def _dry_run(samples, pipeline_config: PipelineConfig, out: Path) -> None:
    templates = TemplateStore.load(pipeline_config.template_dir)
    prompts_dir = out / "prompts"
    prompts_dir.mkdir(parents=True, exist_ok=True)
    from .pipeline import caption_count

    for sample in samples:
        bundle = {
            "sample_id": sample.id,
            "captioning": [
                templates.render(
                    TemplateId(sample.task, Stage.CAPTIONING), sample, item_index=i
                ).text
                for i in range(caption_count(sample))
            ],
            "task_without_caption": templates.render_task(sample).text,
        }
        (prompts_dir / f"{sample.id}.json").write_text(
            json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    click.echo(f"wrote {len(samples)} prompt bundles to {prompts_dir}")


@main.command("eval")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(records_path, dataset_paths, out_path) -> None:
    """Compute the metric report for a record file against its dataset."""
    try:
        records = read_records(records_path)
        samples = _load_dataset(dataset_paths)
        report = evaluation.build_report(records, samples)
    except (evaluation.ReportError, *CONFIG_ERRORS) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(evaluation.format_report(report))
    if out_path:
        report.save(out_path)


@main.command()
@click.argument("report_a", type=click.Path(exists=True))
@click.argument("report_b", type=click.Path(exists=True))
def diff(report_a, report_b) -> None:
    """Primary-metric deltas of report A over report B."""
    a = evaluation.MetricReport.load(report_a)
    b = evaluation.MetricReport.load(report_b)
    click.echo(evaluation.format_diff(evaluation.diff_reports(a, b)))


@main.command("export-finetune")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def export_finetune(records_path, dataset_paths, out_path) -> None:
    """Write fused prompt / gold pairs for external fine-tuning."""
    try:
        records = read_records(records_path)
        samples = {s.id: s for s in _load_dataset(dataset_paths)}
        missing = [r.sample_id for r in records if r.sample_id not in samples]
        if missing:
            raise CurationError(f"records without dataset samples: {missing[:5]}")
    except CONFIG_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    with Path(out_path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {"prompt": record.fused_prompt, "gold": samples[record.sample_id].gold},
                    sort_keys=True,
                )
                + "\n"
            )
    click.echo(f"wrote {len(records)} pairs to {out_path}")


if __name__ == "__main__":
    main()
