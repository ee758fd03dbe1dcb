"""Output parsing, metric computation with failure-case exclusion, and
report/diff emission.

Failures (outputs from which no valid label can be parsed) are excluded from
metric denominators and reported as a separate count. Per-class precision and
recall use the 0/0 -> 0 convention, flagged in the report; macro F1 is the
unweighted mean of per-class F1 scores.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .datamodel import (
    LabelKind,
    LabelSpace,
    Sample,
    TaskKind,
    label_space_for,
    normalize_label,
)
from .pipeline import PipelineRecord, caption_usage_rate

#: Primary metric per task, as reported in the headline comparison.
PRIMARY_METRIC: dict[TaskKind, str] = {
    TaskKind.AP: "binary_f1",
    TaskKind.CC: "recall_at_1",
    TaskKind.PRP: "macro_f1",
    TaskKind.PSI: "binary_f1",
    TaskKind.MPC: "accuracy",
    TaskKind.SA: "macro_f1",
    TaskKind.SR: "recall_at_1",
}

POSITIVE_LABEL = "yes"


@dataclass(frozen=True)
class ParsedLabel:
    value: str | None
    failed_reason: str | None = None

    @property
    def failed(self) -> bool:
        return self.value is None


def _normalize_output(raw: str) -> str:
    stripped = raw.strip()
    if not stripped:
        return ""
    first_line = stripped.splitlines()[0].lower()
    first_line = first_line.strip(string.whitespace + string.punctuation)
    return " ".join(first_line.split())


def parse_prediction(
    task: TaskKind,
    raw: str | None,
    label_space: LabelSpace,
    options: Sequence[str] = (),
) -> ParsedLabel:
    """Extract a label from a raw model output, or fail with a reason."""
    if raw is None:
        return ParsedLabel(None, "no model output")
    text = _normalize_output(raw)
    if not text:
        return ParsedLabel(None, "empty output")

    if label_space.kind is LabelKind.BINARY:
        match = re.match(r"^(yes|no)\b", text)
        if match:
            return ParsedLabel(match.group(1))
        return ParsedLabel(None, f"no yes/no token in {text[:40]!r}")

    if label_space.kind is LabelKind.OPTIONS:
        allowed = [normalize_label(o) for o in options]
    else:
        allowed = list(label_space.classes)
    if not allowed:
        return ParsedLabel(None, "empty label space")

    exact = [label for label in allowed if label == text]
    if len(exact) == 1:
        return ParsedLabel(exact[0])
    contained = [label for label in allowed if label in text]
    if len(contained) == 1:
        return ParsedLabel(contained[0])
    if len(contained) > 1:
        return ParsedLabel(None, f"ambiguous: {len(contained)} matches")
    return ParsedLabel(None, f"no label match in {text[:40]!r}")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts keyed (predicted, gold) over a fixed class list."""

    classes: tuple[str, ...]
    counts: Mapping[tuple[str, str], int]

    @classmethod
    def from_pairs(
        cls, pairs: Iterable[tuple[str, str]], classes: Sequence[str]
    ) -> "ConfusionMatrix":
        counts: dict[tuple[str, str], int] = {}
        for predicted, gold in pairs:
            counts[(predicted, gold)] = counts.get((predicted, gold), 0) + 1
        return cls(tuple(classes), counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def predicted_count(self, label: str) -> int:
        return sum(n for (p, _), n in self.counts.items() if p == label)

    def gold_count(self, label: str) -> int:
        return sum(n for (_, g), n in self.counts.items() if g == label)

    def correct(self, label: str) -> int:
        return self.counts.get((label, label), 0)


def accuracy(cm: ConfusionMatrix) -> float | None:
    """Trace over total; None when nothing was evaluated."""
    if cm.total == 0:
        return None
    return sum(cm.correct(c) for c in cm.classes) / cm.total


def _prf(cm: ConfusionMatrix, label: str) -> tuple[float, float, float]:
    tp = cm.correct(label)
    predicted = cm.predicted_count(label)
    gold = cm.gold_count(label)
    precision = tp / predicted if predicted else 0.0
    recall = tp / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def macro_prf(cm: ConfusionMatrix) -> tuple[float, float, float] | None:
    """Unweighted class means; macro F1 is the mean of per-class F1 scores."""
    if cm.total == 0:
        return None
    per_class = [_prf(cm, label) for label in cm.classes]
    n = len(per_class)
    return (
        sum(p for p, _, _ in per_class) / n,
        sum(r for _, r, _ in per_class) / n,
        sum(f for _, _, f in per_class) / n,
    )


def binary_f1(cm: ConfusionMatrix, positive: str = POSITIVE_LABEL) -> float | None:
    """F1 of the designated positive class; 0 by convention when the class is
    absent from both gold and predictions."""
    if cm.total == 0:
        return None
    return _prf(cm, positive)[2]


def recall_at_1(pairs: Iterable[tuple[str, str]]) -> float | None:
    """Fraction of evaluated samples whose top prediction equals gold."""
    total = correct = 0
    for predicted, gold in pairs:
        total += 1
        if predicted == gold:
            correct += 1
    return correct / total if total else None


@dataclass(frozen=True)
class TaskMetrics:
    task: TaskKind
    evaluated: int
    failed: int
    accuracy: float | None = None
    binary_f1: float | None = None
    macro_precision: float | None = None
    macro_recall: float | None = None
    macro_f1: float | None = None
    recall_at_1: float | None = None
    caption_usage: float | None = None
    flags: tuple[str, ...] = ()

    def primary(self) -> float | None:
        return getattr(self, PRIMARY_METRIC[self.task])

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "evaluated": self.evaluated,
            "failed": self.failed,
            "accuracy": self.accuracy,
            "binary_f1": self.binary_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "recall_at_1": self.recall_at_1,
            "caption_usage": self.caption_usage,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class MetricReport:
    tasks: dict[TaskKind, TaskMetrics] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {task.value: m.to_json() for task, m in sorted(self.tasks.items())}

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "MetricReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        tasks = {}
        for task_s, m in data.items():
            task = TaskKind(task_s)
            tasks[task] = TaskMetrics(
                task=task,
                evaluated=m["evaluated"],
                failed=m["failed"],
                accuracy=m["accuracy"],
                binary_f1=m["binary_f1"],
                macro_precision=m["macro_precision"],
                macro_recall=m["macro_recall"],
                macro_f1=m["macro_f1"],
                recall_at_1=m["recall_at_1"],
                caption_usage=m["caption_usage"],
                flags=tuple(m.get("flags", [])),
            )
        return cls(tasks)


class ReportError(Exception):
    """Records and dataset do not line up."""


def build_report(
    records: Sequence[PipelineRecord],
    samples: Sequence[Sample],
) -> MetricReport:
    """Per-task metric block from pipeline records against their dataset."""
    by_id = {s.id: s for s in samples}
    missing = [r.sample_id for r in records if r.sample_id not in by_id]
    if missing:
        raise ReportError(f"records without dataset samples: {', '.join(missing[:5])}")
    usage = caption_usage_rate(records)

    grouped: dict[TaskKind, list[tuple[PipelineRecord, Sample]]] = {}
    for record in records:
        grouped.setdefault(record.task, []).append((record, by_id[record.sample_id]))

    tasks: dict[TaskKind, TaskMetrics] = {}
    for task, items in grouped.items():
        space = label_space_for(task)
        pairs: list[tuple[str, str]] = []
        failed = 0
        flags: set[str] = set()
        for record, sample in items:
            parsed = parse_prediction(task, record.raw_output, space, sample.options())
            if parsed.failed:
                failed += 1
                continue
            pairs.append((parsed.value, normalize_label(sample.gold)))

        classes: tuple[str, ...]
        if space.kind is LabelKind.OPTIONS:
            classes = tuple(sorted({g for _, g in pairs} | {p for p, _ in pairs}))
        else:
            classes = space.classes
        cm = ConfusionMatrix.from_pairs(pairs, classes)
        for label in classes:
            if cm.gold_count(label) == 0 and cm.predicted_count(label) == 0:
                flags.add(f"empty class: {label}")

        macro = macro_prf(cm)
        tasks[task] = TaskMetrics(
            task=task,
            evaluated=len(pairs),
            failed=failed,
            accuracy=accuracy(cm),
            binary_f1=binary_f1(cm) if space.kind is LabelKind.BINARY else None,
            macro_precision=macro[0] if macro else None,
            macro_recall=macro[1] if macro else None,
            macro_f1=macro[2] if macro else None,
            recall_at_1=(
                recall_at_1(pairs) if space.kind is LabelKind.OPTIONS else None
            ),
            caption_usage=usage.get(task),
            flags=tuple(sorted(flags)),
        )
    return MetricReport(tasks)


def format_report(report: MetricReport) -> str:
    """Aligned plain-text table, one row per task."""
    headers = ["task", "primary", "value", "acc", "m-pre", "m-rec", "m-f1", "#failed", "caption used"]
    rows = [headers]
    for task, m in sorted(report.tasks.items()):
        fmt = lambda v: "-" if v is None else f"{v:.4f}"
        rows.append(
            [
                task.value,
                PRIMARY_METRIC[task],
                fmt(m.primary()),
                fmt(m.accuracy),
                fmt(m.macro_precision),
                fmt(m.macro_recall),
                fmt(m.macro_f1),
                str(m.failed),
                "-" if m.caption_usage is None else f"{100 * m.caption_usage:.1f}%",
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


@dataclass(frozen=True)
class ReportDiff:
    """Per-task primary-metric deltas of run A over run B."""

    deltas: dict[TaskKind, float | None]
    relative: dict[TaskKind, float | None]
    mean_relative_improvement: float | None


def diff_reports(a: MetricReport, b: MetricReport) -> ReportDiff:
    """Per-task deltas and the mean of per-task relative improvements."""
    deltas: dict[TaskKind, float | None] = {}
    relative: dict[TaskKind, float | None] = {}
    rel_values: list[float] = []
    for task in sorted(set(a.tasks) & set(b.tasks)):
        va, vb = a.tasks[task].primary(), b.tasks[task].primary()
        if va is None or vb is None:
            deltas[task] = relative[task] = None
            continue
        deltas[task] = va - vb
        relative[task] = (va - vb) / vb if vb else None
        if relative[task] is not None:
            rel_values.append(relative[task])
    mean = sum(rel_values) / len(rel_values) if rel_values else None
    return ReportDiff(deltas=deltas, relative=relative, mean_relative_improvement=mean)


def format_diff(diff: ReportDiff) -> str:
    lines = ["task  delta     relative"]
    for task in sorted(diff.deltas):
        delta, rel = diff.deltas[task], diff.relative[task]
        d = "-" if delta is None else f"{delta:+.4f}"
        r = "-" if rel is None else f"{100 * rel:+.1f}%"
        lines.append(f"{task.value:<5} {d:<9} {r}")
    if diff.mean_relative_improvement is not None:
        lines.append(f"mean relative improvement: {100 * diff.mean_relative_improvement:+.1f}%")
    return "\n".join(lines)
