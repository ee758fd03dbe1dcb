"""Canonical types for tasks, samples, labels, and dataset manifests.

Everything here is immutable after construction and safe to share across
threads. Label strings are stored lowercase-normalized; display casing is a
rendering concern.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator


class TaskKind(str, Enum):
    AP = "ap"  # answerability prediction
    CC = "cc"  # category classification
    PRP = "prp"  # product relation prediction
    PSI = "psi"  # product substitute identification
    MPC = "mpc"  # multi-class product classification
    SA = "sa"  # sentiment analysis
    SR = "sr"  # sequential recommendation


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    IND_TEST = "ind_test"
    OOD_TEST = "ood_test"


#: Tasks whose source data carries no held-out category pool.
TASKS_WITHOUT_OOD = frozenset({TaskKind.PSI, TaskKind.MPC})


class LabelKind(str, Enum):
    BINARY = "binary"
    FIXED = "fixed"
    OPTIONS = "options"


BINARY_CLASSES = ("yes", "no")
PRP_CLASSES = ("also_buy", "also_view", "similar")
MPC_CLASSES = ("exact", "substitute", "complement", "irrelevant")
#: Default sentiment classes; configurable because sources are 5-star reviews.
DEFAULT_SA_CLASSES = (
    "very positive",
    "positive",
    "neutral",
    "negative",
    "very negative",
)

#: Context fields each task must carry. `history` holds an ordered list of
#: per-item summary strings; `options` holds the per-sample answer list.
REQUIRED_FIELDS: dict[TaskKind, frozenset[str]] = {
    TaskKind.AP: frozenset({"question", "review"}),
    TaskKind.CC: frozenset({"title", "options"}),
    TaskKind.PRP: frozenset({"title_1", "title_2"}),
    TaskKind.PSI: frozenset({"query", "title"}),
    TaskKind.MPC: frozenset({"query", "title"}),
    TaskKind.SA: frozenset({"review"}),
    TaskKind.SR: frozenset({"history", "options"}),
}

#: Context fields that must be lists rather than plain strings.
LIST_FIELDS = frozenset({"options", "history"})


@dataclass(frozen=True)
class ImageRef:
    """Opaque image locator (path or URL) with an optional size hint."""

    locator: str
    width: int | None = None
    height: int | None = None

    def violations(self) -> list[str]:
        out = []
        if not self.locator:
            out.append("image locator empty")
        if self.width is not None and self.width <= 0:
            out.append(f"image width not positive: {self.width}")
        if self.height is not None and self.height <= 0:
            out.append(f"image height not positive: {self.height}")
        return out


@dataclass(frozen=True)
class Sample:
    """One task instance: context fields, image references, and gold label."""

    id: str
    task: TaskKind
    context: dict[str, Any]
    images: tuple[ImageRef, ...]
    gold: str
    split: Split
    extra: dict[str, Any] = field(default_factory=dict)

    def options(self) -> list[str]:
        return list(self.context.get("options", []))

    def history(self) -> list[str]:
        return list(self.context.get("history", []))


@dataclass(frozen=True)
class LabelSpace:
    task: TaskKind
    kind: LabelKind
    classes: tuple[str, ...]

    def members_for(self, sample: Sample) -> list[str]:
        """Allowed labels for one sample, resolving per-sample options."""
        if self.kind is LabelKind.OPTIONS:
            return [normalize_label(o) for o in sample.options()]
        return list(self.classes)


def normalize_label(label: str) -> str:
    return " ".join(label.strip().lower().split())


def label_space_for(
    task: TaskKind, sa_classes: tuple[str, ...] = DEFAULT_SA_CLASSES
) -> LabelSpace:
    """Label-space descriptor for a task; total over the 7 variants."""
    if task in (TaskKind.AP, TaskKind.PSI):
        return LabelSpace(task, LabelKind.BINARY, BINARY_CLASSES)
    if task is TaskKind.PRP:
        return LabelSpace(task, LabelKind.FIXED, PRP_CLASSES)
    if task is TaskKind.MPC:
        return LabelSpace(task, LabelKind.FIXED, MPC_CLASSES)
    if task is TaskKind.SA:
        return LabelSpace(task, LabelKind.FIXED, tuple(normalize_label(c) for c in sa_classes))
    return LabelSpace(task, LabelKind.OPTIONS, ())


def validate_sample(
    sample: Sample, sa_classes: tuple[str, ...] = DEFAULT_SA_CLASSES
) -> list[str]:
    """Return every invariant violation for a sample; empty means valid."""
    out: list[str] = []
    required = REQUIRED_FIELDS[sample.task]
    for name in sorted(required):
        value = sample.context.get(name)
        if value is None or value == "" or value == []:
            out.append(f"missing field: {name}")
        elif name in LIST_FIELDS and not isinstance(value, list):
            out.append(f"field {name} must be a list")
    if not sample.images:
        out.append("no images")
    for ref in sample.images:
        out.extend(ref.violations())
    if sample.task in TASKS_WITHOUT_OOD and sample.split is Split.OOD_TEST:
        out.append(f"{sample.task.value} carries no ood_test split")

    space = label_space_for(sample.task, sa_classes)
    gold = normalize_label(sample.gold)
    if space.kind is LabelKind.OPTIONS:
        options = [normalize_label(o) for o in sample.options()]
        if options and gold not in options:
            out.append("gold not among options")
    else:
        if gold not in space.classes:
            out.append(f"gold not in {{{','.join(space.classes)}}}")
    return out


# ---------------------------------------------------------------------------
# Line-delimited dataset files. Field names are part of the on-disk contract;
# unknown fields round-trip through Sample.extra.

_KNOWN_FIELDS = {"id", "task", "split", "context", "images", "gold"}


def sample_to_record(sample: Sample) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": sample.id,
        "task": sample.task.value,
        "split": sample.split.value,
        "context": sample.context,
        "images": [
            {
                k: v
                for k, v in (
                    ("locator", ref.locator),
                    ("width", ref.width),
                    ("height", ref.height),
                )
                if v is not None
            }
            for ref in sample.images
        ],
        "gold": sample.gold,
    }
    record.update(sample.extra)
    return record


def sample_from_record(record: dict[str, Any]) -> Sample:
    images = tuple(
        ImageRef(img["locator"], img.get("width"), img.get("height"))
        for img in record["images"]
    )
    extra = {k: v for k, v in record.items() if k not in _KNOWN_FIELDS}
    return Sample(
        id=record["id"],
        task=TaskKind(record["task"]),
        context=record["context"],
        images=images,
        gold=record["gold"],
        split=Split(record["split"]),
        extra=extra,
    )


def write_samples(path: Path | str, samples: Iterable[Sample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")


def read_samples(path: Path | str) -> Iterator[Sample]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield sample_from_record(json.loads(line))


def content_digest(samples: Iterable[Sample]) -> str:
    """Order-sensitive digest over the serialized sample records."""
    h = hashlib.sha256()
    for sample in samples:
        h.update(json.dumps(sample_to_record(sample), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


# Published split sizes of the full dataset.
FULL_SPLIT_SIZES: dict[Split, int] = {
    Split.TRAIN: 8_000,
    Split.VALIDATION: 1_000,
    Split.IND_TEST: 1_000,
    Split.OOD_TEST: 1_000,
}
FULL_TOTALS: dict[Split, int] = {
    Split.TRAIN: 56_000,
    Split.VALIDATION: 7_000,
    Split.IND_TEST: 7_000,
    Split.OOD_TEST: 5_000,
}


@dataclass(frozen=True)
class ManifestEntry:
    count: int
    digest: str


@dataclass(frozen=True)
class DatasetManifest:
    """Per-(task, split) counts and digests plus the global total."""

    entries: dict[tuple[TaskKind, Split], ManifestEntry]
    total: int
    seed: int | None = None

    def violations_against_full_shape(self) -> list[str]:
        """Check the manifest against the published full-dataset shape."""
        out: list[str] = []
        for task in TaskKind:
            for split, expected in FULL_SPLIT_SIZES.items():
                if split is Split.OOD_TEST and task in TASKS_WITHOUT_OOD:
                    if (task, split) in self.entries:
                        out.append(f"{task.value} must not have ood_test")
                    continue
                entry = self.entries.get((task, split))
                if entry is None:
                    out.append(f"missing entry: {task.value}/{split.value}")
                elif entry.count != expected:
                    out.append(
                        f"{task.value}/{split.value}: expected {expected}, got {entry.count}"
                    )
        expected_total = sum(
            e for e in (FULL_TOTALS[s] for s in Split)
        )
        if self.total != expected_total:
            out.append(f"total: expected {expected_total}, got {self.total}")
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "total": self.total,
            "entries": {
                f"{task.value}/{split.value}": {"count": e.count, "digest": e.digest}
                for (task, split), e in sorted(self.entries.items())
            },
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "DatasetManifest":
        entries = {}
        for key, value in data["entries"].items():
            task_s, split_s = key.split("/")
            entries[(TaskKind(task_s), Split(split_s))] = ManifestEntry(
                value["count"], value["digest"]
            )
        return cls(entries=entries, total=data["total"], seed=data.get("seed"))
