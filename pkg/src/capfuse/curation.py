"""Dataset construction rules: filtering, relabeling, IND/OOD assignment,
splitting, dedup, and downsampling.

All operations are pure functions over in-memory collections. Splitting and
downsampling draw from a single seeded generator over pre-sorted input so a
rerun with the same seed reproduces manifests bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

from .datamodel import (
    DatasetManifest,
    ManifestEntry,
    Sample,
    Split,
    TaskKind,
    content_digest,
)

T = TypeVar("T")

RAW_SOURCES = ("amazon_review", "amazon_qa", "mave", "shopping_queries")


class CurationError(Exception):
    """Configuration or data error that should abort a curation run."""


@dataclass(frozen=True)
class RawRecord:
    """One record from a raw source file, prior to task shaping."""

    source: str
    fields: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.source not in RAW_SOURCES:
            raise CurationError(f"unknown raw source: {self.source}")


@dataclass(frozen=True)
class SplitPlan:
    """Split ratios and per-task caps for one curation run."""

    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    train_cap: int = 8_000
    val_cap: int = 1_000
    test_cap: int = 1_000
    ood_cap: int = 1_000
    seed: int = 42

    def __post_init__(self) -> None:
        total = self.train_ratio + self.val_ratio + self.test_ratio
        if abs(total - 1.0) > 1e-9:
            raise CurationError(f"split ratios must sum to 1, got {total}")
        for cap in (self.train_cap, self.val_cap, self.test_cap, self.ood_cap):
            if cap <= 0:
                raise CurationError(f"caps must be positive, got {cap}")


def rank_and_assign_categories(
    categories: Iterable[str],
) -> tuple[list[str], list[str]]:
    """Assign categories ranked 1-100 by frequency to IND and 101-200 to OOD.

    Ties are broken lexicographically so membership is reproducible. Input is
    one category label per record.
    """
    counts = Counter(categories)
    if len(counts) < 200:
        raise CurationError(f"need >=200 distinct categories, have {len(counts)}")
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    return ranked[:100], ranked[100:200]


def split_ratio(
    samples: Sequence[T], plan: SplitPlan
) -> tuple[list[T], list[T], list[T]]:
    """Disjoint train/val/test partition at the plan's ratios.

    Sizes are within +-1 of the exact ratios (largest-remainder rounding) and
    the shuffle is deterministic under the plan seed.
    """
    if not samples:
        raise CurationError("split_ratio requires a non-empty input")
    n = len(samples)
    ratios = (plan.train_ratio, plan.val_ratio, plan.test_ratio)
    exact = [n * r for r in ratios]
    sizes = [int(x) for x in exact]
    remainders = sorted(
        range(3), key=lambda i: (-(exact[i] - sizes[i]), i)
    )
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    rng = random.Random(plan.seed)
    order = list(range(n))
    rng.shuffle(order)
    picked = [samples[i] for i in order]
    train = picked[: sizes[0]]
    val = picked[sizes[0] : sizes[0] + sizes[1]]
    test = picked[sizes[0] + sizes[1] :]
    return train, val, test


@dataclass(frozen=True)
class UserSplit:
    """Leave-last-out assignment for one user sequence."""

    train_history: tuple[T, ...]
    val_target: T
    test_target: T

    @property
    def val_history(self) -> tuple[T, ...]:
        return self.train_history

    @property
    def test_history(self) -> tuple[T, ...]:
        return self.train_history + (self.val_target,)


def leave_last_out(
    user_sequences: Mapping[str, Sequence[T]],
) -> tuple[dict[str, UserSplit], dict[str, str]]:
    """Per user: last item to test, second-last to validation, prefix to train.

    Sequences shorter than 3 are rejected with a reason instead of raising.
    """
    accepted: dict[str, UserSplit] = {}
    rejected: dict[str, str] = {}
    for user, seq in user_sequences.items():
        if len(seq) < 3:
            rejected[user] = f"length<3 (got {len(seq)})"
            continue
        accepted[user] = UserSplit(
            train_history=tuple(seq[:-2]),
            val_target=seq[-2],
            test_target=seq[-1],
        )
    return accepted, rejected


_ESCI_ALIASES = {
    "e": "exact",
    "s": "substitute",
    "c": "complement",
    "i": "irrelevant",
}


def relabel_esci(label: str) -> str:
    """Collapse the four-way relevance label to substitute / non_substitute."""
    norm = label.strip().lower()
    norm = _ESCI_ALIASES.get(norm, norm)
    if norm == "substitute":
        return "substitute"
    if norm in ("exact", "complement", "irrelevant"):
        return "non_substitute"
    raise CurationError(f"unknown ESCI label: {label!r}")


def dedup_conflicting_relations(
    pairs: Iterable[tuple[str, str, str]],
) -> list[tuple[str, str, str]]:
    """Drop any unordered product pair observed with two or more distinct
    relation labels; keep consistently-labeled pairs once, in first-seen order.
    """
    pairs = list(pairs)
    labels: dict[frozenset[str], set[str]] = defaultdict(set)
    for a, b, rel in pairs:
        labels[frozenset((a, b))].add(rel)
    out: list[tuple[str, str, str]] = []
    seen: set[frozenset[str]] = set()
    for a, b, rel in pairs:
        key = frozenset((a, b))
        if len(labels[key]) > 1 or key in seen:
            continue
        seen.add(key)
        out.append((a, b, rel))
    return out


def filter_min_words(text: str, threshold: int = 10) -> bool:
    """Keep iff the whitespace-token count strictly exceeds the threshold."""
    return len(text.split()) > threshold


def enforce_image_availability(samples: Iterable[Sample]) -> list[Sample]:
    """Remove samples without at least one image reference."""
    return [s for s in samples if s.images]


def default_overlap_key(sample: Sample) -> str:
    """Digest of (task, normalized context, gold): exact-content identity."""
    payload = json.dumps(
        [sample.task.value, sample.context, sample.gold.strip().lower()],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def remove_train_test_overlap(
    train: Sequence[Sample],
    test: Sequence[Sample],
    key_fn: Callable[[Sample], str] = default_overlap_key,
) -> list[Sample]:
    """Drop train samples whose key collides with any test sample."""
    test_keys = {key_fn(s) for s in test}
    return [s for s in train if key_fn(s) not in test_keys]


def downsample(samples: Sequence[T], n: int, seed: int) -> list[T]:
    """Uniform selection without replacement, preserving input order."""
    if n < 0:
        raise CurationError(f"downsample size must be >= 0, got {n}")
    if len(samples) <= n:
        return list(samples)
    rng = random.Random(seed)
    keep = sorted(rng.sample(range(len(samples)), n))
    return [samples[i] for i in keep]


def _retag(samples: Iterable[Sample], split: Split) -> list[Sample]:
    return [
        Sample(s.id, s.task, s.context, s.images, s.gold, split, s.extra)
        for s in samples
    ]


def curate_task(
    task: TaskKind,
    ind_pool: Sequence[Sample],
    plan: SplitPlan,
    ood_pool: Sequence[Sample] = (),
) -> dict[Split, list[Sample]]:
    """Run one task pool through the full pipeline: image filter, ratio split,
    caps, and train/test leakage removal.
    """
    pool = enforce_image_availability(ind_pool)
    if not pool:
        raise CurationError(f"{task.value}: no samples survive the image filter")
    train, val, test = split_ratio(pool, plan)
    train = downsample(train, plan.train_cap, plan.seed)
    val = downsample(val, plan.val_cap, plan.seed + 1)
    test = downsample(test, plan.test_cap, plan.seed + 2)
    train = remove_train_test_overlap(train, test)
    out = {
        Split.TRAIN: _retag(train, Split.TRAIN),
        Split.VALIDATION: _retag(val, Split.VALIDATION),
        Split.IND_TEST: _retag(test, Split.IND_TEST),
    }
    if ood_pool:
        ood = enforce_image_availability(ood_pool)
        ood = downsample(ood, plan.ood_cap, plan.seed + 3)
        out[Split.OOD_TEST] = _retag(ood, Split.OOD_TEST)
    return out


def build_manifest(
    datasets: Mapping[TaskKind, Mapping[Split, Sequence[Sample]]],
    seed: int,
) -> DatasetManifest:
    entries = {}
    total = 0
    for task, splits in datasets.items():
        for split, samples in splits.items():
            entries[(task, split)] = ManifestEntry(
                count=len(samples), digest=content_digest(samples)
            )
            total += len(samples)
    return DatasetManifest(entries=entries, total=total, seed=seed)


def label_ratio(samples: Iterable[Sample]) -> dict[str, float]:
    """Fraction of each gold label; reported, not enforced."""
    counts = Counter(s.gold.strip().lower() for s in samples)
    total = sum(counts.values())
    return {label: count / total for label, count in counts.items()} if total else {}
