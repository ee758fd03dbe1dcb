"""Three-stage orchestration per sample: context-conditioned captioning,
caption-quality gating, and unified-text task inference.

Samples are processed concurrently; within a sample the stage order is
strict. Records come back in input order regardless of completion order.

Gate semantics: a caption is used only when the gate is positive. Ties and
all-abstain outcomes discard, as does a caption that failed to generate
(the voters are not consulted in that case). Multi-image tasks gate each
caption independently with its own rendered gate prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .datamodel import Sample, TaskKind
from .inference import ChatClient, Completion, DiskCache, EndpointConfig, TransportError, ProtocolError
from .prompting import Stage, TemplateId, TemplateStore

log = logging.getLogger(__name__)

YES = "yes"
NO = "no"
ABSTAIN = "abstain"
USE = "use"
DISCARD = "discard"


@dataclass(frozen=True)
class GateStrategy:
    """Caption gating policy: use-it-always, a single voter, or majority vote."""

    kind: str  # "uia" | "single" | "mv"
    voters: tuple[EndpointConfig, ...] = ()

    @classmethod
    def uia(cls) -> "GateStrategy":
        return cls("uia")

    @classmethod
    def single(cls, voter: EndpointConfig) -> "GateStrategy":
        return cls("single", (voter,))

    @classmethod
    def mv(cls, voters: Sequence[EndpointConfig]) -> "GateStrategy":
        voters = tuple(voters)
        if not voters:
            raise ValueError("majority voting needs at least one voter")
        if len(voters) % 2 == 0:
            warnings.warn(
                f"even voter count ({len(voters)}) can tie; ties discard the caption",
                stacklevel=2,
            )
        return cls("mv", voters)


@dataclass(frozen=True)
class Vote:
    voter: str
    raw: str
    parsed: str  # yes | no | abstain


@dataclass(frozen=True)
class Verdict:
    votes: tuple[Vote, ...]
    decision: str  # use | discard
    strategy: str


_VOTE_PREFIX = re.compile(r"^(yes|no)\b")


def parse_vote(raw: str) -> str:
    """Map a voter's raw output to yes/no/abstain.

    Case-insensitive; whitespace and terminal punctuation stripped; an exact
    token or a first-line prefix ("yes," / "no -") counts, anything else
    abstains.
    """
    stripped = raw.strip()
    if not stripped:
        return ABSTAIN
    first_line = stripped.splitlines()[0].strip().lower()
    first_line = first_line.rstrip(".,;:!?-— ")
    if first_line in (YES, NO):
        return first_line
    match = _VOTE_PREFIX.match(first_line)
    return match.group(1) if match else ABSTAIN


def majority_decision(parsed_votes: Iterable[str]) -> str:
    """Use iff yes-votes strictly exceed no-votes among non-abstaining voters."""
    yes = no = 0
    for vote in parsed_votes:
        if vote == YES:
            yes += 1
        elif vote == NO:
            no += 1
    return USE if yes > no else DISCARD


@dataclass(frozen=True)
class PipelineRecord:
    """Full per-sample trace; one exists for every input sample."""

    sample_id: str
    task: TaskKind
    captions: tuple[str | None, ...]
    caption_errors: tuple[str | None, ...]
    verdicts: tuple[Verdict, ...]
    fused_prompt: str
    fused_digest: str
    raw_output: str | None
    error: str | None
    timings_ms: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "task": self.task.value,
            "captions": list(self.captions),
            "caption_errors": list(self.caption_errors),
            "verdicts": [
                {
                    "votes": [
                        {"voter": v.voter, "raw": v.raw, "parsed": v.parsed}
                        for v in verdict.votes
                    ],
                    "decision": verdict.decision,
                    "strategy": verdict.strategy,
                }
                for verdict in self.verdicts
            ],
            "fused_prompt": self.fused_prompt,
            "fused_digest": self.fused_digest,
            "raw_output": self.raw_output,
            "error": self.error,
            "timings_ms": self.timings_ms,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "PipelineRecord":
        return cls(
            sample_id=data["sample_id"],
            task=TaskKind(data["task"]),
            captions=tuple(data["captions"]),
            caption_errors=tuple(data["caption_errors"]),
            verdicts=tuple(
                Verdict(
                    votes=tuple(
                        Vote(v["voter"], v["raw"], v["parsed"]) for v in verdict["votes"]
                    ),
                    decision=verdict["decision"],
                    strategy=verdict["strategy"],
                )
                for verdict in data["verdicts"]
            ),
            fused_prompt=data["fused_prompt"],
            fused_digest=data["fused_digest"],
            raw_output=data["raw_output"],
            error=data["error"],
            timings_ms=data.get("timings_ms", {}),
        )


def write_records(path: Path | str, records: Iterable[PipelineRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            data = record.to_json()
            data.pop("timings_ms", None)  # keep record files byte-reproducible
            fh.write(json.dumps(data, sort_keys=True) + "\n")


def read_records(path: Path | str) -> list[PipelineRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(PipelineRecord.from_json(json.loads(line)))
    return out


@dataclass(frozen=True)
class PipelineConfig:
    captioner: EndpointConfig
    task_model: EndpointConfig
    strategy: GateStrategy
    cache_dir: Path | None = None
    template_dir: Path | None = None
    concurrency: int = 8
    seed: int = 42

    def digest(self) -> str:
        payload = json.dumps(
            {
                "captioner": [self.captioner.base_url, self.captioner.model],
                "task_model": [self.task_model.base_url, self.task_model.model],
                "strategy": [self.strategy.kind]
                + [[v.base_url, v.model] for v in self.strategy.voters],
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def caption_count(sample: Sample) -> int:
    """Captions a sample needs: one per relation-pair product or history item,
    otherwise one."""
    if sample.task is TaskKind.PRP:
        return 2
    if sample.task is TaskKind.SR:
        return len(sample.history())
    return 1


class PipelineRunner:
    """Runs the capture-gate-fuse stages against configured endpoints."""

    def __init__(self, config: PipelineConfig, templates: TemplateStore | None = None):
        self.config = config
        self.templates = templates or TemplateStore.load(config.template_dir)
        cache = DiskCache(config.cache_dir) if config.cache_dir else None
        self._captioner = ChatClient(config.captioner, cache)
        self._task_client = ChatClient(config.task_model, cache)
        self._voters = [ChatClient(v, cache) for v in config.strategy.voters]

    def close(self) -> None:
        self._captioner.close()
        self._task_client.close()
        for client in self._voters:
            client.close()

    def __enter__(self) -> "PipelineRunner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- stages --------------------------------------------------------------

    def caption_stage(self, sample: Sample) -> tuple[list[str | None], list[str | None]]:
        """One caption per relevant image; failures are isolated per image."""
        template_id = TemplateId(sample.task, Stage.CAPTIONING)
        captions: list[str | None] = []
        errors: list[str | None] = []
        for index in range(caption_count(sample)):
            try:
                prompt = self.templates.render(template_id, sample, item_index=index)
                completion = self._captioner.cached_complete(prompt)
                if completion.text.strip():
                    captions.append(completion.text)
                    errors.append(None)
                else:
                    captions.append(None)
                    errors.append("empty caption")
            except (TransportError, ProtocolError) as exc:
                log.warning("caption failure for %s image %d: %s", sample.id, index, exc)
                captions.append(None)
                errors.append(str(exc))
        return captions, errors

    def gate_stage(self, sample: Sample, caption: str | None, item_index: int = 0) -> Verdict:
        """Gate one caption; a missing caption discards without calling voters."""
        strategy = self.config.strategy
        if caption is None:
            return Verdict(votes=(), decision=DISCARD, strategy=strategy.kind)
        if strategy.kind == "uia":
            return Verdict(votes=(), decision=USE, strategy="uia")
        template_id = TemplateId(sample.task, Stage.GATE)
        prompt = self.templates.render(template_id, sample, caption=caption, item_index=item_index)
        votes: list[Vote] = []
        for client in self._voters:
            try:
                completion = client.cached_complete(prompt)
                votes.append(
                    Vote(client.endpoint.model, completion.text, parse_vote(completion.text))
                )
            except (TransportError, ProtocolError) as exc:
                log.warning("voter %s failed for %s: %s", client.endpoint.model, sample.id, exc)
                votes.append(Vote(client.endpoint.model, "", ABSTAIN))
        if strategy.kind == "single":
            decision = USE if votes[0].parsed == YES else DISCARD
        else:
            decision = majority_decision(v.parsed for v in votes)
        return Verdict(votes=tuple(votes), decision=decision, strategy=strategy.kind)

    def fuse_and_predict(
        self,
        sample: Sample,
        captions: Sequence[str | None],
        verdicts: Sequence[Verdict],
    ) -> tuple[str, str | None, str | None]:
        """Render the fused task prompt with exactly the accepted captions and
        query the task model. Returns (fused prompt, raw output, error)."""
        accepted = [v.decision == USE for v in verdicts]
        prompt = self.templates.render_task(sample, captions, accepted)
        try:
            completion = self._task_client.cached_complete(prompt)
            return prompt.text, completion.text, None
        except (TransportError, ProtocolError) as exc:
            log.warning("task inference failed for %s: %s", sample.id, exc)
            return prompt.text, None, str(exc)

    def run_sample(self, sample: Sample) -> PipelineRecord:
        timings: dict[str, float] = {}
        t0 = time.monotonic()
        captions, caption_errors = self.caption_stage(sample)
        timings["caption"] = (time.monotonic() - t0) * 1000.0

        t0 = time.monotonic()
        verdicts = tuple(
            self.gate_stage(sample, caption, item_index=i)
            for i, caption in enumerate(captions)
        )
        timings["gate"] = (time.monotonic() - t0) * 1000.0

        t0 = time.monotonic()
        fused, raw_output, error = self.fuse_and_predict(sample, captions, verdicts)
        timings["predict"] = (time.monotonic() - t0) * 1000.0

        return PipelineRecord(
            sample_id=sample.id,
            task=sample.task,
            captions=tuple(captions),
            caption_errors=tuple(caption_errors),
            verdicts=verdicts,
            fused_prompt=fused,
            fused_digest=hashlib.sha256(fused.encode()).hexdigest(),
            raw_output=raw_output,
            error=error,
            timings_ms=timings,
        )

    def run(self, samples: Sequence[Sample]) -> tuple[list[PipelineRecord], dict[str, Any]]:
        """One record per sample, in input order, plus the run manifest."""
        with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
            records = list(pool.map(self.run_sample, samples))
        manifest = {
            "config_digest": self.config.digest(),
            "template_digests": self.templates.digests(),
            "strategy": self.config.strategy.kind,
            "seed": self.config.seed,
            "samples": len(samples),
            "failed": sum(1 for r in records if r.error is not None),
        }
        return records, manifest


def run_pipeline(
    samples: Sequence[Sample], config: PipelineConfig
) -> tuple[list[PipelineRecord], dict[str, Any]]:
    with PipelineRunner(config) as runner:
        return runner.run(samples)


def caption_usage_rate(records: Iterable[PipelineRecord]) -> dict[TaskKind, float | None]:
    """Fraction of gate verdicts that accepted the caption, per task.

    Multi-image tasks count each per-item verdict. Tasks with no verdicts
    report None rather than 0.
    """
    used: dict[TaskKind, int] = {}
    total: dict[TaskKind, int] = {}
    for record in records:
        for verdict in record.verdicts:
            total[record.task] = total.get(record.task, 0) + 1
            if verdict.decision == USE:
                used[record.task] = used.get(record.task, 0) + 1
    return {
        task: (used.get(task, 0) / count if count else None)
        for task, count in total.items()
    }
