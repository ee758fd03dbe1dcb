"""Template loading and rendering for the three pipeline stages.

Templates live as one text file per (task, stage) named ``<task>_<stage>.txt``
with ``{{name}}`` placeholders and no escaping. They are data, not code, so
audits can diff the files directly.

Fused task prompts are assembled as:

    <task instruction>
    <blank line>
    <context fields, one labeled line each>
    <caption lines for accepted captions>
    <Options line, for tasks answered from options>

The caption line format is
``Extra information extracted from the product image: <caption>``.
For sequential recommendation the caption line follows its history item line,
so each caption stays attached to the product (title first) it describes.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

from .datamodel import (
    ImageRef,
    LabelKind,
    Sample,
    TaskKind,
    label_space_for,
)


class Stage(str, Enum):
    CAPTIONING = "captioning"
    GATE = "gate"
    TASK = "task"


@dataclass(frozen=True)
class TemplateId:
    task: TaskKind
    stage: Stage

    @property
    def name(self) -> str:
        return f"{self.task.value}_{self.stage.value}"


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    placeholders_filled: tuple[str, ...]
    attached_images: tuple[ImageRef, ...] = ()


class PromptError(Exception):
    """Rendering failure: missing field, bad stage/caption combination."""


_PLACEHOLDER = re.compile(r"\{\{([^{}]+)\}\}")

#: Multi-image tasks: one rendered captioning/gate prompt per image.
MULTI_IMAGE_TASKS = frozenset({TaskKind.PRP, TaskKind.SR})

CAPTION_LINE = "Extra information extracted from the product image: {caption}"

_CONTEXT_LABELS: dict[TaskKind, list[tuple[str, str]]] = {
    TaskKind.AP: [("Question", "question"), ("Document", "review")],
    TaskKind.CC: [("Product title", "title")],
    TaskKind.PRP: [("Product 1", "title_1"), ("Product 2", "title_2")],
    TaskKind.PSI: [("Query", "query"), ("Product title", "title")],
    TaskKind.MPC: [("Query", "query"), ("Product title", "title")],
    TaskKind.SA: [("Review", "review")],
    TaskKind.SR: [],  # history rendered as a numbered list
}


class TemplateStore:
    """Immutable store of the 21 stage templates, loaded once at startup."""

    def __init__(self, templates: dict[str, str]):
        missing = [
            TemplateId(task, stage).name
            for task in TaskKind
            for stage in Stage
            if TemplateId(task, stage).name not in templates
        ]
        if missing:
            raise PromptError(f"missing templates: {', '.join(missing)}")
        self._templates = dict(templates)

    @classmethod
    def load(cls, directory: Path | str | None = None) -> "TemplateStore":
        """Load from a template directory; defaults to the packaged set."""
        templates: dict[str, str] = {}
        if directory is None:
            root = resources.files("capfuse") / "templates"
            for entry in root.iterdir():
                if entry.name.endswith(".txt"):
                    templates[entry.name[:-4]] = entry.read_text(encoding="utf-8")
        else:
            for path in Path(directory).glob("*.txt"):
                templates[path.stem] = path.read_text(encoding="utf-8")
        return cls(templates)

    def text(self, template_id: TemplateId) -> str:
        return self._templates[template_id.name]

    def digests(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(text.encode()).hexdigest()
            for name, text in sorted(self._templates.items())
        }

    def placeholders(self, template_id: TemplateId) -> list[str]:
        return _PLACEHOLDER.findall(self.text(template_id))

    # -- stage rendering ----------------------------------------------------

    def render(
        self,
        template_id: TemplateId,
        sample: Sample,
        caption: str | None = None,
        item_index: int = 0,
    ) -> RenderedPrompt:
        """Render one stage prompt for a sample.

        ``item_index`` selects the product for per-image stages of multi-image
        tasks (relation-pair products, purchase-history items).
        """
        if sample.task is not template_id.task:
            raise PromptError(
                f"template {template_id.name}: sample task is {sample.task.value}"
            )
        stage = template_id.stage
        if stage is Stage.CAPTIONING and caption is not None:
            raise PromptError(
                f"template {template_id.name}: caption supplied to captioning stage"
            )
        if stage is Stage.GATE and caption is None:
            raise PromptError(f"template {template_id.name}: gate stage needs a caption")
        if stage is Stage.TASK:
            captions = [caption]
            accepted = [caption is not None]
            return self.render_task(sample, captions, accepted)

        values = self._stage_values(template_id, sample, item_index)
        if caption is not None:
            values["caption"] = caption
        text, filled = _fill(self.text(template_id), values, template_id.name)
        images: tuple[ImageRef, ...] = ()
        if stage is Stage.CAPTIONING:
            if item_index >= len(sample.images):
                raise PromptError(
                    f"template {template_id.name}: sample has no image {item_index}"
                )
            images = (sample.images[item_index],)
        return RenderedPrompt(text=text, placeholders_filled=filled, attached_images=images)

    def render_task(
        self,
        sample: Sample,
        captions: Sequence[str | None] = (),
        accepted: Sequence[bool] = (),
    ) -> RenderedPrompt:
        """Assemble the fused task prompt with exactly the accepted captions."""
        template_id = TemplateId(sample.task, Stage.TASK)
        instruction = self.text(template_id)
        lines: list[str] = []
        filled: list[str] = []

        def caption_line(i: int) -> str | None:
            if i < len(accepted) and accepted[i] and captions[i]:
                return CAPTION_LINE.format(caption=captions[i])
            return None

        if sample.task is TaskKind.SR:
            history = sample.history()
            if not history:
                raise PromptError(f"template {template_id.name}: missing field: history")
            lines.append("Purchase history:")
            for i, item in enumerate(history):
                lines.append(f"{i + 1}. {item}")
                line = caption_line(i)
                if line is not None:
                    lines.append(line)
            filled.append("history")
        else:
            for label, name in _CONTEXT_LABELS[sample.task]:
                value = sample.context.get(name)
                if value is None or value == "":
                    raise PromptError(f"template {template_id.name}: missing field: {name}")
                lines.append(f"{label}: {value}")
                filled.append(name)
            for i in range(len(captions)):
                line = caption_line(i)
                if line is not None:
                    lines.append(line)

        space = label_space_for(sample.task)
        if space.kind is LabelKind.OPTIONS:
            options = sample.options()
            if not options:
                raise PromptError(f"template {template_id.name}: missing field: options")
            lines.append(f"Options: {', '.join(options)}")
            filled.append("options")
        elif space.kind is LabelKind.FIXED:
            lines.append(f"Options: {', '.join(space.classes)}")

        text = instruction + "\n\n" + "\n".join(lines)
        return RenderedPrompt(text=text, placeholders_filled=tuple(filled))

    def render_task_without_caption(
        self, template_id: TemplateId, sample: Sample
    ) -> RenderedPrompt:
        if template_id.stage is not Stage.TASK:
            raise PromptError(f"template {template_id.name}: not a task template")
        if sample.task is not template_id.task:
            raise PromptError(
                f"template {template_id.name}: sample task is {sample.task.value}"
            )
        return self.render_task(sample)

    def _stage_values(
        self, template_id: TemplateId, sample: Sample, item_index: int
    ) -> dict[str, str]:
        task = template_id.task
        ctx = sample.context
        if task is TaskKind.SR:
            history = sample.history()
            if item_index >= len(history):
                raise PromptError(
                    f"template {template_id.name}: sample has no history item {item_index}"
                )
            # The captioning slot is the product title; the gate slot is the
            # full per-item summary (title, category, brand).
            return {"title": history[item_index], "item": history[item_index]}
        if task is TaskKind.PRP:
            titles = [ctx.get("title_1"), ctx.get("title_2")]
            for name, value in zip(("title_1", "title_2"), titles):
                if not value:
                    raise PromptError(f"template {template_id.name}: missing field: {name}")
            if item_index not in (0, 1):
                raise PromptError(
                    f"template {template_id.name}: product index {item_index} out of range"
                )
            # Per-image rendering: the indexed product plays the role of the
            # product in the image; the other one is the counterpart.
            return {"title_1": titles[item_index], "title_2": titles[1 - item_index]}
        values: dict[str, str] = {}
        for name in self.placeholders(template_id):
            if name == "caption":
                continue
            if name == "options":
                options = sample.options()
                if not options:
                    raise PromptError(f"template {template_id.name}: missing field: options")
                values[name] = ", ".join(options)
                continue
            value = ctx.get(name)
            if value is None or value == "":
                raise PromptError(f"template {template_id.name}: missing field: {name}")
            values[name] = str(value)
        return values


def _fill(template: str, values: dict[str, str], name: str) -> tuple[str, tuple[str, ...]]:
    filled: list[str] = []

    def sub(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in values:
            raise PromptError(f"template {name}: missing field: {key}")
        filled.append(key)
        return values[key]

    text = _PLACEHOLDER.sub(sub, template)
    if _PLACEHOLDER.search(text):
        raise PromptError(f"template {name}: unfilled placeholder remains")
    return text, tuple(filled)
