from __future__ import annotations

import hashlib
import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from capfuse.datamodel import ImageRef, Sample, Split, TaskKind
from capfuse.prompting import TemplateStore

from mock_server import MockChatServer, extract_text


def _img(name: str) -> tuple[ImageRef, ...]:
    return (ImageRef(f"img/{name}.jpg", 500, 500),)


FIXTURE_SAMPLES: dict[TaskKind, Sample] = {
    TaskKind.AP: Sample(
        id="ap-1",
        task=TaskKind.AP,
        context={
            "question": "Does it fit M18 batteries?",
            "review": "Works with all M18 batteries I have tried.",
        },
        images=_img("ap"),
        gold="yes",
        split=Split.IND_TEST,
    ),
    TaskKind.CC: Sample(
        id="cc-1",
        task=TaskKind.CC,
        context={
            "title": "Cordless Drill Kit",
            "options": ["power drills", "hand tools", "saw blades"],
        },
        images=_img("cc"),
        gold="power drills",
        split=Split.IND_TEST,
    ),
    TaskKind.PRP: Sample(
        id="prp-1",
        task=TaskKind.PRP,
        context={"title_1": "Cordless Drill Kit", "title_2": "Drill Bit Set"},
        images=_img("prp_a") + _img("prp_b"),
        gold="also_buy",
        split=Split.IND_TEST,
    ),
    TaskKind.PSI: Sample(
        id="psi-1",
        task=TaskKind.PSI,
        context={"query": "metric hex key set", "title": "SAE hex key set"},
        images=_img("psi"),
        gold="yes",
        split=Split.IND_TEST,
    ),
    TaskKind.MPC: Sample(
        id="mpc-1",
        task=TaskKind.MPC,
        context={"query": "camping lantern", "title": "LED camping lantern with hook"},
        images=_img("mpc"),
        gold="exact",
        split=Split.IND_TEST,
    ),
    TaskKind.SA: Sample(
        id="sa-1",
        task=TaskKind.SA,
        context={
            "review": "The handle broke after two uses and the blade dulled quickly."
        },
        images=_img("sa"),
        gold="negative",
        split=Split.IND_TEST,
    ),
    TaskKind.SR: Sample(
        id="sr-1",
        task=TaskKind.SR,
        context={
            "history": [
                "Cordless Drill Kit, Power Tools, Dewalt",
                "Drill Bit Set, Accessories, Bosch",
            ],
            "options": ["impact driver", "tape measure", "work gloves"],
        },
        images=_img("sr_a") + _img("sr_b"),
        gold="impact driver",
        split=Split.IND_TEST,
    ),
}

#: Caption fixtures per task; multi-image tasks carry one caption per image.
FIXTURE_CAPTIONS: dict[TaskKind, list[str]] = {
    TaskKind.AP: ["A red cordless drill with a side handle."],
    TaskKind.CC: ["A red cordless drill with a side handle."],
    TaskKind.PRP: ["A red cordless drill with a side handle.", "A set of drill bits."],
    TaskKind.PSI: ["A hex key set in a plastic case."],
    TaskKind.MPC: ["An LED lantern with a hanging hook."],
    TaskKind.SA: ["A knife with a cracked handle."],
    TaskKind.SR: ["A red cordless drill with a side handle.", "A set of drill bits."],
}

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def templates() -> TemplateStore:
    return TemplateStore.load()


@pytest.fixture(scope="session")
def fixture_samples() -> dict[TaskKind, Sample]:
    return FIXTURE_SAMPLES


def make_sample(task: TaskKind, idx: int, split: Split = Split.IND_TEST) -> Sample:
    """Variant of the task fixture with a distinct id and context."""
    base = FIXTURE_SAMPLES[task]
    context = dict(base.context)
    for key, value in context.items():
        if isinstance(value, str):
            context[key] = f"{value} #{idx}"
        elif key == "history":
            context[key] = [f"{item} #{idx}" for item in value]
    return Sample(
        id=f"{task.value}-{idx}",
        task=task,
        context=context,
        images=base.images,
        gold=base.gold,
        split=split,
    )


def scripted_responder(body: dict) -> str:
    """Deterministic answers keyed by model name and prompt content.

    * ``captioner``: caption tagged with a digest of the prompt text.
    * ``voter-N``: yes/no by parity of (voter index + prompt digest).
    * ``taskmodel``: "yes" for yes/no prompts, else the first listed option.
    """
    model = body["model"]
    text = extract_text(body)
    digest = int(hashlib.sha256(text.encode()).hexdigest(), 16)
    if model.startswith("captioner"):
        return f"Caption {digest % 10**8:08d} for the product."
    if model.startswith("voter"):
        index = int(model.split("-")[1])
        return "yes" if (digest + index) % 2 == 0 else "no"
    if "yes or no" in text:
        return "yes"
    match = re.search(r"^Options: (.+)$", text, re.MULTILINE)
    if match:
        return match.group(1).split(", ")[0]
    return "yes"


@pytest.fixture
def mock_server():
    with MockChatServer(scripted_responder) as server:
        yield server
