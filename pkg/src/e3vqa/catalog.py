"""Prompt template catalog: data-file backed, placeholder rendering, golden checks."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

from .chat import ContentPart, ImageRef, image_part, text_part
from .core import Category, View


class CatalogError(Exception):
    pass


class UnknownKey(CatalogError):
    pass


class MissingBinding(CatalogError):
    pass


class ExtraBinding(CatalogError):
    pass


class TypeMismatch(CatalogError):
    pass


class GoldenMissing(CatalogError):
    pass


class TemplateMethod(str, Enum):
    DEFAULT = "Default"
    DDCOT = "DDCoT"
    COCOT = "CoCoT"
    CCOT = "CCoT"
    M3COT = "M3CoT"
    FORGE_STEP1 = "ForgeStep1"
    FORGE_STEP2 = "ForgeStep2"
    FORGE_STEP3 = "ForgeStep3"
    OPTION_GEN = "OptionGen"


class Agent(str, Enum):
    EGO_EXO = "EgoExo"
    EGO2EXO = "Ego2Exo"
    EXO2EGO = "Exo2Ego"
    NA = "NA"


@dataclass(frozen=True)
class TemplateKey:
    method: TemplateMethod
    phase: str
    view: View = View.NA
    category: Category = Category.NA
    agent: Agent = Agent.NA

    def label(self) -> str:
        return "/".join(
            (self.method.value, self.phase, self.view.value, self.category.value, self.agent.value)
        )


IMAGE_PLACEHOLDERS = frozenset({"EgoImage", "ExoImage"})
KNOWN_PLACEHOLDERS = IMAGE_PLACEHOLDERS | {
    "Question",
    "QuestionPrompt",
    "CategoryPrompt",
    "AssistantResponse",
    "AnswerInit",
    "AnswerBoth",
    "AnswerText",
    "AnswerEgo",
    "AnswerExo",
    "SceneGraphA",
    "SceneGraphB",
}

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z]+)\}")


@dataclass(frozen=True)
class Template:
    key: TemplateKey
    body: str
    placeholders: frozenset[str]
    file_name: str


@dataclass(frozen=True)
class GoldenMismatch:
    key: TemplateKey
    file_name: str
    first_diff_offset: int


@dataclass(frozen=True)
class GoldenReport:
    checked: int
    mismatches: tuple[GoldenMismatch, ...]

    @property
    def ok(self) -> bool:
        return not self.mismatches


Binding = Union[str, ImageRef]


def _first_diff(a: bytes, b: bytes) -> int:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return min(len(a), len(b))


class PromptCatalog:
    """Immutable after load; safe for unrestricted concurrent reads."""

    def __init__(self, templates: Mapping[TemplateKey, Template], golden_dir: Optional[Path]) -> None:
        self._templates = dict(templates)
        self._golden_dir = golden_dir

    @classmethod
    def load(cls, template_dir: Path, golden_dir: Optional[Path] = None) -> "PromptCatalog":
        manifest_path = template_dir / "manifest.json"
        rows = json.loads(manifest_path.read_text(encoding="utf-8"))
        templates: dict[TemplateKey, Template] = {}
        for row in rows:
            key = TemplateKey(
                method=TemplateMethod(row["method"]),
                phase=row["phase"],
                view=View(row["view"]),
                category=Category(row["category"]),
                agent=Agent(row["agent"]),
            )
            if key in templates:
                raise CatalogError(f"duplicate manifest entry for {key.label()}")
            body = (template_dir / row["file"]).read_text(encoding="utf-8")
            names = frozenset(_PLACEHOLDER_RE.findall(body))
            unknown = names - KNOWN_PLACEHOLDERS
            if unknown:
                raise CatalogError(f"{row['file']}: unknown placeholders {sorted(unknown)}")
            templates[key] = Template(key=key, body=body, placeholders=names, file_name=row["file"])
        return cls(templates, golden_dir)

    @classmethod
    def load_default(cls) -> "PromptCatalog":
        pkg_root = Path(str(resources.files("e3vqa")))
        return cls.load(pkg_root / "templates", pkg_root / "templates_golden")

    def __len__(self) -> int:
        return len(self._templates)

    def keys(self) -> list[TemplateKey]:
        return list(self._templates)

    def lookup(self, key: TemplateKey) -> Template:
        try:
            return self._templates[key]
        except KeyError:
            raise UnknownKey(f"no template registered for {key.label()}") from None

    def render(self, key: TemplateKey, bindings: Mapping[str, Binding]) -> list[ContentPart]:
        """Substitute bindings into the template and split around image placeholders.

        Binding coverage must be exact. Text runs keep their interior whitespace
        verbatim; only the outer edges of each run (the layout newlines around
        image markers and file edges) are trimmed, and runs that trim to nothing
        are dropped.
        """
        template = self.lookup(key)
        bound = set(bindings)
        missing = template.placeholders - bound
        if missing:
            raise MissingBinding(f"{key.label()}: missing bindings {sorted(missing)}")
        extra = bound - template.placeholders
        if extra:
            raise ExtraBinding(f"{key.label()}: unexpected bindings {sorted(extra)}")
        for name, value in bindings.items():
            if name in IMAGE_PLACEHOLDERS:
                if not isinstance(value, ImageRef):
                    raise TypeMismatch(f"{key.label()}: {name} must bind an ImageRef")
            elif not isinstance(value, str):
                raise TypeMismatch(f"{key.label()}: {name} must bind a string")

        parts: list[ContentPart] = []
        buffer: list[str] = []

        def flush() -> None:
            run = "".join(buffer).strip()
            buffer.clear()
            if run:
                parts.append(text_part(run))

        pos = 0
        for match in _PLACEHOLDER_RE.finditer(template.body):
            buffer.append(template.body[pos : match.start()])
            pos = match.end()
            name = match.group(1)
            if name in IMAGE_PLACEHOLDERS:
                flush()
                parts.append(image_part(bindings[name]))  # type: ignore[arg-type]
            else:
                buffer.append(bindings[name])  # type: ignore[arg-type]
        buffer.append(template.body[pos:])
        flush()
        return parts

    def render_text(self, key: TemplateKey, bindings: Mapping[str, Binding] = {}) -> str:
        """Render a template with no image placeholders down to a single string."""
        parts = self.render(key, bindings)
        if any(p.kind != "Text" for p in parts):
            raise TypeMismatch(f"{key.label()}: template is not text-only")
        return "\n".join(p.text or "" for p in parts)

    def golden_check(self) -> GoldenReport:
        if self._golden_dir is None:
            raise GoldenMissing("catalog was loaded without a golden directory")
        mismatches: list[GoldenMismatch] = []
        for key, template in sorted(self._templates.items(), key=lambda kv: kv[0].label()):
            golden_path = self._golden_dir / template.file_name
            if not golden_path.exists():
                raise GoldenMissing(f"no golden file for {key.label()} ({template.file_name})")
            golden = golden_path.read_bytes()
            body = template.body.encode("utf-8")
            if body != golden:
                mismatches.append(
                    GoldenMismatch(
                        key=key,
                        file_name=template.file_name,
                        first_diff_offset=_first_diff(body, golden),
                    )
                )
        return GoldenReport(checked=len(self._templates), mismatches=tuple(mismatches))


def question_prompt(question: str, options: list[str]) -> str:
    """Assemble the {QuestionPrompt} bundle: question, lettered options, fixed suffix."""
    if len(options) != 4:
        raise ValueError(f"expected 4 options, got {len(options)}")
    lines = [question]
    for i, option in enumerate(options):
        lines.append(f"{chr(ord('A') + i)}) {option}")
    lines.append("Only one option is correct.")
    lines.append("Present the answer in the form X).")
    return "\n".join(lines)


def lettered_options(question: str, options: list[str]) -> str:
    """The {Question} binding for the Default method: question plus option lines."""
    if len(options) != 4:
        raise ValueError(f"expected 4 options, got {len(options)}")
    lines = [question]
    for i, option in enumerate(options):
        lines.append(f"{chr(ord('A') + i)}) {option}")
    return "\n".join(lines)


def system_text(catalog: PromptCatalog) -> str:
    return catalog.render_text(TemplateKey(TemplateMethod.DEFAULT, "system"))
