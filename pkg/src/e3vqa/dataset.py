"""Benchmark dataset loading: JSON-lines items plus a sidecar image-root manifest."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .chat import ImageRef, ImageSource
from .core import Category, View

SCHEMA_VERSION = 1

_REQUIRED_VIEW_VALUES = ("Any", "Ego", "Exo", "Both")


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    def __init__(self, line: int, field: str, message: str) -> None:
        super().__init__(f"line {line}, field '{field}': {message}")
        self.line = line
        self.field = field


class DuplicateId(DatasetError):
    pass


class MissingImage(DatasetError):
    def __init__(self, paths: list[str]) -> None:
        super().__init__(f"{len(paths)} missing image file(s): " + ", ".join(paths[:10]))
        self.paths = paths


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    category: Category
    question_perspective: View  # Ego or Exo
    ego_image: ImageRef
    exo_image: ImageRef
    question: str
    options: tuple[str, str, str, str]
    answer_index: int
    required_views: Optional[str] = None
    source_take: Optional[str] = None

    @property
    def answer_letter(self) -> str:
        return chr(ord("A") + self.answer_index)


def _manifest_path(dataset_path: Path) -> Path:
    return dataset_path.with_name(dataset_path.stem + ".manifest.json")


def read_manifest(dataset_path: Path) -> dict:
    path = _manifest_path(dataset_path)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"schema_version": SCHEMA_VERSION, "image_root": "."}


def write_manifest(dataset_path: Path, image_root: str) -> Path:
    path = _manifest_path(dataset_path)
    path.write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "image_root": image_root}, indent=2) + "\n",
        encoding="utf-8",
    )
    return path


def _require(record: dict, field: str, line: int):
    if field not in record:
        raise SchemaError(line, field, "missing")
    return record[field]


def _parse_item(record: dict, line: int, image_root: Path) -> BenchmarkItem:
    item_id = _require(record, "id", line)
    if not isinstance(item_id, str) or not item_id:
        raise SchemaError(line, "id", "must be a non-empty string")
    try:
        category = Category(_require(record, "category", line))
    except ValueError:
        raise SchemaError(line, "category", f"unknown value {record.get('category')!r}") from None
    if category is Category.NA:
        raise SchemaError(line, "category", "must be a concrete category")
    try:
        perspective = View(_require(record, "question_perspective", line))
    except ValueError:
        raise SchemaError(
            line, "question_perspective", f"unknown value {record.get('question_perspective')!r}"
        ) from None
    if perspective not in (View.EGO, View.EXO):
        raise SchemaError(line, "question_perspective", "must be Ego or Exo")
    question = _require(record, "question", line)
    if not isinstance(question, str) or not question.strip():
        raise SchemaError(line, "question", "must be a non-empty string")
    options = _require(record, "options", line)
    if not isinstance(options, list) or len(options) != 4:
        raise SchemaError(line, "options", "must be a list of exactly 4 strings")
    if any(not isinstance(o, str) or not o.strip() for o in options):
        raise SchemaError(line, "options", "options must be non-blank strings")
    if len({o.strip() for o in options}) != 4:
        raise SchemaError(line, "options", "options must be distinct after trimming")
    answer_index = _require(record, "answer_index", line)
    if not isinstance(answer_index, int) or not 0 <= answer_index <= 3:
        raise SchemaError(line, "answer_index", "must be an integer in 0..3")
    required_views = record.get("required_views")
    if required_views is not None and required_views not in _REQUIRED_VIEW_VALUES:
        raise SchemaError(
            line, "required_views", f"must be one of {_REQUIRED_VIEW_VALUES}"
        )
    images = {}
    for field in ("ego_image", "exo_image"):
        rel = _require(record, field, line)
        if not isinstance(rel, str) or not rel:
            raise SchemaError(line, field, "must be a non-empty relative path")
        images[field] = ImageRef(
            source=ImageSource.LOCAL_PATH,
            value=str((image_root / rel).resolve()),
            media_type="image/png" if rel.lower().endswith(".png") else "image/jpeg",
        )
    return BenchmarkItem(
        id=item_id,
        category=category,
        question_perspective=perspective,
        ego_image=images["ego_image"],
        exo_image=images["exo_image"],
        question=question,
        options=tuple(options),
        answer_index=answer_index,
        required_views=required_views,
        source_take=record.get("source_take"),
    )


def load_dataset(path: Path | str) -> list[BenchmarkItem]:
    """Load and validate a JSON-lines benchmark file.

    Image paths resolve against the sidecar manifest's image_root (relative to
    the dataset directory). Missing image files are collected and reported in
    one MissingImage error after the whole file has been validated.
    """
    path = Path(path)
    manifest = read_manifest(path)
    image_root = (path.parent / manifest.get("image_root", ".")).resolve()
    items: list[BenchmarkItem] = []
    seen: set[str] = set()
    missing: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "<line>", f"invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise SchemaError(line_no, "<line>", "each line must be a JSON object")
            item = _parse_item(record, line_no, image_root)
            if item.id in seen:
                raise DuplicateId(f"line {line_no}: duplicate item id {item.id!r}")
            seen.add(item.id)
            for ref in (item.ego_image, item.exo_image):
                if not Path(ref.value).is_file():
                    missing.append(ref.value)
            items.append(item)
    if missing:
        raise MissingImage(sorted(set(missing)))
    return items


def lint_dataset(items: list[BenchmarkItem]) -> list[str]:
    """Perspective-balance warnings: each category should split Ego/Exo evenly."""
    warnings: list[str] = []
    by_category: dict[Category, dict[View, int]] = {}
    for item in items:
        cell = by_category.setdefault(item.category, {View.EGO: 0, View.EXO: 0})
        cell[item.question_perspective] += 1
    for category, counts in sorted(by_category.items(), key=lambda kv: kv[0].value):
        if counts[View.EGO] != counts[View.EXO]:
            warnings.append(
                f"category {category.value}: {counts[View.EGO]} Ego vs "
                f"{counts[View.EXO]} Exo items (expected an even split)"
            )
    return warnings


def item_to_record(item: BenchmarkItem, image_root: Optional[Path] = None) -> dict:
    """Inverse of _parse_item for export paths; images re-relativized to the root."""
    def rel(ref: ImageRef) -> str:
        if image_root is None:
            return ref.value
        return os.path.relpath(ref.value, image_root)

    record = {
        "id": item.id,
        "category": item.category.value,
        "question_perspective": item.question_perspective.value,
        "ego_image": rel(item.ego_image),
        "exo_image": rel(item.exo_image),
        "question": item.question,
        "options": list(item.options),
        "answer_index": item.answer_index,
    }
    if item.required_views is not None:
        record["required_views"] = item.required_views
    if item.source_take is not None:
        record["source_take"] = item.source_take
    return record
