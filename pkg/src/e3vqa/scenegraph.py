"""Tolerant extraction and canonical re-serialization of model-emitted scene graphs."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional


class UnserializableExtras(Exception):
    pass


class GraphOrigin(str, Enum):
    EGO_ONLY = "EgoOnly"
    EXO_ONLY = "ExoOnly"
    JOINT = "Joint"
    REFINED_VIEW = "RefinedView"
    CROSS_REFINED = "CrossRefined"


class GraphAgent(str, Enum):
    F1 = "F1"
    F2 = "F2"
    F3 = "F3"


class ExtractionStatus(str, Enum):
    PARSED = "Parsed"
    SALVAGED = "Salvaged"
    FAILED = "Failed"


@dataclass
class SceneGraph:
    raw_text: str
    objects: list[dict]  # {"name": str, "attributes": {attr: value-or-list}}
    relationships: list[dict]  # {"subject", "predicate", "object", "dangling", ...}
    extras: dict
    origin: GraphOrigin
    agent: GraphAgent
    iteration: int = 0


@dataclass
class ExtractionOutcome:
    status: ExtractionStatus
    graph: Optional[SceneGraph]
    diagnostics: list[str] = field(default_factory=list)


_FENCE_LINE_RE = re.compile(r"^\s*```[A-Za-z0-9_-]*\s*$", re.MULTILINE)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")

_OBJECT_KEYS = {"objects", "object"}
_RELATION_KEYS = {"relationships", "relationship", "relations", "relation"}


def _strip_fences(text: str) -> str:
    return _FENCE_LINE_RE.sub("", text)


def _balanced_span(text: str) -> Optional[str]:
    """First balanced top-level {...} span, tracking string literals and escapes."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _strip_line_comments(text: str) -> str:
    """Remove //-to-end-of-line comments occurring outside string literals."""
    out: list[str] = []
    in_string = False
    escaped = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch == "/" and i + 1 < len(text) and text[i + 1] == "/":
            while i < len(text) and text[i] != "\n":
                i += 1
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def _norm_name(name: str) -> str:
    return " ".join(str(name).casefold().split())


def _as_value_list(value: Any) -> list:
    return list(value) if isinstance(value, list) else [value]


def _merge_attribute(attrs: dict, key: str, value: Any) -> None:
    if key not in attrs:
        attrs[key] = value
        return
    if attrs[key] == value:
        return
    merged = _as_value_list(attrs[key])
    for item in _as_value_list(value):
        if item not in merged:
            merged.append(item)
    attrs[key] = merged


def _coerce_object(entry: Any, diagnostics: list[str]) -> Optional[tuple[str, dict]]:
    if isinstance(entry, str):
        return entry, {}
    if isinstance(entry, dict):
        lowered = {str(k).strip().lower(): k for k in entry}
        if "name" in lowered:
            name = str(entry[lowered["name"]])
            attrs: dict = {}
            for raw_key, value in entry.items():
                norm = str(raw_key).strip().lower()
                if norm == "name":
                    continue
                if norm in ("attributes", "attribute") and isinstance(value, dict):
                    for ak, av in value.items():
                        _merge_attribute(attrs, str(ak), av)
                else:
                    _merge_attribute(attrs, str(raw_key), value)
            return name, attrs
        if len(entry) == 1:
            ((key, value),) = entry.items()
            if isinstance(value, dict):
                return str(key), dict(value)
            return str(key), {"value": value}
    diagnostics.append(f"unrecognized object entry: {entry!r}"[:200])
    return None


def _coerce_relationship(entry: Any, diagnostics: list[str]) -> Optional[dict]:
    if isinstance(entry, (list, tuple)) and len(entry) == 3:
        subject, predicate, obj = entry
        return {"subject": str(subject), "predicate": str(predicate), "object": str(obj)}
    if isinstance(entry, dict):
        lowered = {str(k).strip().lower(): k for k in entry}
        subject_key = next((k for k in ("subject", "source", "from") if k in lowered), None)
        object_key = next((k for k in ("object", "target", "to") if k in lowered), None)
        predicate_key = next(
            (k for k in ("predicate", "relation", "relationship", "rel") if k in lowered), None
        )
        if subject_key and object_key and predicate_key:
            rel = {
                "subject": str(entry[lowered[subject_key]]),
                "predicate": str(entry[lowered[predicate_key]]),
                "object": str(entry[lowered[object_key]]),
            }
            for raw_key, value in entry.items():
                if str(raw_key).strip().lower() not in (subject_key, object_key, predicate_key):
                    rel[str(raw_key)] = value
            return rel
    diagnostics.append(f"unrecognized relationship entry: {entry!r}"[:200])
    return None


def _normalize_graph(
    data: dict, raw_text: str, origin: GraphOrigin, agent: GraphAgent, iteration: int,
    diagnostics: list[str],
) -> SceneGraph:
    object_lists: list = []
    relation_lists: list = []
    extras: dict = {}
    for key, value in data.items():
        norm = str(key).strip().lower()
        if norm in _OBJECT_KEYS:
            object_lists.extend(_as_value_list(value))
        elif norm in _RELATION_KEYS:
            relation_lists.extend(_as_value_list(value))
        else:
            extras[str(key)] = value

    objects: list[dict] = []
    index: dict[str, dict] = {}
    unrecognized_objects: list = []
    for entry in object_lists:
        coerced = _coerce_object(entry, diagnostics)
        if coerced is None:
            unrecognized_objects.append(entry)
            continue
        name, attrs = coerced
        key = _norm_name(name)
        if key in index:
            existing = index[key]["attributes"]
            for ak, av in attrs.items():
                _merge_attribute(existing, ak, av)
        else:
            record = {"name": name, "attributes": attrs}
            index[key] = record
            objects.append(record)

    relationships: list[dict] = []
    unrecognized_relationships: list = []
    known = set(index)
    for entry in relation_lists:
        rel = _coerce_relationship(entry, diagnostics)
        if rel is None:
            unrecognized_relationships.append(entry)
            continue
        dangling = _norm_name(rel["subject"]) not in known or _norm_name(rel["object"]) not in known
        rel["dangling"] = dangling
        if dangling:
            diagnostics.append(
                f"dangling relationship kept: {rel['subject']} -{rel['predicate']}- {rel['object']}"
            )
        relationships.append(rel)

    if unrecognized_objects:
        extras["unrecognized_objects"] = unrecognized_objects
    if unrecognized_relationships:
        extras["unrecognized_relationships"] = unrecognized_relationships
    return SceneGraph(
        raw_text=raw_text,
        objects=objects,
        relationships=relationships,
        extras=extras,
        origin=origin,
        agent=agent,
        iteration=iteration,
    )


def extract(
    model_text: str,
    origin: GraphOrigin = GraphOrigin.JOINT,
    agent: GraphAgent = GraphAgent.F1,
    iteration: int = 0,
) -> ExtractionOutcome:
    """Never raises; every input maps to Parsed, Salvaged or Failed."""
    diagnostics: list[str] = []
    try:
        candidate = _strip_fences(model_text)
        span = _balanced_span(candidate)
        if span is None:
            return ExtractionOutcome(
                ExtractionStatus.FAILED, None, ["no balanced JSON object found"]
            )
        status = ExtractionStatus.PARSED
        try:
            data = json.loads(span)
        except json.JSONDecodeError as first_error:
            salvaged = _TRAILING_COMMA_RE.sub(r"\1", _strip_line_comments(span))
            try:
                data = json.loads(salvaged)
            except json.JSONDecodeError:
                return ExtractionOutcome(
                    ExtractionStatus.FAILED,
                    None,
                    [f"JSON parse failed: {first_error}", "salvage pass failed"],
                )
            status = ExtractionStatus.SALVAGED
            diagnostics.append(f"salvaged after parse error: {first_error}")
        if not isinstance(data, dict):
            return ExtractionOutcome(
                ExtractionStatus.FAILED, None, ["top-level JSON value is not an object"]
            )
        graph = _normalize_graph(data, model_text, origin, agent, iteration, diagnostics)
        return ExtractionOutcome(status, graph, diagnostics)
    except Exception as exc:  # totality guard; should be unreachable
        return ExtractionOutcome(
            ExtractionStatus.FAILED, None, [f"unexpected extraction error: {exc!r}"]
        )


def serialize_for_prompt(graph: SceneGraph) -> str:
    """Canonical compact JSON: objects, relationships, then extras keys alphabetically.

    Object order is first-seen; the dangling marker is toolkit metadata and is
    not emitted. extract(serialize_for_prompt(g)) reproduces an equivalent graph.
    """
    doc: dict[str, Any] = {
        "objects": [
            {"name": obj["name"], "attributes": obj["attributes"]} for obj in graph.objects
        ],
        "relationships": [
            {k: v for k, v in rel.items() if k != "dangling"} for rel in graph.relationships
        ],
    }
    for key in sorted(graph.extras):
        doc[key] = graph.extras[key]
    try:
        return json.dumps(doc, ensure_ascii=False, separators=(",", ":"))
    except (TypeError, ValueError) as exc:
        raise UnserializableExtras(str(exc)) from exc


def _triple(rel: dict) -> tuple[str, str, str]:
    return (_norm_name(rel["subject"]), _norm_name(rel["predicate"]), _norm_name(rel["object"]))


def graph_delta(before: SceneGraph, after: SceneGraph) -> dict:
    """Audit diff between two parsed graphs; used in traces, never in control flow."""
    before_objects = {_norm_name(o["name"]): o for o in before.objects}
    after_objects = {_norm_name(o["name"]): o for o in after.objects}
    added = [after_objects[k]["name"] for k in after_objects if k not in before_objects]
    removed = [before_objects[k]["name"] for k in before_objects if k not in after_objects]
    changed: dict[str, list[str]] = {}
    for key in before_objects.keys() & after_objects.keys():
        b_attrs = before_objects[key]["attributes"]
        a_attrs = after_objects[key]["attributes"]
        diff = sorted(
            k for k in (b_attrs.keys() | a_attrs.keys()) if b_attrs.get(k) != a_attrs.get(k)
        )
        if diff:
            changed[after_objects[key]["name"]] = diff
    before_triples = {_triple(r) for r in before.relationships}
    after_triples = {_triple(r) for r in after.relationships}
    return {
        "added_objects": added,
        "removed_objects": removed,
        "changed_attributes": changed,
        "added_relationships": sorted(after_triples - before_triples),
        "removed_relationships": sorted(before_triples - after_triples),
    }
