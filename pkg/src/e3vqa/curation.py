"""Human-verification stage: event-logged curation state plus the HTTP API.

State is a deterministic fold of an append-only JSONL log; every mutation is
one log entry. The HTTP layer is a thin adapter over CurationService and the
curation UI consumes exactly this API (documented in docs/curation-api.md).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .chat import ImageRef
from .dataset import BenchmarkItem, item_to_record, write_manifest
from .forge import CandidateQA, FramePair, Verdict


class CurationError(Exception):
    pass


class UnknownItem(CurationError):
    pass


class NotAssigned(CurationError):
    pass


class InvalidDecision(CurationError):
    def __init__(self, errors: dict[str, str]) -> None:
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(errors.items())))
        self.errors = errors


class Status(str, Enum):
    QUEUED = "Queued"
    IN_REVIEW = "InReview"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


class Action(str, Enum):
    ASSIGN = "Assign"
    ACCEPT = "Accept"
    REJECT = "Reject"
    REOPEN = "Reopen"


class OptionProvenance(str, Enum):
    FROM_EGO_ANSWER = "FromEgoAnswer"
    FROM_EXO_ANSWER = "FromExoAnswer"
    FROM_BOTH_ANSWER = "FromBothAnswer"
    FROM_TEXT_ANSWER = "FromTextAnswer"
    FROM_EGO_OPTION_SET = "FromEgoOptionSet"
    FROM_EXO_OPTION_SET = "FromExoOptionSet"
    ANNOTATOR_EDITED = "AnnotatorEdited"


@dataclass(frozen=True)
class Decision:
    final_question: str
    final_options: tuple[str, str, str, str]
    answer_index: int
    option_provenance: tuple[OptionProvenance, OptionProvenance, OptionProvenance, OptionProvenance]
    annotator: str
    decided_at: str

    def to_json(self) -> dict:
        return {
            "final_question": self.final_question,
            "final_options": list(self.final_options),
            "answer_index": self.answer_index,
            "option_provenance": [p.value for p in self.option_provenance],
            "annotator": self.annotator,
            "decided_at": self.decided_at,
        }

    @staticmethod
    def from_json(payload: dict) -> "Decision":
        errors = validate_decision_payload(payload)
        if errors:
            raise InvalidDecision(errors)
        return Decision(
            final_question=payload["final_question"].strip(),
            final_options=tuple(opt.strip() for opt in payload["final_options"]),
            answer_index=payload["answer_index"],
            option_provenance=tuple(
                OptionProvenance(p) for p in payload["option_provenance"]
            ),
            annotator=payload["annotator"],
            decided_at=payload["decided_at"],
        )


def validate_decision_payload(payload: dict) -> dict[str, str]:
    """Field-level messages; empty dict means the payload is a valid Decision."""
    errors: dict[str, str] = {}
    question = payload.get("final_question")
    if not isinstance(question, str) or not question.strip():
        errors["final_question"] = "must be a non-empty string"
    options = payload.get("final_options")
    if not isinstance(options, (list, tuple)) or len(options) != 4:
        errors["final_options"] = "must be a list of exactly 4 options"
    else:
        cleaned = [opt.strip() if isinstance(opt, str) else "" for opt in options]
        if any(not opt for opt in cleaned):
            errors["final_options"] = "options must be non-empty strings"
        elif len(set(cleaned)) != 4:
            errors["final_options"] = "options must be distinct"
    answer_index = payload.get("answer_index")
    if not isinstance(answer_index, int) or isinstance(answer_index, bool) or not (
        0 <= answer_index <= 3
    ):
        errors["answer_index"] = "must be an integer in 0..3"
    provenance = payload.get("option_provenance")
    if not isinstance(provenance, (list, tuple)) or len(provenance) != 4:
        errors["option_provenance"] = "must list a source for each of the 4 options"
    else:
        valid = {p.value for p in OptionProvenance}
        bad = [p for p in provenance if p not in valid]
        if bad:
            errors["option_provenance"] = f"unknown sources: {bad}"
    annotator = payload.get("annotator")
    if not isinstance(annotator, str) or not annotator.strip():
        errors["annotator"] = "must be a non-empty string"
    decided_at = payload.get("decided_at")
    if not isinstance(decided_at, str) or not decided_at.strip():
        errors["decided_at"] = "must be a timestamp string"
    return errors


@dataclass
class CurationItem:
    qa_id: str
    candidate: CandidateQA
    status: Status = Status.QUEUED
    assigned_to: Optional[str] = None
    decision: Optional[Decision] = None
    reject_reason: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "status": self.status.value,
            "assigned_to": self.assigned_to,
            "candidate": self.candidate.to_json(),
            "decision": self.decision.to_json() if self.decision else None,
            "reject_reason": self.reject_reason,
        }


@dataclass(frozen=True)
class CurationLogEntry:
    seq: int
    qa_id: str
    action: Action
    payload: dict
    actor: str
    at: str

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "qa_id": self.qa_id,
            "action": self.action.value,
            "payload": self.payload,
            "actor": self.actor,
            "at": self.at,
        }

    @staticmethod
    def from_json(record: dict) -> "CurationLogEntry":
        return CurationLogEntry(
            seq=record["seq"],
            qa_id=record["qa_id"],
            action=Action(record["action"]),
            payload=record["payload"],
            actor=record["actor"],
            at=record["at"],
        )


def _payload_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + "Z"


class Empty:
    """Sentinel for an exhausted queue."""

    def __bool__(self) -> bool:
        return False


EMPTY = Empty()


class CurationService:
    def __init__(
        self,
        candidates: Sequence[CandidateQA],
        pairs: Sequence[FramePair],
        log_path: Path,
    ) -> None:
        self.log_path = Path(log_path)
        self.pairs = {pair.pair_id: pair for pair in pairs}
        self._items: dict[str, CurationItem] = {}
        for qa in candidates:
            if qa.filter.verdict is not Verdict.KEPT:
                continue
            if qa.qa_id in self._items:
                raise CurationError(f"duplicate qa_id {qa.qa_id!r} in corpus")
            self._items[qa.qa_id] = CurationItem(qa_id=qa.qa_id, candidate=qa)
        self._lock = threading.Lock()
        self._seq = 0
        self._decision_hashes: dict[str, str] = {}
        if self.log_path.exists():
            self._replay()

    # -- log plumbing --------------------------------------------------------

    def _replay(self) -> None:
        with self.log_path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                entry = CurationLogEntry.from_json(json.loads(line))
                if entry.seq <= self._seq:
                    raise CurationError(
                        f"log corrupt at line {line_no}: seq {entry.seq} after {self._seq}"
                    )
                self._seq = entry.seq
                self._apply(entry)

    def _append(self, qa_id: str, action: Action, payload: dict, actor: str) -> CurationLogEntry:
        entry = CurationLogEntry(
            seq=self._seq + 1, qa_id=qa_id, action=action, payload=payload, actor=actor, at=_now()
        )
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
            handle.flush()
            os.fsync(handle.fileno())
        self._seq = entry.seq
        self._apply(entry)
        return entry

    def _apply(self, entry: CurationLogEntry) -> None:
        item = self._items.get(entry.qa_id)
        if item is None:
            raise CurationError(f"log entry {entry.seq} references unknown item {entry.qa_id!r}")
        if entry.action is Action.ASSIGN:
            item.status = Status.IN_REVIEW
            item.assigned_to = entry.payload["annotator"]
        elif entry.action is Action.ACCEPT:
            item.status = Status.ACCEPTED
            item.decision = Decision.from_json(entry.payload)
            item.reject_reason = None
            self._decision_hashes[entry.qa_id] = _payload_hash(entry.payload)
        elif entry.action is Action.REJECT:
            item.status = Status.REJECTED
            item.reject_reason = entry.payload["reason"]
            item.decision = None
            self._decision_hashes[entry.qa_id] = _payload_hash(entry.payload)
        elif entry.action is Action.REOPEN:
            item.status = Status.QUEUED
            item.assigned_to = None
            item.decision = None
            item.reject_reason = None
            self._decision_hashes.pop(entry.qa_id, None)

    # -- operations ----------------------------------------------------------

    def items(self) -> list[CurationItem]:
        return [self._items[qa_id] for qa_id in sorted(self._items)]

    def item(self, qa_id: str) -> CurationItem:
        if qa_id not in self._items:
            raise UnknownItem(qa_id)
        return self._items[qa_id]

    def next_item(self, annotator: str, category_filter: Optional[str] = None):
        if not annotator or not annotator.strip():
            raise CurationError("annotator identity required")
        with self._lock:
            for qa_id in sorted(self._items):
                item = self._items[qa_id]
                if item.status is not Status.QUEUED:
                    continue
                if category_filter and item.candidate.category.value != category_filter:
                    continue
                self._append(qa_id, Action.ASSIGN, {"annotator": annotator}, annotator)
                return item
        return EMPTY

    def submit_decision(self, qa_id: str, payload: dict) -> CurationItem:
        with self._lock:
            item = self.item(qa_id)
            payload_hash = _payload_hash(payload)
            if (
                item.status is Status.ACCEPTED
                and self._decision_hashes.get(qa_id) == payload_hash
            ):
                return item  # identical retry, no second log entry
            if item.status is not Status.IN_REVIEW:
                raise NotAssigned(f"item {qa_id!r} is {item.status.value}, not InReview")
            annotator = payload.get("annotator")
            if annotator != item.assigned_to:
                raise NotAssigned(
                    f"item {qa_id!r} is assigned to {item.assigned_to!r}, not {annotator!r}"
                )
            errors = validate_decision_payload(payload)
            if errors:
                raise InvalidDecision(errors)
            self._append(qa_id, Action.ACCEPT, payload, str(annotator))
            return item

    def reject(self, qa_id: str, reason: str, annotator: str) -> CurationItem:
        with self._lock:
            item = self.item(qa_id)
            payload = {"reason": reason, "annotator": annotator}
            payload_hash = _payload_hash(payload)
            if (
                item.status is Status.REJECTED
                and self._decision_hashes.get(qa_id) == payload_hash
            ):
                return item
            if item.status is not Status.IN_REVIEW:
                raise NotAssigned(f"item {qa_id!r} is {item.status.value}, not InReview")
            if annotator != item.assigned_to:
                raise NotAssigned(
                    f"item {qa_id!r} is assigned to {item.assigned_to!r}, not {annotator!r}"
                )
            if not reason or not reason.strip():
                raise InvalidDecision({"reason": "a reject reason is required"})
            self._append(qa_id, Action.REJECT, payload, annotator)
            return item

    def reopen(self, qa_id: str, actor: str) -> CurationItem:
        with self._lock:
            item = self.item(qa_id)
            if item.status not in (Status.ACCEPTED, Status.REJECTED):
                raise CurationError(f"item {qa_id!r} is {item.status.value}; nothing to reopen")
            self._append(qa_id, Action.REOPEN, {"actor": actor}, actor)
            return item

    def progress_stats(self) -> dict:
        counts = {status: 0 for status in Status}
        per_annotator: dict[str, dict[str, int]] = {}
        per_category: dict[str, dict[str, int]] = {}
        for item in self._items.values():
            counts[item.status] += 1
            category = item.candidate.category.value
            per_category.setdefault(
                category, {status.value: 0 for status in Status}
            )[item.status.value] += 1
            actor = item.assigned_to
            if actor:
                per_annotator.setdefault(
                    actor, {status.value: 0 for status in Status}
                )[item.status.value] += 1
        return {
            "total": len(self._items),
            "queued": counts[Status.QUEUED],
            "in_review": counts[Status.IN_REVIEW],
            "accepted": counts[Status.ACCEPTED],
            "rejected": counts[Status.REJECTED],
            "per_annotator": dict(sorted(per_annotator.items())),
            "per_category": dict(sorted(per_category.items())),
        }

    # -- export --------------------------------------------------------------

    def accepted_items(self) -> list[CurationItem]:
        return [item for item in self.items() if item.status is Status.ACCEPTED]

    def export_benchmark(self, image_root: Optional[Path] = None) -> tuple[list[dict], list[str]]:
        """Benchmark JSONL records for every Accepted item, plus lint warnings.

        With image_root, image paths are written relative to it; otherwise
        they stay absolute (loadable in place, not portable).
        """
        records: list[dict] = []
        for item in self.accepted_items():
            decision = item.decision
            assert decision is not None
            pair = self.pairs.get(item.candidate.pair_id)
            if pair is None:
                raise CurationError(
                    f"no frame pair {item.candidate.pair_id!r} for accepted item {item.qa_id!r}"
                )
            bench_item = BenchmarkItem(
                id=item.qa_id,
                category=item.candidate.category,
                question_perspective=item.candidate.source_view,
                ego_image=pair.ego_image,
                exo_image=pair.exo_image,
                question=decision.final_question,
                options=decision.final_options,
                answer_index=decision.answer_index,
                source_take=pair.take_id,
            )
            records.append(item_to_record(bench_item, image_root))
        return records, lint_answer_balance(records)

    def write_export(self, out_path: Path, image_root: Optional[Path] = None) -> tuple[int, list[str]]:
        out_path = Path(out_path)
        if image_root is None:
            image_root = out_path.parent
        records, warnings = self.export_benchmark(image_root)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        write_manifest(out_path, os.path.relpath(image_root, out_path.parent))
        return len(records), warnings


def lint_answer_balance(records: Sequence[dict]) -> list[str]:
    if not records:
        return []
    counts = [0, 0, 0, 0]
    for record in records:
        counts[record["answer_index"]] += 1
    spread = max(counts) - min(counts)
    threshold = math.ceil(len(records) / 4)
    if len(records) >= 2 and spread > threshold:
        letters = {letter: count for letter, count in zip("ABCD", counts)}
        return [f"answer letters unbalanced: {letters} (spread {spread} > {threshold})"]
    return []


# -- HTTP API ----------------------------------------------------------------

ANNOTATOR_HEADER = "X-Annotator"


def build_app(service: CurationService, ui_dist: Optional[Path] = None):
    from fastapi import FastAPI, Header, HTTPException
    from fastapi.responses import JSONResponse, PlainTextResponse, Response

    app = FastAPI(title="e3vqa curation", docs_url=None, redoc_url=None)

    image_tokens: dict[str, ImageRef] = {}

    def image_token(ref: ImageRef) -> str:
        token = hashlib.sha256(ref.value.encode("utf-8")).hexdigest()[:16]
        image_tokens[token] = ref
        return token

    def item_payload(item: CurationItem) -> dict:
        payload = item.to_json()
        pair = service.pairs.get(item.candidate.pair_id)
        if pair is not None:
            payload["images"] = {
                "ego": image_token(pair.ego_image),
                "exo": image_token(pair.exo_image),
            }
            payload["take_id"] = pair.take_id
        return payload

    def annotator_or_400(value: Optional[str]) -> str:
        if not value or not value.strip():
            raise HTTPException(status_code=400, detail=f"{ANNOTATOR_HEADER} header required")
        return value.strip()

    @app.get("/api/items/next")
    def api_next(
        category: Optional[str] = None,
        x_annotator: Optional[str] = Header(default=None, alias=ANNOTATOR_HEADER),
    ):
        annotator = annotator_or_400(x_annotator)
        item = service.next_item(annotator, category)
        if isinstance(item, Empty):
            return {"item": None}
        return {"item": item_payload(item)}

    @app.get("/api/items/{qa_id}")
    def api_item(qa_id: str):
        try:
            return {"item": item_payload(service.item(qa_id))}
        except UnknownItem:
            raise HTTPException(status_code=404, detail=f"unknown item {qa_id!r}")

    @app.post("/api/items/{qa_id}/decision")
    def api_decision(
        qa_id: str,
        payload: dict,
        x_annotator: Optional[str] = Header(default=None, alias=ANNOTATOR_HEADER),
    ):
        annotator = annotator_or_400(x_annotator)
        payload.setdefault("annotator", annotator)
        payload.setdefault("decided_at", _now())
        try:
            item = service.submit_decision(qa_id, payload)
        except UnknownItem:
            raise HTTPException(status_code=404, detail=f"unknown item {qa_id!r}")
        except InvalidDecision as exc:
            return JSONResponse(status_code=422, content={"errors": exc.errors})
        except NotAssigned as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"item": item_payload(item)}

    @app.post("/api/items/{qa_id}/reject")
    def api_reject(
        qa_id: str,
        payload: dict,
        x_annotator: Optional[str] = Header(default=None, alias=ANNOTATOR_HEADER),
    ):
        annotator = annotator_or_400(x_annotator)
        try:
            item = service.reject(qa_id, payload.get("reason", ""), annotator)
        except UnknownItem:
            raise HTTPException(status_code=404, detail=f"unknown item {qa_id!r}")
        except InvalidDecision as exc:
            return JSONResponse(status_code=422, content={"errors": exc.errors})
        except NotAssigned as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"item": item_payload(item)}

    @app.post("/api/items/{qa_id}/reopen")
    def api_reopen(
        qa_id: str,
        x_annotator: Optional[str] = Header(default=None, alias=ANNOTATOR_HEADER),
    ):
        annotator = annotator_or_400(x_annotator)
        try:
            item = service.reopen(qa_id, annotator)
        except UnknownItem:
            raise HTTPException(status_code=404, detail=f"unknown item {qa_id!r}")
        except CurationError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"item": item_payload(item)}

    @app.get("/api/progress")
    def api_progress():
        return service.progress_stats()

    @app.get("/api/export")
    def api_export():
        records, warnings = service.export_benchmark()
        body = "".join(json.dumps(record, sort_keys=True) + "\n" for record in records)
        return PlainTextResponse(
            body,
            media_type="application/x-ndjson",
            headers={"X-Lint-Warnings": json.dumps(warnings)},
        )

    @app.get("/api/images/{token}")
    def api_image(token: str):
        ref = image_tokens.get(token)
        if ref is None:
            raise HTTPException(status_code=404, detail="unknown image token")
        try:
            data = ref.load_bytes()
        except Exception:
            raise HTTPException(status_code=404, detail="image unreadable")
        return Response(content=data, media_type=ref.media_type)

    if ui_dist is not None and Path(ui_dist).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dist), html=True), name="ui")

    return app
