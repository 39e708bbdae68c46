"""Three-step QA construction over ego-exo frame pairs, plus options and stats.

Step 1 generates single-view QA candidates per category, Step 2 expands each
question under four input conditions, Step 3 filters with an equivalence judge.
Forge requests carry no system prompt; the shared system text describes the
two-image evaluation setting and does not fit single-view or text-only calls.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .backend import BackendError, ChatGateway
from .catalog import PromptCatalog, TemplateKey, TemplateMethod
from .chat import ChatRequest, ChatResponse, ImageRef, ImageSource, Turn, fingerprint, user_turn
from .core import CATEGORY_ORDER, Category, View
from .dataset import read_manifest


class ForgeError(Exception):
    pass


class PendingVerdicts(ForgeError):
    def __init__(self, count: int) -> None:
        super().__init__(f"{count} candidates still have Pending verdicts")
        self.count = count


class Verdict(str, Enum):
    PENDING = "Pending"
    KEPT = "Kept"
    DISCARDED_TEXT_MATCH = "DiscardedTextMatch"
    DISCARDED_BOTH_MATCH = "DiscardedBothMatch"


@dataclass(frozen=True)
class FramePair:
    pair_id: str
    take_id: str
    scenario: str
    ego_image: ImageRef
    exo_image: ImageRef
    frame_index: int

    def __post_init__(self) -> None:
        if not (0 <= self.frame_index <= 7):
            raise ValueError(f"frame_index {self.frame_index} outside 0..7")


@dataclass
class FilterState:
    text_matches_init: Optional[bool] = None
    both_in_init: Optional[bool] = None
    verdict: Verdict = Verdict.PENDING


@dataclass
class CandidateQA:
    qa_id: str
    pair_id: str
    category: Category
    source_view: View  # Ego or Exo; decides the "I" vs "the person" phrasing
    question: str
    a_init: str
    a_ego: Optional[str] = None
    a_exo: Optional[str] = None
    a_both: Optional[str] = None
    a_text: Optional[str] = None
    filter: FilterState = field(default_factory=FilterState)
    option_sets: dict[str, list[str]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)  # field -> request digest

    def expanded(self) -> bool:
        return None not in (self.a_ego, self.a_exo, self.a_both, self.a_text)

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "pair_id": self.pair_id,
            "category": self.category.value,
            "source_view": self.source_view.value,
            "question": self.question,
            "a_init": self.a_init,
            "a_ego": self.a_ego,
            "a_exo": self.a_exo,
            "a_both": self.a_both,
            "a_text": self.a_text,
            "filter": {
                "text_matches_init": self.filter.text_matches_init,
                "both_in_init": self.filter.both_in_init,
                "verdict": self.filter.verdict.value,
            },
            "option_sets": self.option_sets,
            "flags": self.flags,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_json(record: dict) -> "CandidateQA":
        raw_filter = record.get("filter", {})
        return CandidateQA(
            qa_id=record["qa_id"],
            pair_id=record["pair_id"],
            category=Category(record["category"]),
            source_view=View(record["source_view"]),
            question=record["question"],
            a_init=record["a_init"],
            a_ego=record.get("a_ego"),
            a_exo=record.get("a_exo"),
            a_both=record.get("a_both"),
            a_text=record.get("a_text"),
            filter=FilterState(
                text_matches_init=raw_filter.get("text_matches_init"),
                both_in_init=raw_filter.get("both_in_init"),
                verdict=Verdict(raw_filter.get("verdict", "Pending")),
            ),
            option_sets={k: list(v) for k, v in record.get("option_sets", {}).items()},
            flags=list(record.get("flags", ())),
            provenance=dict(record.get("provenance", {})),
        )


# -- counting ----------------------------------------------------------------


def expected_generation_count(n_pairs: int, categories: int, qas_per_category: int) -> int:
    if n_pairs < 0 or categories < 0 or qas_per_category < 0:
        raise ValueError("counts must be >= 0")
    return n_pairs * 2 * categories * qas_per_category


# -- frame-pair manifests ----------------------------------------------------


def load_frame_pairs(path: Path) -> list[FramePair]:
    path = Path(path)
    manifest = read_manifest(path)
    image_root = (path.parent / manifest.get("image_root", ".")).resolve()
    pairs: list[FramePair] = []
    seen: set[str] = set()
    missing: list[str] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ForgeError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            try:
                pair = FramePair(
                    pair_id=str(record["pair_id"]),
                    take_id=str(record["take_id"]),
                    scenario=str(record.get("scenario", "")),
                    ego_image=_image_ref(image_root, record["ego_image"]),
                    exo_image=_image_ref(image_root, record["exo_image"]),
                    frame_index=int(record["frame_index"]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ForgeError(f"{path}:{line_no}: {exc}") from exc
            if pair.pair_id in seen:
                raise ForgeError(f"{path}:{line_no}: duplicate pair_id {pair.pair_id!r}")
            seen.add(pair.pair_id)
            for ref in (pair.ego_image, pair.exo_image):
                if ref.source is ImageSource.LOCAL_PATH and not os.path.exists(ref.value):
                    missing.append(ref.value)
            pairs.append(pair)
    if missing:
        raise ForgeError(f"{len(missing)} image files missing, first: {missing[0]}")
    return pairs


def _image_ref(image_root: Path, rel: str) -> ImageRef:
    resolved = (Path(image_root) / rel).resolve()
    suffix = resolved.suffix.lower()
    media_type = "image/png" if suffix == ".png" else "image/jpeg"
    return ImageRef(source=ImageSource.LOCAL_PATH, value=str(resolved), media_type=media_type)


def lint_frame_pairs(pairs: Sequence[FramePair], frames_per_take: int = 8) -> list[str]:
    """Checks the frames-per-take convention. Warnings, not hard errors."""
    warnings: list[str] = []
    by_take: dict[str, list[FramePair]] = {}
    for pair in pairs:
        by_take.setdefault(pair.take_id, []).append(pair)
    for take_id in sorted(by_take):
        members = by_take[take_id]
        if len(members) != frames_per_take:
            warnings.append(
                f"take {take_id}: {len(members)} frames, expected {frames_per_take}"
            )
        indices = [pair.frame_index for pair in members]
        if len(set(indices)) != len(indices):
            warnings.append(f"take {take_id}: duplicate frame_index values")
    return warnings


# -- backend plumbing --------------------------------------------------------


def _forge_send(
    gateway: ChatGateway, turns: list[Turn]
) -> tuple[str, ChatResponse]:
    cfg = gateway.config
    request = ChatRequest(
        model_id=cfg.model_id,
        system="",
        turns=tuple(turns),
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        seed=cfg.seed,
    )
    return fingerprint(request), gateway.complete(request)


# -- Step 1: single-view generation ------------------------------------------

_QA_MARKER_RE = re.compile(
    r"^\s*(?:[-*]\s*)?(?:\d+\s*[.)]\s*)?(Q(?:uestion)?|A(?:nswer)?)\s*\d*\s*[:.]\s*(.*)$",
    re.IGNORECASE,
)


def parse_qa_blocks(text: str) -> tuple[list[tuple[str, str]], list[str]]:
    """Pulls (question, answer) pairs out of 'Q:/A:' or numbered layouts."""
    pairs: list[tuple[str, str]] = []
    diagnostics: list[str] = []
    question: Optional[str] = None
    answer: Optional[str] = None

    def commit() -> None:
        nonlocal question, answer
        if question is not None and answer is not None:
            if question.strip() and answer.strip():
                pairs.append((question.strip(), answer.strip()))
            else:
                diagnostics.append("empty question or answer text")
        elif question is not None:
            diagnostics.append(f"question without answer: {question.strip()[:80]!r}")
        elif answer is not None:
            diagnostics.append(f"answer without question: {answer.strip()[:80]!r}")
        question = None
        answer = None

    for line in text.splitlines():
        match = _QA_MARKER_RE.match(line)
        if match:
            marker = match.group(1).upper()
            body = match.group(2)
            if marker.startswith("Q"):
                if question is not None:
                    commit()
                question = body
                answer = None
            else:
                if question is None:
                    diagnostics.append(f"answer without question: {body.strip()[:80]!r}")
                else:
                    answer = body
                    commit()
            continue
        stripped = line.strip()
        if not stripped:
            continue
        # Continuation line for whichever field is open.
        if answer is not None:
            answer = f"{answer} {stripped}"
        elif question is not None:
            question = f"{question} {stripped}"
    commit()
    return pairs, diagnostics


_STEP1_IMAGE_KEY = {View.EGO: "EgoImage", View.EXO: "ExoImage"}


def generate_single_view_qas(
    pair: FramePair,
    gateway: ChatGateway,
    catalog: PromptCatalog,
    diagnostics: Optional[list[str]] = None,
) -> list[CandidateQA]:
    candidates: list[CandidateQA] = []
    for view in (View.EGO, View.EXO):
        image = pair.ego_image if view is View.EGO else pair.exo_image
        for category in CATEGORY_ORDER:
            category_prompt = catalog.render_text(
                TemplateKey(TemplateMethod.FORGE_STEP1, "category", view, category), {}
            )
            parts = catalog.render(
                TemplateKey(TemplateMethod.FORGE_STEP1, "generate", view),
                {_STEP1_IMAGE_KEY[view]: image, "CategoryPrompt": category_prompt},
            )
            digest, response = _forge_send(gateway, [user_turn(parts)])
            parsed, call_diags = parse_qa_blocks(response.text)
            if diagnostics is not None:
                for diag in call_diags:
                    diagnostics.append(f"{pair.pair_id}/{view.value}/{category.value}: {diag}")
                if not parsed:
                    diagnostics.append(
                        f"{pair.pair_id}/{view.value}/{category.value}: zero parsed pairs"
                    )
            for ordinal, (question, answer) in enumerate(parsed, start=1):
                candidates.append(
                    CandidateQA(
                        qa_id=f"{pair.pair_id}-{view.value}-{category.value}-{ordinal}",
                        pair_id=pair.pair_id,
                        category=category,
                        source_view=view,
                        question=question,
                        a_init=answer,
                        provenance={"question": digest, "a_init": digest},
                    )
                )
    return candidates


# -- Step 2: four-condition expansion ----------------------------------------


def expand_responses(
    qa: CandidateQA, pair: FramePair, gateway: ChatGateway, catalog: PromptCatalog
) -> CandidateQA:
    if pair.pair_id != qa.pair_id:
        raise ForgeError(f"pair {pair.pair_id!r} does not match candidate {qa.qa_id!r}")
    out = replace(qa)
    category_prompt = catalog.render_text(
        TemplateKey(TemplateMethod.FORGE_STEP2, "category", View.NA, qa.category), {}
    )
    conditions = (
        ("a_ego", View.EGO, {"EgoImage": pair.ego_image}),
        ("a_exo", View.EXO, {"ExoImage": pair.exo_image}),
        ("a_both", View.BOTH, {"EgoImage": pair.ego_image, "ExoImage": pair.exo_image}),
        ("a_text", View.TEXT_ONLY, {}),
    )
    for field_name, view, images in conditions:
        if getattr(out, field_name) is not None:
            continue  # already filled; resumable stage
        bindings = dict(images)
        bindings["CategoryPrompt"] = category_prompt
        bindings["Question"] = qa.question
        parts = catalog.render(
            TemplateKey(TemplateMethod.FORGE_STEP2, "expand", view), bindings
        )
        digest, response = _forge_send(gateway, [user_turn(parts)])
        setattr(out, field_name, response.text.strip())
        out.provenance = {**out.provenance, field_name: digest}
    return out


# -- Step 3: equivalence judging and filtering -------------------------------

_AFFIRMATIVE = {"yes", "same", "equivalent"}
_NEGATIVE = {"no", "different"}
_TOKEN_TRIM = ",.!?:;'\"()[]"


@dataclass(frozen=True)
class JudgeResult:
    equivalent: bool
    unparseable: bool
    token: str
    fingerprint: str

    def __bool__(self) -> bool:
        return self.equivalent


def judge_equivalence(
    question: str,
    answer: str,
    label: str,
    gateway: ChatGateway,
    catalog: PromptCatalog,
    condition: View = View.TEXT_ONLY,
) -> JudgeResult:
    if not question or not answer or not label:
        raise ForgeError("judge_equivalence requires non-empty question, answer, label")
    if condition is View.TEXT_ONLY:
        bindings = {"Question": question, "AnswerText": answer, "AnswerInit": label}
    elif condition is View.BOTH:
        bindings = {"Question": question, "AnswerBoth": answer, "AnswerInit": label}
    else:
        raise ForgeError(f"no filtering prompt for condition {condition.value}")
    parts = catalog.render(
        TemplateKey(TemplateMethod.FORGE_STEP3, "judge", condition), bindings
    )
    digest, response = _forge_send(gateway, [user_turn(parts)])
    tokens = response.text.split()
    token = tokens[0].strip(_TOKEN_TRIM).lower() if tokens else ""
    if token in _AFFIRMATIVE:
        return JudgeResult(equivalent=True, unparseable=False, token=token, fingerprint=digest)
    if token in _NEGATIVE:
        return JudgeResult(equivalent=False, unparseable=False, token=token, fingerprint=digest)
    # Unreadable judge output keeps the question; humans get the final say.
    return JudgeResult(equivalent=False, unparseable=True, token=token, fingerprint=digest)


def filter_question(
    qa: CandidateQA, gateway: ChatGateway, catalog: PromptCatalog
) -> CandidateQA:
    if qa.filter.verdict is not Verdict.PENDING:
        return qa
    if not qa.expanded():
        raise ForgeError(f"candidate {qa.qa_id!r} is not fully expanded; run step2 first")
    out = replace(qa, filter=replace(qa.filter), flags=list(qa.flags))
    try:
        text_result = judge_equivalence(
            qa.question, qa.a_text, qa.a_init, gateway, catalog, condition=View.TEXT_ONLY
        )
    except BackendError as exc:
        out.flags.append(f"judge_backend_error:{type(exc).__name__}")
        return out  # verdict stays Pending
    out.provenance = {**out.provenance, "text_matches_init": text_result.fingerprint}
    if text_result.unparseable:
        out.flags.append("judge_unparseable:text")
    out.filter.text_matches_init = text_result.equivalent
    if text_result.equivalent:
        # Short-circuit: answerable from text alone, second judge never runs.
        out.filter.verdict = Verdict.DISCARDED_TEXT_MATCH
        return out
    try:
        both_result = judge_equivalence(
            qa.question, qa.a_both, qa.a_init, gateway, catalog, condition=View.BOTH
        )
    except BackendError as exc:
        out.flags.append(f"judge_backend_error:{type(exc).__name__}")
        return out
    out.provenance = {**out.provenance, "both_in_init": both_result.fingerprint}
    if both_result.unparseable:
        out.flags.append("judge_unparseable:both")
    out.filter.both_in_init = both_result.equivalent
    out.filter.verdict = (
        Verdict.DISCARDED_BOTH_MATCH if both_result.equivalent else Verdict.KEPT
    )
    return out


# -- option generation -------------------------------------------------------

_OPTION_LINE_RE = re.compile(r"^\s*\[(.+?)\]\s*$")


def parse_bracket_options(text: str) -> list[str]:
    options = []
    for line in text.splitlines():
        match = _OPTION_LINE_RE.match(line)
        if match:
            options.append(match.group(1).strip())
    return options


def generate_options(
    qa: CandidateQA, pair: FramePair, gateway: ChatGateway, catalog: PromptCatalog
) -> CandidateQA:
    if qa.filter.verdict is not Verdict.KEPT:
        raise ForgeError(f"candidate {qa.qa_id!r} has verdict {qa.filter.verdict.value}, not Kept")
    if pair.pair_id != qa.pair_id:
        raise ForgeError(f"pair {pair.pair_id!r} does not match candidate {qa.qa_id!r}")
    out = replace(qa, option_sets=dict(qa.option_sets), flags=list(qa.flags))
    plans = (
        ("ego", View.EGO, {"EgoImage": pair.ego_image, "AnswerEgo": qa.a_ego}),
        ("exo", View.EXO, {"ExoImage": pair.exo_image, "AnswerExo": qa.a_exo}),
    )
    for source, view, bindings in plans:
        if source in out.option_sets:
            continue
        answer_key = "AnswerEgo" if source == "ego" else "AnswerExo"
        if bindings[answer_key] is None:
            raise ForgeError(f"candidate {qa.qa_id!r} lacks a_{source}; run step2 first")
        parts = catalog.render(
            TemplateKey(TemplateMethod.OPTION_GEN, "generate", view),
            {**bindings, "Question": qa.question},
        )
        digest, response = _forge_send(gateway, [user_turn(parts)])
        options = parse_bracket_options(response.text)
        if len(options) != 4:
            out.flags.append(f"option_parse_error:{source}:{len(options)}")
            continue
        out.option_sets[source] = options
        out.provenance = {**out.provenance, f"option_sets.{source}": digest}
    return out


# -- statistics --------------------------------------------------------------


@dataclass
class ForgeStats:
    generated: int
    after_filter: int
    filter_rate_pct: float
    per_category: dict[str, dict]
    per_scenario: dict[str, dict]

    def to_json(self) -> dict:
        return {
            "generated": self.generated,
            "after_filter": self.after_filter,
            "filter_rate_pct": self.filter_rate_pct,
            "per_category": self.per_category,
            "per_scenario": self.per_scenario,
        }


def forge_stats(
    candidates: Sequence[CandidateQA], pairs: Optional[Sequence[FramePair]] = None
) -> ForgeStats:
    pending = sum(1 for qa in candidates if qa.filter.verdict is Verdict.PENDING)
    if pending:
        raise PendingVerdicts(pending)
    generated = len(candidates)
    kept = sum(1 for qa in candidates if qa.filter.verdict is Verdict.KEPT)
    rate = 100.0 * (1.0 - kept / generated) if generated else 0.0
    per_category: dict[str, dict] = {}
    for category in CATEGORY_ORDER:
        subset = [qa for qa in candidates if qa.category is category]
        if not subset:
            continue
        sub_kept = sum(1 for qa in subset if qa.filter.verdict is Verdict.KEPT)
        per_category[category.value] = {"generated": len(subset), "kept": sub_kept}
    per_scenario: dict[str, dict] = {}
    if pairs is not None:
        scenario_of = {pair.pair_id: pair.scenario for pair in pairs}
        for qa in candidates:
            scenario = scenario_of.get(qa.pair_id, "unknown")
            bucket = per_scenario.setdefault(scenario, {"generated": 0, "kept": 0})
            bucket["generated"] += 1
            if qa.filter.verdict is Verdict.KEPT:
                bucket["kept"] += 1
    return ForgeStats(
        generated=generated,
        after_filter=kept,
        filter_rate_pct=rate,
        per_category=per_category,
        per_scenario=dict(sorted(per_scenario.items())),
    )


# -- stage files -------------------------------------------------------------


def write_candidates(path: Path, candidates: Sequence[CandidateQA]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for qa in candidates:
            handle.write(json.dumps(qa.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_candidates(path: Path) -> list[CandidateQA]:
    candidates = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                candidates.append(CandidateQA.from_json(json.loads(line)))
    return candidates


def run_step1(
    pairs: Sequence[FramePair],
    gateway: ChatGateway,
    catalog: PromptCatalog,
    existing: Sequence[CandidateQA] = (),
    diagnostics: Optional[list[str]] = None,
) -> list[CandidateQA]:
    done_pairs = {qa.pair_id for qa in existing}
    candidates = list(existing)
    for pair in pairs:
        if pair.pair_id in done_pairs:
            continue
        candidates.extend(generate_single_view_qas(pair, gateway, catalog, diagnostics))
    return candidates


def run_step2(
    candidates: Sequence[CandidateQA],
    pairs: Sequence[FramePair],
    gateway: ChatGateway,
    catalog: PromptCatalog,
) -> list[CandidateQA]:
    by_id = {pair.pair_id: pair for pair in pairs}
    out = []
    for qa in candidates:
        if qa.expanded():
            out.append(qa)
            continue
        out.append(expand_responses(qa, by_id[qa.pair_id], gateway, catalog))
    return out


def run_step3(
    candidates: Sequence[CandidateQA], gateway: ChatGateway, catalog: PromptCatalog
) -> list[CandidateQA]:
    return [filter_question(qa, gateway, catalog) for qa in candidates]


def run_options(
    candidates: Sequence[CandidateQA],
    pairs: Sequence[FramePair],
    gateway: ChatGateway,
    catalog: PromptCatalog,
) -> list[CandidateQA]:
    by_id = {pair.pair_id: pair for pair in pairs}
    out = []
    for qa in candidates:
        if qa.filter.verdict is Verdict.KEPT and len(qa.option_sets) < 2:
            out.append(generate_options(qa, by_id[qa.pair_id], gateway, catalog))
        else:
            out.append(qa)
    return out
