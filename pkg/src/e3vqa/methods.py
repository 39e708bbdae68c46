"""Single- and two-call prompting baselines, plus the shared method dispatch."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import scenegraph
from .answers import extract_choice
from .backend import ChatGateway
from .catalog import (
    Agent,
    PromptCatalog,
    TemplateKey,
    TemplateMethod,
    lettered_options,
    question_prompt,
    system_text,
)
from .chat import ChatRequest, ChatResponse, Turn, fingerprint, user_turn
from .core import ChoiceLetter, MethodId, View
from .dataset import BenchmarkItem
from .m3cot import M3CoTConfig, run_m3cot
from .scenegraph import ExtractionStatus


@dataclass
class MethodRunRecord:
    method: MethodId
    item_id: str
    turns: list[tuple[str, str]]  # (request fingerprint, response text) per call
    final_answer: Optional[ChoiceLetter]
    call_count: int
    flags: set[str] = field(default_factory=set)
    trace: dict = field(default_factory=dict)


def _send(
    gateway: ChatGateway, catalog: PromptCatalog, turns: list[Turn]
) -> tuple[str, ChatResponse]:
    cfg = gateway.config
    request = ChatRequest(
        model_id=cfg.model_id,
        system=system_text(catalog),
        turns=tuple(turns),
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        seed=cfg.seed,
    )
    return fingerprint(request), gateway.complete(request)


def run_default(
    item: BenchmarkItem, gateway: ChatGateway, catalog: PromptCatalog
) -> MethodRunRecord:
    parts = catalog.render(
        TemplateKey(TemplateMethod.DEFAULT, "question", View.BOTH),
        {
            "EgoImage": item.ego_image,
            "ExoImage": item.exo_image,
            "Question": lettered_options(item.question, list(item.options)),
        },
    )
    digest, response = _send(gateway, catalog, [user_turn(parts)])
    return MethodRunRecord(
        method=MethodId.DEFAULT,
        item_id=item.id,
        turns=[(digest, response.text)],
        final_answer=extract_choice(response.text, item.options),
        call_count=1,
    )


def run_ddcot(
    item: BenchmarkItem, gateway: ChatGateway, catalog: PromptCatalog
) -> MethodRunRecord:
    qp = question_prompt(item.question, list(item.options))
    images = {"EgoImage": item.ego_image, "ExoImage": item.exo_image}
    parts = catalog.render(
        TemplateKey(TemplateMethod.DDCOT, "decompose", View.BOTH),
        {**images, "QuestionPrompt": qp},
    )
    digest1, first = _send(gateway, catalog, [user_turn(parts)])
    # The decomposition re-enters the second request verbatim as quoted context.
    parts = catalog.render(
        TemplateKey(TemplateMethod.DDCOT, "answer", View.BOTH),
        {**images, "QuestionPrompt": qp, "AssistantResponse": first.text},
    )
    digest2, second = _send(gateway, catalog, [user_turn(parts)])
    return MethodRunRecord(
        method=MethodId.DDCOT,
        item_id=item.id,
        turns=[(digest1, first.text), (digest2, second.text)],
        final_answer=extract_choice(second.text, item.options),
        call_count=2,
    )


def run_cocot(
    item: BenchmarkItem, gateway: ChatGateway, catalog: PromptCatalog
) -> MethodRunRecord:
    parts = catalog.render(
        TemplateKey(TemplateMethod.COCOT, "question", View.BOTH),
        {
            "EgoImage": item.ego_image,
            "ExoImage": item.exo_image,
            "QuestionPrompt": question_prompt(item.question, list(item.options)),
        },
    )
    digest, response = _send(gateway, catalog, [user_turn(parts)])
    return MethodRunRecord(
        method=MethodId.COCOT,
        item_id=item.id,
        turns=[(digest, response.text)],
        final_answer=extract_choice(response.text, item.options),
        call_count=1,
    )


def run_ccot(
    item: BenchmarkItem, gateway: ChatGateway, catalog: PromptCatalog
) -> MethodRunRecord:
    qp = question_prompt(item.question, list(item.options))
    images = {"EgoImage": item.ego_image, "ExoImage": item.exo_image}
    parts = catalog.render(
        TemplateKey(TemplateMethod.CCOT, "sg_generate", View.BOTH),
        {**images, "QuestionPrompt": qp},
    )
    digest1, first = _send(gateway, catalog, [user_turn(parts)])
    flags: set[str] = set()
    outcome = scenegraph.extract(first.text)
    if outcome.status is ExtractionStatus.FAILED:
        flags.add("ccot_sg_unparseable")
    parts = catalog.render(
        TemplateKey(TemplateMethod.CCOT, "answer", View.BOTH),
        {**images, "QuestionPrompt": qp, "AssistantResponse": first.text},
    )
    digest2, second = _send(gateway, catalog, [user_turn(parts)])
    return MethodRunRecord(
        method=MethodId.CCOT,
        item_id=item.id,
        turns=[(digest1, first.text), (digest2, second.text)],
        final_answer=extract_choice(second.text, item.options),
        call_count=2,
        flags=flags,
    )


def run_m3cot_method(
    item: BenchmarkItem,
    gateway: ChatGateway,
    catalog: PromptCatalog,
    config: Optional[M3CoTConfig] = None,
) -> MethodRunRecord:
    result = run_m3cot(item, config or M3CoTConfig(), gateway, catalog)
    turns = [
        (call["request_fingerprint"], call["response_text"])
        for call in result.trace.get("calls", [])
    ]
    return MethodRunRecord(
        method=MethodId.M3COT,
        item_id=item.id,
        turns=turns,
        final_answer=result.final_answer,
        call_count=result.call_count,
        flags=set(result.flags),
        trace=result.trace,
    )


_RUNNERS = {
    MethodId.DEFAULT: run_default,
    MethodId.DDCOT: run_ddcot,
    MethodId.COCOT: run_cocot,
    MethodId.CCOT: run_ccot,
}


def run_method(
    item: BenchmarkItem,
    method: MethodId,
    gateway: ChatGateway,
    catalog: PromptCatalog,
    m3cot_config: Optional[M3CoTConfig] = None,
) -> MethodRunRecord:
    if method is MethodId.M3COT:
        return run_m3cot_method(item, gateway, catalog, m3cot_config)
    return _RUNNERS[method](item, gateway, catalog)


def expected_calls(method: MethodId, m3cot_config: Optional[M3CoTConfig] = None) -> int:
    """Worst-case provider calls for one item; M3CoT may stop short on consensus."""
    if method is MethodId.M3COT:
        return (m3cot_config or M3CoTConfig()).call_budget()
    return {MethodId.DEFAULT: 1, MethodId.COCOT: 1, MethodId.DDCOT: 2, MethodId.CCOT: 2}[method]
