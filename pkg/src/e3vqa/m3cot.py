"""Three perspective agents: scene-graph generation, cross-refinement, majority vote."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from . import scenegraph
from .answers import extract_choice
from .backend import BackendError, ChatGateway
from .catalog import (
    Agent,
    PromptCatalog,
    TemplateKey,
    TemplateMethod,
    question_prompt,
    system_text,
)
from .chat import ChatRequest, Turn, assistant_turn, fingerprint, user_turn
from .core import AgentId, ChoiceLetter
from .dataset import BenchmarkItem
from .scenegraph import ExtractionOutcome, ExtractionStatus, GraphAgent, GraphOrigin, SceneGraph

ALL_AGENTS = (AgentId.F1_EGO_EXO, AgentId.F2_EGO2EXO, AgentId.F3_EXO2EGO)

# Which two peers feed each agent's cross-refinement, in binding order.
CROSS_REFINE_SOURCES: dict[AgentId, tuple[AgentId, AgentId]] = {
    AgentId.F1_EGO_EXO: (AgentId.F2_EGO2EXO, AgentId.F3_EXO2EGO),
    AgentId.F2_EGO2EXO: (AgentId.F3_EXO2EGO, AgentId.F1_EGO_EXO),
    AgentId.F3_EXO2EGO: (AgentId.F1_EGO_EXO, AgentId.F2_EGO2EXO),
}

_CATALOG_AGENT = {
    AgentId.F1_EGO_EXO: Agent.EGO_EXO,
    AgentId.F2_EGO2EXO: Agent.EGO2EXO,
    AgentId.F3_EXO2EGO: Agent.EXO2EGO,
}
_GRAPH_AGENT = {
    AgentId.F1_EGO_EXO: GraphAgent.F1,
    AgentId.F2_EGO2EXO: GraphAgent.F2,
    AgentId.F3_EXO2EGO: GraphAgent.F3,
}


@dataclass(frozen=True)
class M3CoTConfig:
    max_iterations: int = 1  # cross-refinement rounds after initial generation
    consensus_threshold: int = 2
    record_full_traces: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.consensus_threshold != 2:
            raise ValueError("consensus_threshold is fixed at 2 for three agents")

    def call_budget(self) -> int:
        return 5 + 3 + self.max_iterations * 6


@dataclass(frozen=True)
class VoteOutcome:
    kind: str  # "Consensus" | "NoConsensus"
    letter: Optional[ChoiceLetter]
    tally: dict[ChoiceLetter, int]


def tally_votes(
    answers: Mapping[AgentId, Optional[ChoiceLetter]], threshold: int = 2
) -> VoteOutcome:
    """Majority vote; Unparsed answers abstain and contribute no tally votes."""
    tally: dict[ChoiceLetter, int] = {}
    for answer in answers.values():
        if answer is not None:
            tally[answer] = tally.get(answer, 0) + 1
    for letter in sorted(tally, key=lambda c: c.value):
        if tally[letter] >= threshold:
            return VoteOutcome(kind="Consensus", letter=letter, tally=tally)
    return VoteOutcome(kind="NoConsensus", letter=None, tally=tally)


@dataclass
class IterationState:
    iteration: int
    graphs: dict[AgentId, SceneGraph]
    answers: dict[AgentId, Optional[ChoiceLetter]]
    vote: VoteOutcome


@dataclass
class M3CoTResult:
    final_answer: ChoiceLetter
    decided_by: str  # "ConsensusAtIteration" | "FallbackToF1"
    decided_at_iteration: Optional[int]
    states: list[IterationState]
    call_count: int
    flags: set[str] = field(default_factory=set)
    trace: dict = field(default_factory=dict)


class M3CoTAborted(BackendError):
    """Backend failure mid-item; carries the partial trace for preservation."""

    def __init__(self, message: str, trace: dict, cause: BackendError) -> None:
        super().__init__(message)
        self.trace = trace
        self.cause = cause


@dataclass
class _AgentSlot:
    agent_id: AgentId
    turns: list[Turn]  # conversation feeding the next answer call
    outcome: ExtractionOutcome
    raw_text: str
    graph: SceneGraph

    def graph_text(self) -> str:
        """Canonical serialization when parseable, raw model text otherwise."""
        if self.outcome.status is ExtractionStatus.FAILED:
            return self.raw_text
        return scenegraph.serialize_for_prompt(self.graph)


def _fallback_graph(
    raw_text: str, origin: GraphOrigin, agent: GraphAgent, iteration: int
) -> SceneGraph:
    # Degenerate stand-in so downstream state stays total when extraction fails.
    return SceneGraph(
        raw_text=raw_text,
        objects=[],
        relationships=[],
        extras={},
        origin=origin,
        agent=agent,
        iteration=iteration,
    )


class M3CoTEngine:
    def __init__(
        self,
        backend: ChatGateway,
        catalog: PromptCatalog,
        config: M3CoTConfig = M3CoTConfig(),
    ) -> None:
        self.backend = backend
        self.catalog = catalog
        self.config = config
        self.system = system_text(catalog)

    # -- request plumbing ----------------------------------------------------

    def _request(self, turns: list[Turn]) -> ChatRequest:
        cfg = self.backend.config
        return ChatRequest(
            model_id=cfg.model_id,
            system=self.system,
            turns=tuple(turns),
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
            seed=cfg.seed,
        )

    def _call(
        self,
        trace: dict,
        phase: str,
        agent: Optional[AgentId],
        iteration: int,
        turns: list[Turn],
    ) -> str:
        request = self._request(turns)
        try:
            response = self.backend.complete(request)
        except BackendError as exc:
            raise M3CoTAborted(
                f"{phase} call failed for {agent.value if agent else 'shared'}: {exc}",
                trace,
                exc,
            ) from exc
        trace["calls"].append(
            {
                "phase": phase,
                "agent": agent.value if agent else None,
                "iteration": iteration,
                "request_fingerprint": fingerprint(request),
                "response_text": response.text,
                "from_cache": response.from_cache,
            }
        )
        return response.text

    def _key(self, phase: str, view, agent: Agent) -> TemplateKey:
        return TemplateKey(TemplateMethod.M3COT, phase, view, agent=agent)

    # -- phases --------------------------------------------------------------

    def _generate_initial(self, item: BenchmarkItem, trace: dict) -> dict[AgentId, _AgentSlot]:
        from .core import View

        qp = question_prompt(item.question, list(item.options))
        slots: dict[AgentId, _AgentSlot] = {}

        # F1: one joint generation over both images.
        parts = self.catalog.render(
            self._key("sg_generate", View.BOTH, Agent.EGO_EXO),
            {"EgoImage": item.ego_image, "ExoImage": item.exo_image, "QuestionPrompt": qp},
        )
        turns: list[Turn] = [user_turn(parts)]
        text = self._call(trace, "sg_generate", AgentId.F1_EGO_EXO, 0, turns)
        outcome = scenegraph.extract(text, GraphOrigin.JOINT, GraphAgent.F1, 0)
        slots[AgentId.F1_EGO_EXO] = self._make_slot(
            AgentId.F1_EGO_EXO, turns, text, outcome, GraphOrigin.JOINT, 0, trace
        )

        # F2 and F3: single-view generation then the other view's refinement.
        sequential = (
            (AgentId.F2_EGO2EXO, Agent.EGO2EXO, View.EGO, View.EXO,
             {"EgoImage": item.ego_image}, {"ExoImage": item.exo_image}, GraphOrigin.EGO_ONLY),
            (AgentId.F3_EXO2EGO, Agent.EXO2EGO, View.EXO, View.EGO,
             {"ExoImage": item.exo_image}, {"EgoImage": item.ego_image}, GraphOrigin.EXO_ONLY),
        )
        for agent_id, cat_agent, gen_view, refine_view, gen_img, refine_img, first_origin in sequential:
            bindings = dict(gen_img)
            bindings["QuestionPrompt"] = qp
            parts = self.catalog.render(self._key("sg_generate", gen_view, cat_agent), bindings)
            turns = [user_turn(parts)]
            first_text = self._call(trace, "sg_generate", agent_id, 0, turns)
            first_outcome = scenegraph.extract(
                first_text, first_origin, _GRAPH_AGENT[agent_id], 0
            )
            if first_outcome.status is ExtractionStatus.FAILED:
                trace["flags"].append(f"sg_failed:{agent_id.value}:generate")
            # The single-view graph re-enters the conversation in canonical form.
            first_slot_text = (
                scenegraph.serialize_for_prompt(first_outcome.graph)
                if first_outcome.graph is not None
                else first_text
            )
            turns.append(assistant_turn(first_slot_text))

            bindings = dict(refine_img)
            bindings["QuestionPrompt"] = qp
            parts = self.catalog.render(
                self._key("sg_refine_view", refine_view, cat_agent), bindings
            )
            turns.append(user_turn(parts))
            refined_text = self._call(trace, "sg_refine_view", agent_id, 0, turns)
            outcome = scenegraph.extract(
                refined_text, GraphOrigin.REFINED_VIEW, _GRAPH_AGENT[agent_id], 0
            )
            slots[agent_id] = self._make_slot(
                agent_id, turns, refined_text, outcome, GraphOrigin.REFINED_VIEW, 0, trace
            )
        return slots

    def _make_slot(
        self,
        agent_id: AgentId,
        turns: list[Turn],
        text: str,
        outcome: ExtractionOutcome,
        origin: GraphOrigin,
        iteration: int,
        trace: dict,
    ) -> _AgentSlot:
        if outcome.graph is None:
            trace["flags"].append(f"sg_failed:{agent_id.value}:iter{iteration}")
            graph = _fallback_graph(text, origin, _GRAPH_AGENT[agent_id], iteration)
        else:
            graph = outcome.graph
        slot = _AgentSlot(
            agent_id=agent_id, turns=list(turns), outcome=outcome, raw_text=text, graph=graph
        )
        slot.turns.append(assistant_turn(slot.graph_text()))
        return slot

    def _answer_phase(
        self, item: BenchmarkItem, slots: dict[AgentId, _AgentSlot], iteration: int, trace: dict
    ) -> dict[AgentId, Optional[ChoiceLetter]]:
        from .core import View

        qp = question_prompt(item.question, list(item.options))
        answers: dict[AgentId, Optional[ChoiceLetter]] = {}
        for agent_id in ALL_AGENTS:
            slot = slots[agent_id]
            if iteration == 0:
                key = self._key("answer_initial", View.BOTH, _CATALOG_AGENT[agent_id])
            else:
                key = self._key("answer_refined", View.BOTH, Agent.NA)
            parts = self.catalog.render(
                key,
                {"EgoImage": item.ego_image, "ExoImage": item.exo_image, "QuestionPrompt": qp},
            )
            turns = slot.turns + [user_turn(parts)]
            text = self._call(trace, "answer", agent_id, iteration, turns)
            answers[agent_id] = extract_choice(text, item.options)
        return answers

    def _cross_refine_phase(
        self, item: BenchmarkItem, slots: dict[AgentId, _AgentSlot], iteration: int, trace: dict
    ) -> dict[AgentId, _AgentSlot]:
        """Build S^{t+1} from the frozen iteration-t snapshot; each agent sees only peers."""
        from .core import View

        qp = question_prompt(item.question, list(item.options))
        snapshot = {agent_id: slots[agent_id].graph_text() for agent_id in ALL_AGENTS}
        refined: dict[AgentId, _AgentSlot] = {}
        for agent_id in ALL_AGENTS:
            source_a, source_b = CROSS_REFINE_SOURCES[agent_id]
            parts = self.catalog.render(
                self._key("sg_cross_refine", View.BOTH, Agent.NA),
                {
                    "SceneGraphA": snapshot[source_a],
                    "SceneGraphB": snapshot[source_b],
                    "EgoImage": item.ego_image,
                    "ExoImage": item.exo_image,
                    "QuestionPrompt": qp,
                },
            )
            turns: list[Turn] = [user_turn(parts)]
            text = self._call(trace, "sg_cross_refine", agent_id, iteration + 1, turns)
            outcome = scenegraph.extract(
                text, GraphOrigin.CROSS_REFINED, _GRAPH_AGENT[agent_id], iteration + 1
            )
            refined[agent_id] = self._make_slot(
                agent_id, turns, text, outcome, GraphOrigin.CROSS_REFINED, iteration + 1, trace
            )
        return refined

    # -- full run ------------------------------------------------------------

    def run(self, item: BenchmarkItem) -> M3CoTResult:
        trace: dict = {
            "item_id": item.id,
            "method": "M3CoT",
            "config": {
                "max_iterations": self.config.max_iterations,
                "consensus_threshold": self.config.consensus_threshold,
            },
            "call_budget": self.config.call_budget(),
            "calls": [],
            "iterations": [],
            "flags": [],
            "images": [
                _image_meta("ego", item.ego_image),
                _image_meta("exo", item.exo_image),
            ],
        }
        slots = self._generate_initial(item, trace)
        states: list[IterationState] = []
        final: Optional[ChoiceLetter] = None
        decided_by = "FallbackToF1"
        decided_at: Optional[int] = None

        iteration = 0
        while True:
            answers = self._answer_phase(item, slots, iteration, trace)
            vote = tally_votes(answers, self.config.consensus_threshold)
            state = IterationState(
                iteration=iteration,
                graphs={a: slots[a].graph for a in ALL_AGENTS},
                answers=answers,
                vote=vote,
            )
            states.append(state)
            trace["iterations"].append(_state_to_trace(state, slots))
            if vote.kind == "Consensus":
                final = vote.letter
                decided_by = "ConsensusAtIteration"
                decided_at = iteration
                break
            if iteration >= self.config.max_iterations:
                break
            slots = self._cross_refine_phase(item, slots, iteration, trace)
            iteration += 1

        flags = set(trace["flags"])
        if final is None:
            final = _f1_fallback(states, flags)
        call_count = len(trace["calls"])
        assert call_count <= self.config.call_budget()
        trace.update(
            {
                "final_answer": final.value,
                "decided_by": decided_by,
                "decided_at_iteration": decided_at,
                "call_count": call_count,
                "flags": sorted(flags),
            }
        )
        return M3CoTResult(
            final_answer=final,
            decided_by=decided_by,
            decided_at_iteration=decided_at,
            states=states,
            call_count=call_count,
            flags=flags,
            trace=trace if self.config.record_full_traces else {},
        )


def _f1_fallback(states: list[IterationState], flags: set[str]) -> ChoiceLetter:
    last = states[-1].answers[AgentId.F1_EGO_EXO]
    if last is not None:
        return last
    for state in reversed(states):
        answer = state.answers[AgentId.F1_EGO_EXO]
        if answer is not None:
            flags.add("f1_unparsed_used_earlier_answer")
            return answer
    flags.add("f1_never_parsed_default_a")
    return ChoiceLetter.A


def _state_to_trace(state: IterationState, slots: dict[AgentId, _AgentSlot]) -> dict:
    return {
        "iteration": state.iteration,
        "graphs": {
            agent_id.value: {
                "status": slots[agent_id].outcome.status.value,
                "origin": slots[agent_id].graph.origin.value,
                "raw_text": slots[agent_id].raw_text,
                "canonical": slots[agent_id].graph_text(),
                "diagnostics": list(slots[agent_id].outcome.diagnostics),
            }
            for agent_id in ALL_AGENTS
        },
        "answers": {
            agent_id.value: (answer.value if answer else None)
            for agent_id, answer in state.answers.items()
        },
        "vote": {
            "kind": state.vote.kind,
            "letter": state.vote.letter.value if state.vote.letter else None,
            "tally": {letter.value: count for letter, count in sorted(state.vote.tally.items())},
        },
    }


def _image_meta(role: str, ref) -> dict:
    meta = {
        "role": role,
        "source": ref.source.value,
        "media_type": ref.media_type,
        "bytes": None,
        "sha256": None,
        "width": None,
        "height": None,
    }
    try:
        data = ref.load_bytes()
    except Exception:
        return meta
    import hashlib

    meta["bytes"] = len(data)
    meta["sha256"] = hashlib.sha256(data).hexdigest()
    try:
        import io

        from PIL import Image

        with Image.open(io.BytesIO(data)) as img:
            meta["width"], meta["height"] = img.size
    except Exception:
        pass
    return meta


# -- public operation wrappers ----------------------------------------------


def run_m3cot(
    item: BenchmarkItem,
    config: M3CoTConfig,
    backend: ChatGateway,
    catalog: PromptCatalog,
) -> M3CoTResult:
    return M3CoTEngine(backend, catalog, config).run(item)


def generate_initial_graphs(
    item: BenchmarkItem, backend: ChatGateway, catalog: PromptCatalog
) -> dict[AgentId, SceneGraph]:
    engine = M3CoTEngine(backend, catalog)
    trace: dict = {"calls": [], "flags": []}
    slots = engine._generate_initial(item, trace)
    return {agent_id: slot.graph for agent_id, slot in slots.items()}


def answer_from_graph(
    item: BenchmarkItem,
    agent: AgentId,
    graph: SceneGraph,
    backend: ChatGateway,
    catalog: PromptCatalog,
    history: Optional[list[Turn]] = None,
) -> Optional[ChoiceLetter]:
    """One answer call for one agent. Without an explicit history the request is
    rebuilt minimally: generation prompt, the graph as the assistant turn, then
    the answer prompt."""
    from .core import View

    engine = M3CoTEngine(backend, catalog)
    qp = question_prompt(item.question, list(item.options))
    if history is None:
        if agent is AgentId.F1_EGO_EXO:
            gen_key = engine._key("sg_generate", View.BOTH, Agent.EGO_EXO)
            gen_bindings = {
                "EgoImage": item.ego_image,
                "ExoImage": item.exo_image,
                "QuestionPrompt": qp,
            }
        elif agent is AgentId.F2_EGO2EXO:
            gen_key = engine._key("sg_generate", View.EGO, Agent.EGO2EXO)
            gen_bindings = {"EgoImage": item.ego_image, "QuestionPrompt": qp}
        else:
            gen_key = engine._key("sg_generate", View.EXO, Agent.EXO2EGO)
            gen_bindings = {"ExoImage": item.exo_image, "QuestionPrompt": qp}
        graph_text = (
            scenegraph.serialize_for_prompt(graph) if (graph.objects or graph.relationships or graph.extras) else graph.raw_text
        )
        history = [user_turn(engine.catalog.render(gen_key, gen_bindings)), assistant_turn(graph_text)]
    if graph.iteration == 0:
        key = engine._key("answer_initial", View.BOTH, _CATALOG_AGENT[agent])
    else:
        key = engine._key("answer_refined", View.BOTH, Agent.NA)
    parts = engine.catalog.render(
        key, {"EgoImage": item.ego_image, "ExoImage": item.exo_image, "QuestionPrompt": qp}
    )
    trace: dict = {"calls": [], "flags": []}
    text = engine._call(trace, "answer", agent, graph.iteration, history + [user_turn(parts)])
    return extract_choice(text, item.options)


def cross_refine(
    item: BenchmarkItem,
    states: list[IterationState],
    backend: ChatGateway,
    catalog: PromptCatalog,
) -> dict[AgentId, SceneGraph]:
    """Refine from the last recorded iteration's frozen graph snapshot."""
    engine = M3CoTEngine(backend, catalog)
    last = states[-1]
    slots = {}
    for agent_id in ALL_AGENTS:
        graph = last.graphs[agent_id]
        outcome = ExtractionOutcome(
            status=ExtractionStatus.FAILED
            if not (graph.objects or graph.relationships or graph.extras)
            else ExtractionStatus.PARSED,
            graph=graph,
        )
        slots[agent_id] = _AgentSlot(
            agent_id=agent_id, turns=[], outcome=outcome, raw_text=graph.raw_text, graph=graph
        )
    trace: dict = {"calls": [], "flags": []}
    refined = engine._cross_refine_phase(item, slots, last.iteration, trace)
    return {agent_id: slot.graph for agent_id, slot in refined.items()}
