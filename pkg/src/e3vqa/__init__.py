"""E3VQA benchmark tooling: M3CoT engine, baselines, QA forge, curation."""

from .answers import extract_choice
from .backend import (
    AuthError,
    BackendConfig,
    BackendError,
    BudgetExceeded,
    ChatGateway,
    ResponseCache,
    RetryPolicy,
    ScriptedBackend,
    ScriptedFailure,
    TransientExhausted,
    TransientFailure,
    build_provider,
    complete,
    load_backend_config,
)
from .bench import (
    AggregateReport,
    EvalRecord,
    RaggedGrid,
    ReportFormat,
    RunConfig,
    aggregate,
    execute_run,
    render_report,
    run_benchmark,
)
from .catalog import PromptCatalog, TemplateKey, TemplateMethod, question_prompt
from .chat import (
    ChatRequest,
    ChatResponse,
    ContentPart,
    ImageRef,
    ImageSource,
    Role,
    Turn,
    fingerprint,
    image_part,
    text_part,
    user_turn,
)
from .core import AgentId, Category, ChoiceLetter, MethodId, View
from .curation import CurationService, Decision, build_app
from .dataset import BenchmarkItem, lint_dataset, load_dataset
from .forge import (
    CandidateQA,
    ForgeStats,
    FramePair,
    expected_generation_count,
    filter_question,
    forge_stats,
    generate_options,
    generate_single_view_qas,
    judge_equivalence,
)
from .m3cot import (
    M3CoTConfig,
    M3CoTEngine,
    M3CoTResult,
    cross_refine,
    generate_initial_graphs,
    run_m3cot,
    tally_votes,
)
from .methods import run_ccot, run_cocot, run_ddcot, run_default, run_method
from .scenegraph import SceneGraph, extract, serialize_for_prompt

__version__ = "0.1.0"

__all__ = [
    "AgentId",
    "AggregateReport",
    "AuthError",
    "BackendConfig",
    "BackendError",
    "BenchmarkItem",
    "BudgetExceeded",
    "CandidateQA",
    "Category",
    "ChatGateway",
    "ChatRequest",
    "ChatResponse",
    "ChoiceLetter",
    "ContentPart",
    "CurationService",
    "Decision",
    "EvalRecord",
    "ForgeStats",
    "FramePair",
    "ImageRef",
    "ImageSource",
    "M3CoTConfig",
    "M3CoTEngine",
    "M3CoTResult",
    "MethodId",
    "PromptCatalog",
    "RaggedGrid",
    "ReportFormat",
    "ResponseCache",
    "RetryPolicy",
    "Role",
    "RunConfig",
    "SceneGraph",
    "ScriptedBackend",
    "ScriptedFailure",
    "TemplateKey",
    "TemplateMethod",
    "TransientExhausted",
    "TransientFailure",
    "Turn",
    "View",
    "aggregate",
    "build_app",
    "build_provider",
    "complete",
    "cross_refine",
    "execute_run",
    "expected_generation_count",
    "extract",
    "extract_choice",
    "filter_question",
    "fingerprint",
    "forge_stats",
    "generate_initial_graphs",
    "generate_options",
    "generate_single_view_qas",
    "image_part",
    "judge_equivalence",
    "lint_dataset",
    "load_backend_config",
    "load_dataset",
    "question_prompt",
    "render_report",
    "run_benchmark",
    "run_ccot",
    "run_cocot",
    "run_ddcot",
    "run_default",
    "run_m3cot",
    "run_method",
    "serialize_for_prompt",
    "tally_votes",
    "text_part",
    "user_turn",
]
