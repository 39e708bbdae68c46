"""Single entry point: run, report, forge, curate, cache, templates.

Exit codes: 0 success, 1 validation problem (bad flags, unreadable inputs),
2 runtime failure after inputs validated. Config precedence is flags over the
TOML config file over built-in defaults; the resolved config is echoed into
the output directory by the run subcommand.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace as dc_replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backend import (
    BackendConfig,
    BackendError,
    ChatGateway,
    RateLimit,
    ResponseCache,
    build_provider,
    load_backend_config,
)
from .bench import (
    ReportFormat,
    RunConfig,
    aggregate,
    execute_run,
    read_records,
    render_report,
)
from .catalog import (
    Agent,
    CatalogError,
    PromptCatalog,
    TemplateKey,
    TemplateMethod,
    lettered_options,
    question_prompt,
)
from .chat import ContentPart
from .core import MethodId, View
from .curation import CurationError, CurationService, build_app
from .dataset import BenchmarkItem, DatasetError, load_dataset, lint_dataset
from .forge import (
    ForgeError,
    PendingVerdicts,
    forge_stats,
    lint_frame_pairs,
    load_frame_pairs,
    read_candidates,
    run_options,
    run_step1,
    run_step2,
    run_step3,
    write_candidates,
)
from .m3cot import M3CoTConfig


class CliError(Exception):
    pass


# -- shared helpers ----------------------------------------------------------


def _parse_method(name: str) -> MethodId:
    for method in MethodId:
        if method.value.lower() == name.lower():
            return method
    valid = ", ".join(method.value for method in MethodId)
    raise CliError(f"unknown method {name!r}; valid methods: {valid}")


def _parse_format(name: str) -> ReportFormat:
    table = {
        "md": ReportFormat.MARKDOWN_TABLE,
        "markdown": ReportFormat.MARKDOWN_TABLE,
        "csv": ReportFormat.CSV,
        "json": ReportFormat.JSON,
    }
    if name.lower() not in table:
        raise CliError(f"unknown format {name!r}; valid formats: md, csv, json")
    return table[name.lower()]


def _load_backend(path: Optional[str]) -> tuple[BackendConfig, list, dict]:
    """Backend config, scripted rules, and the raw [run] table from one TOML file."""
    if path is None:
        return BackendConfig(), [], {}
    config_path = Path(path)
    if not config_path.is_file():
        raise CliError(f"backend config not found: {config_path}")
    config, script = load_backend_config(config_path)
    with config_path.open("rb") as handle:
        doc = tomllib.load(handle)
    run_section = doc.get("run", {})
    if not isinstance(run_section, dict):
        raise CliError("[run] section must be a table")
    return config, script, run_section


def _pick(flag, file_value, default):
    if flag is not None:
        return flag
    if file_value is not None:
        return file_value
    return default


def _gateway(config: BackendConfig, script: list) -> ChatGateway:
    return ChatGateway(build_provider(config, script=script or None), config)


def _part_text(part: ContentPart) -> str:
    if part.kind == "Image" and part.image is not None:
        return f"[image: {part.image.value}]"
    return part.text or ""


def _print_prompt(label: str, parts) -> None:
    print(f"--- {label} ---")
    for part in parts:
        print(_part_text(part))
    print()


def _dry_run_prompts(item: BenchmarkItem, method: MethodId, catalog: PromptCatalog) -> None:
    qp = question_prompt(item.question, list(item.options))
    images = {"EgoImage": item.ego_image, "ExoImage": item.exo_image}
    if method is MethodId.DEFAULT:
        parts = catalog.render(
            TemplateKey(TemplateMethod.DEFAULT, "question", View.BOTH),
            {**images, "Question": lettered_options(item.question, list(item.options))},
        )
        _print_prompt("Default question", parts)
    elif method is MethodId.COCOT:
        parts = catalog.render(
            TemplateKey(TemplateMethod.COCOT, "question", View.BOTH),
            {**images, "QuestionPrompt": qp},
        )
        _print_prompt("CoCoT question", parts)
    elif method is MethodId.DDCOT:
        parts = catalog.render(
            TemplateKey(TemplateMethod.DDCOT, "decompose", View.BOTH),
            {**images, "QuestionPrompt": qp},
        )
        _print_prompt("DDCoT decompose (call 1 of 2)", parts)
        print("(call 2 embeds call 1's response; nothing more to render without a backend)\n")
    elif method is MethodId.CCOT:
        parts = catalog.render(
            TemplateKey(TemplateMethod.CCOT, "sg_generate", View.BOTH),
            {**images, "QuestionPrompt": qp},
        )
        _print_prompt("CCoT scene-graph generation (call 1 of 2)", parts)
        print("(call 2 embeds call 1's response; nothing more to render without a backend)\n")
    else:
        plans = (
            ("F1_EgoExo sg_generate", "sg_generate", View.BOTH, Agent.EGO_EXO, dict(images)),
            ("F2_Ego2Exo sg_generate", "sg_generate", View.EGO, Agent.EGO2EXO,
             {"EgoImage": item.ego_image}),
            ("F2_Ego2Exo sg_refine_view", "sg_refine_view", View.EXO, Agent.EGO2EXO,
             {"ExoImage": item.exo_image}),
            ("F3_Exo2Ego sg_generate", "sg_generate", View.EXO, Agent.EXO2EGO,
             {"ExoImage": item.exo_image}),
            ("F3_Exo2Ego sg_refine_view", "sg_refine_view", View.EGO, Agent.EXO2EGO,
             {"EgoImage": item.ego_image}),
        )
        for label, phase, view, agent, bindings in plans:
            parts = catalog.render(
                TemplateKey(TemplateMethod.M3COT, phase, view, agent=agent),
                {**bindings, "QuestionPrompt": qp},
            )
            _print_prompt(label, parts)


# -- run ---------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    backend_config, script, run_section = _load_backend(args.backend)
    if args.max_in_flight is not None:
        backend_config = dc_replace(
            backend_config,
            rate_limit=RateLimit(
                max_in_flight=args.max_in_flight,
                min_interval_ms=backend_config.rate_limit.min_interval_ms,
            ),
        )
    dataset = _pick(args.dataset, run_section.get("dataset"), None)
    if dataset is None:
        raise CliError("a dataset is required (--dataset or [run].dataset)")
    method_name = _pick(args.method, run_section.get("method"), None)
    if method_name is None:
        raise CliError("a method is required (--method or [run].method)")
    method = _parse_method(str(method_name))
    runs = int(_pick(args.runs, run_section.get("runs"), 1))
    if runs < 1:
        raise CliError("--runs must be >= 1")
    max_items = _pick(args.max_items, run_section.get("max_items"), None)
    if max_items is not None and int(max_items) < 1:
        raise CliError("--max-items must be >= 1")
    max_iterations = int(
        _pick(args.max_iterations, run_section.get("max_iterations"), 1)
    )
    config = RunConfig(
        dataset=Path(dataset),
        method=method,
        backend=backend_config,
        runs=runs,
        out_dir=Path(_pick(args.out_dir, run_section.get("out_dir"), "runs")),
        max_items=int(max_items) if max_items is not None else None,
        seed=_pick(args.seed, run_section.get("seed"), None),
        m3cot=M3CoTConfig(max_iterations=max_iterations),
        save_traces=not args.no_traces,
        script=script,
    )
    if not config.dataset.is_file():
        raise CliError(f"dataset not found: {config.dataset}")
    items = load_dataset(config.dataset)
    if not items:
        raise CliError(f"dataset is empty: {config.dataset}")
    for warning in lint_dataset(items):
        print(f"lint: {warning}", file=sys.stderr)
    catalog = PromptCatalog.load_default()

    if args.dry_run:
        print(json.dumps(config.config_echo(), indent=2, sort_keys=True))
        print()
        _dry_run_prompts(items[0], method, catalog)
        return 0

    try:
        out_dir, report = execute_run(config, items, catalog)
    except (BackendError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out_dir}")
    print()
    print(render_report(report), end="")
    return 0


# -- report ------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    if args.records is None and args.run_dir is None:
        raise CliError("either --records or --run-dir is required")
    records_path = Path(args.records) if args.records else Path(args.run_dir) / "records.jsonl"
    if not records_path.is_file():
        raise CliError(f"records file not found: {records_path}")
    records = read_records(records_path)
    items = load_dataset(Path(args.dataset))
    report = aggregate(records, items)
    rendered = render_report(report, _parse_format(args.format))
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(rendered, end="")
    return 0


# -- forge -------------------------------------------------------------------


def cmd_forge(args: argparse.Namespace) -> int:
    stage = args.stage
    if stage == "stats":
        candidates = read_candidates(Path(args.in_path))
        pairs = load_frame_pairs(Path(args.pairs)) if args.pairs else None
        try:
            stats = forge_stats(candidates, pairs)
        except PendingVerdicts as exc:
            raise CliError(str(exc)) from exc
        print(json.dumps(stats.to_json(), indent=2, sort_keys=True))
        return 0

    if args.backend is None:
        raise CliError(f"forge {stage} needs --backend")
    if args.out_path is None:
        raise CliError(f"forge {stage} needs --out")
    if stage in ("step2", "options") and args.pairs is None:
        raise CliError(f"forge {stage} needs --pairs")
    backend_config, script, _ = _load_backend(args.backend)
    gateway = _gateway(backend_config, script)
    catalog = PromptCatalog.load_default()
    out_path = Path(args.out_path)

    if stage == "step1":
        pairs = load_frame_pairs(Path(args.in_path))
        for warning in lint_frame_pairs(pairs):
            print(f"lint: {warning}", file=sys.stderr)
        existing = read_candidates(out_path) if out_path.is_file() else []
        diagnostics: list[str] = []
        candidates = run_step1(pairs, gateway, catalog, existing, diagnostics)
        for diagnostic in diagnostics:
            print(f"step1: {diagnostic}", file=sys.stderr)
    elif stage == "step2":
        candidates = read_candidates(Path(args.in_path))
        pairs = load_frame_pairs(Path(args.pairs))
        candidates = run_step2(candidates, pairs, gateway, catalog)
    elif stage == "step3":
        candidates = read_candidates(Path(args.in_path))
        candidates = run_step3(candidates, gateway, catalog)
        pending = sum(1 for qa in candidates if qa.filter.verdict.value == "Pending")
        if pending:
            print(f"warning: {pending} candidates still Pending", file=sys.stderr)
    elif stage == "options":
        candidates = read_candidates(Path(args.in_path))
        pairs = load_frame_pairs(Path(args.pairs))
        candidates = run_options(candidates, pairs, gateway, catalog)
    else:  # pragma: no cover - argparse restricts choices
        raise CliError(f"unknown forge stage {stage!r}")
    write_candidates(out_path, candidates)
    print(f"wrote {out_path} ({len(candidates)} candidates, {gateway.calls_made} backend calls)")
    return 0


# -- curate ------------------------------------------------------------------


def _curation_service(args: argparse.Namespace) -> CurationService:
    candidates = read_candidates(Path(args.candidates))
    pairs = load_frame_pairs(Path(args.pairs))
    return CurationService(candidates, pairs, Path(args.log))


def cmd_curate(args: argparse.Namespace) -> int:
    if args.mode == "export":
        if args.out_path is None:
            raise CliError("curate export needs --out")
        service = _curation_service(args)
        count, warnings = service.write_export(Path(args.out_path))
        for warning in warnings:
            print(f"lint: {warning}", file=sys.stderr)
        print(f"wrote {args.out_path} ({count} accepted items)")
        return 0
    service = _curation_service(args)
    ui_dist = Path(args.ui_dist) if args.ui_dist else None
    app = build_app(service, ui_dist)
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- cache -------------------------------------------------------------------


def cmd_cache(args: argparse.Namespace) -> int:
    cache = ResponseCache(Path(args.cache_dir))
    if args.mode == "stats":
        print(json.dumps(cache.stats(), indent=2, sort_keys=True))
        return 0
    removed = cache.gc(args.older_than_s)
    print(f"removed {removed} cache entries")
    return 0


# -- templates ---------------------------------------------------------------


def cmd_templates(args: argparse.Namespace) -> int:
    catalog = PromptCatalog.load_default()
    report = catalog.golden_check()
    if report.ok:
        print(f"templates check: {report.checked} templates match their goldens")
        return 0
    for mismatch in report.mismatches:
        print(
            f"MISMATCH {mismatch.key.label()} ({mismatch.file_name}) "
            f"first differing byte at offset {mismatch.first_diff_offset}",
            file=sys.stderr,
        )
    print(
        f"templates check: {len(report.mismatches)} of {report.checked} templates diverge",
        file=sys.stderr,
    )
    return 1


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="e3vqa",
        description="E3VQA benchmark runner, M3CoT engine, QA forge, and curation tools.",
    )
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run a method over a benchmark file")
    run.add_argument("--dataset", help="benchmark JSONL file")
    run.add_argument("--method", help="Default | DDCoT | CoCoT | CCoT | M3CoT")
    run.add_argument("--backend", help="TOML backend config (may hold a [run] section)")
    run.add_argument("--runs", type=int, default=None, help="independent runs (default 1)")
    run.add_argument("--out", dest="out_dir", default=None, help="output root (default runs/)")
    run.add_argument("--max-items", type=int, default=None, help="truncate the dataset")
    run.add_argument("--seed", type=int, default=None, help="override the backend seed")
    run.add_argument("--max-iterations", type=int, default=None, help="M3CoT refinement rounds")
    run.add_argument("--max-in-flight", type=int, default=None, help="cap concurrent backend calls")
    run.add_argument("--no-traces", action="store_true", help="skip per-item trace files")
    run.add_argument(
        "--dry-run",
        action="store_true",
        help="print the resolved config and the first item's prompts; no backend calls",
    )
    run.set_defaults(handler=cmd_run)

    report = sub.add_parser("report", help="re-render reports from saved records")
    report.add_argument("--records", help="records.jsonl path")
    report.add_argument("--run-dir", help="run directory holding records.jsonl")
    report.add_argument("--dataset", required=True, help="the benchmark file the records came from")
    report.add_argument("--format", default="md", help="md | csv | json")
    report.add_argument("--out", help="write to a file instead of stdout")
    report.set_defaults(handler=cmd_report)

    forge = sub.add_parser("forge", help="QA construction pipeline stages")
    forge.add_argument("stage", choices=["step1", "step2", "step3", "options", "stats"])
    forge.add_argument("--in", dest="in_path", required=True, help="stage input file")
    forge.add_argument("--out", dest="out_path", help="stage output file")
    forge.add_argument("--pairs", help="frame-pair manifest (step2/options; optional for stats)")
    forge.add_argument("--backend", help="TOML backend config")
    forge.set_defaults(handler=cmd_forge)

    curate = sub.add_parser("curate", help="human verification service")
    curate.add_argument("mode", choices=["serve", "export"])
    curate.add_argument("--candidates", required=True, help="kept candidates JSONL")
    curate.add_argument("--pairs", required=True, help="frame-pair manifest")
    curate.add_argument("--log", required=True, help="append-only decision log")
    curate.add_argument("--out", dest="out_path", help="export path (export mode)")
    curate.add_argument("--host", default="127.0.0.1")
    curate.add_argument("--port", type=int, default=8321)
    curate.add_argument("--ui-dist", help="built curation-ui assets to serve at /")
    curate.set_defaults(handler=cmd_curate)

    cache = sub.add_parser("cache", help="response cache maintenance")
    cache.add_argument("mode", choices=["stats", "gc"])
    cache.add_argument("--cache-dir", required=True)
    cache.add_argument("--older-than-s", type=float, default=0.0, help="gc entries older than this")
    cache.set_defaults(handler=cmd_cache)

    templates = sub.add_parser("templates", help="prompt catalog checks")
    templates.add_argument("mode", choices=["check"])
    templates.set_defaults(handler=cmd_templates)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 1
    try:
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ForgeError, CatalogError, CurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # never panic with a traceback at the user
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
