"""Benchmark loop, per-cell aggregation, and report rendering."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import time
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .backend import BackendConfig, BackendError, ChatGateway, build_provider
from .catalog import PromptCatalog
from .core import CATEGORY_LABELS, CATEGORY_ORDER, PERSPECTIVE_ORDER, Category, ChoiceLetter, MethodId, View
from .dataset import BenchmarkItem
from .m3cot import M3CoTAborted, M3CoTConfig
from .methods import MethodRunRecord, run_method


class BenchError(Exception):
    pass


class RaggedGrid(BenchError):
    """Raised when the record set does not cover every (item, run) exactly once."""


@dataclass(frozen=True)
class EvalRecord:
    item_id: str
    method: MethodId
    run_index: int
    predicted: Optional[ChoiceLetter]
    correct: bool
    call_count: int
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "method": self.method.value,
            "run_index": self.run_index,
            "predicted": self.predicted.value if self.predicted else None,
            "correct": self.correct,
            "call_count": self.call_count,
            "flags": list(self.flags),
        }

    @staticmethod
    def from_json(record: dict) -> "EvalRecord":
        return EvalRecord(
            item_id=record["item_id"],
            method=MethodId(record["method"]),
            run_index=record["run_index"],
            predicted=ChoiceLetter(record["predicted"]) if record["predicted"] else None,
            correct=record["correct"],
            call_count=record["call_count"],
            flags=tuple(record.get("flags", ())),
        )


@dataclass
class RunOutput:
    records: list[EvalRecord]
    method_records: dict[tuple[int, str], MethodRunRecord] = field(default_factory=dict)


GatewayOrFactory = Union[ChatGateway, Callable[[int], ChatGateway]]


def run_benchmark(
    items: Sequence[BenchmarkItem],
    method: MethodId,
    runs: int,
    backend: GatewayOrFactory,
    catalog: PromptCatalog,
    m3cot_config: Optional[M3CoTConfig] = None,
) -> RunOutput:
    if runs < 1:
        raise BenchError("runs must be >= 1")
    output = RunOutput(records=[])
    for run_index in range(runs):
        gateway = backend(run_index) if callable(backend) else backend
        for item in items:
            try:
                record = run_method(item, method, gateway, catalog, m3cot_config)
            except M3CoTAborted as exc:
                output.records.append(
                    EvalRecord(
                        item_id=item.id,
                        method=method,
                        run_index=run_index,
                        predicted=None,
                        correct=False,
                        call_count=len(exc.trace.get("calls", ())),
                        flags=(f"backend_error:{type(exc.cause).__name__}",),
                    )
                )
                continue
            except BackendError as exc:
                output.records.append(
                    EvalRecord(
                        item_id=item.id,
                        method=method,
                        run_index=run_index,
                        predicted=None,
                        correct=False,
                        call_count=0,
                        flags=(f"backend_error:{type(exc).__name__}",),
                    )
                )
                continue
            correct = record.final_answer is not None and (
                record.final_answer.index == item.answer_index
            )
            output.records.append(
                EvalRecord(
                    item_id=item.id,
                    method=method,
                    run_index=run_index,
                    predicted=record.final_answer,
                    correct=correct,
                    call_count=record.call_count,
                    flags=tuple(sorted(record.flags)),
                )
            )
            output.method_records[(run_index, item.id)] = record
    return output


# -- aggregation -------------------------------------------------------------


@dataclass
class CellStat:
    category: Category
    perspective: View
    n_items: int
    per_run: list[float]  # accuracy percent per run
    mean: float
    std: float


@dataclass
class AggregateReport:
    method: MethodId
    runs: int
    n_items: int
    cells: list[CellStat]  # category-major, Ego before Exo; empty cells omitted
    avg_per_run: list[float]
    avg_mean: float
    avg_std: float
    overall_per_run: list[float]  # item-level accuracy, every item weighted once
    overall_mean: float
    overall_std: float
    required_view_breakdown: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method.value,
            "runs": self.runs,
            "n_items": self.n_items,
            "cells": [
                {
                    "category": cell.category.value,
                    "perspective": cell.perspective.value,
                    "n_items": cell.n_items,
                    "per_run": cell.per_run,
                    "mean": cell.mean,
                    "std": cell.std,
                }
                for cell in self.cells
            ],
            "avg": {"per_run": self.avg_per_run, "mean": self.avg_mean, "std": self.avg_std},
            "overall": {
                "per_run": self.overall_per_run,
                "mean": self.overall_mean,
                "std": self.overall_std,
            },
            "required_view_breakdown": self.required_view_breakdown,
        }


def _std(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return statistics.stdev(values)


def aggregate(records: Sequence[EvalRecord], items: Sequence[BenchmarkItem]) -> AggregateReport:
    if not records:
        raise RaggedGrid("no records to aggregate")
    methods = {record.method for record in records}
    if len(methods) != 1:
        raise RaggedGrid(f"records mix methods: {sorted(m.value for m in methods)}")
    method = methods.pop()
    by_item = {item.id: item for item in items}
    runs = max(record.run_index for record in records) + 1
    seen: set[tuple[str, int]] = set()
    for record in records:
        if record.item_id not in by_item:
            raise RaggedGrid(f"record for unknown item {record.item_id!r}")
        key = (record.item_id, record.run_index)
        if key in seen:
            raise RaggedGrid(f"duplicate record for item {record.item_id!r} run {record.run_index}")
        seen.add(key)
    missing = [
        (item.id, run)
        for item in items
        for run in range(runs)
        if (item.id, run) not in seen
    ]
    if missing:
        raise RaggedGrid(f"missing records for {len(missing)} (item, run) pairs, first: {missing[0]}")

    correct: dict[tuple[str, int], bool] = {
        (record.item_id, record.run_index): record.correct for record in records
    }

    def run_accuracy(subset: Sequence[BenchmarkItem], run: int) -> float:
        hits = sum(1 for item in subset if correct[(item.id, run)])
        return 100.0 * hits / len(subset)

    cells: list[CellStat] = []
    cell_run_acc: list[list[float]] = []
    for category in CATEGORY_ORDER:
        for perspective in PERSPECTIVE_ORDER:
            subset = [
                item
                for item in items
                if item.category is category and item.question_perspective is perspective
            ]
            if not subset:
                continue
            per_run = [run_accuracy(subset, run) for run in range(runs)]
            cells.append(
                CellStat(
                    category=category,
                    perspective=perspective,
                    n_items=len(subset),
                    per_run=per_run,
                    mean=statistics.fmean(per_run),
                    std=_std(per_run),
                )
            )
            cell_run_acc.append(per_run)

    # Avg is the unweighted mean over cells, computed within each run.
    avg_per_run = [
        statistics.fmean(per_run[run] for per_run in cell_run_acc) for run in range(runs)
    ]
    overall_per_run = [run_accuracy(list(items), run) for run in range(runs)]

    breakdown: dict[str, dict] = {}
    tagged = [item for item in items if item.required_views is not None]
    if tagged:
        for bucket in ("Any", "Ego", "Exo", "Both"):
            subset = [item for item in tagged if item.required_views == bucket]
            if not subset:
                continue
            per_run = [run_accuracy(subset, run) for run in range(runs)]
            breakdown[bucket] = {
                "n_items": len(subset),
                "per_run": per_run,
                "mean": statistics.fmean(per_run),
                "std": _std(per_run),
            }

    return AggregateReport(
        method=method,
        runs=runs,
        n_items=len(items),
        cells=cells,
        avg_per_run=avg_per_run,
        avg_mean=statistics.fmean(avg_per_run),
        avg_std=_std(avg_per_run),
        overall_per_run=overall_per_run,
        overall_mean=statistics.fmean(overall_per_run),
        overall_std=_std(overall_per_run),
        required_view_breakdown=breakdown,
    )


# -- report rendering --------------------------------------------------------


class ReportFormat(Enum):
    MARKDOWN_TABLE = "MarkdownTable"
    CSV = "Csv"
    JSON = "Json"


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def render_report(report: AggregateReport, fmt: ReportFormat = ReportFormat.MARKDOWN_TABLE) -> str:
    if fmt is ReportFormat.JSON:
        return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    cell_map = {(cell.category, cell.perspective): cell for cell in report.cells}
    if fmt is ReportFormat.CSV:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["category", "perspective", "n_items", "mean", "std"])
        for category in CATEGORY_ORDER:
            for perspective in PERSPECTIVE_ORDER:
                cell = cell_map.get((category, perspective))
                if cell is None:
                    continue
                writer.writerow(
                    [
                        category.value,
                        perspective.value,
                        cell.n_items,
                        f"{cell.mean:.2f}",
                        f"{cell.std:.2f}",
                    ]
                )
        writer.writerow(["Avg", "", report.n_items, f"{report.avg_mean:.2f}", f"{report.avg_std:.2f}"])
        return buffer.getvalue()

    lines = [
        f"## {report.method.value} ({report.runs} run{'s' if report.runs != 1 else ''}, "
        f"{report.n_items} items)",
        "",
        "| Category | Ego | Exo |",
        "| --- | --- | --- |",
    ]
    for category in CATEGORY_ORDER:
        row = [CATEGORY_LABELS[category]]
        for perspective in PERSPECTIVE_ORDER:
            cell = cell_map.get((category, perspective))
            row.append(_fmt(cell.mean, cell.std) if cell else "")
        lines.append("| " + " | ".join(row) + " |")
    lines.append(f"| Avg | {_fmt(report.avg_mean, report.avg_std)} |  |")
    lines.append("")
    lines.append(f"Overall (item-weighted): {_fmt(report.overall_mean, report.overall_std)}")
    if report.required_view_breakdown:
        lines.append("")
        lines.append("| Required views | n | Accuracy |")
        lines.append("| --- | --- | --- |")
        for bucket, stats in report.required_view_breakdown.items():
            lines.append(
                f"| {bucket} | {stats['n_items']} | {_fmt(stats['mean'], stats['std'])} |"
            )
    lines.append("")
    return "\n".join(lines)


# -- end-to-end run directory ------------------------------------------------


@dataclass
class RunConfig:
    dataset: Path
    method: MethodId
    backend: BackendConfig
    runs: int = 1
    out_dir: Path = Path("runs")
    max_items: Optional[int] = None
    seed: Optional[int] = None  # overrides the backend seed when set
    m3cot: M3CoTConfig = field(default_factory=M3CoTConfig)
    save_traces: bool = True
    script: Optional[list] = None  # scripted-mock rules when provider is ScriptedMock

    def __post_init__(self) -> None:
        if self.max_items is not None and self.max_items < 1:
            raise BenchError("max_items must be >= 1 when present")

    def resolved_backend(self) -> BackendConfig:
        if self.seed is None:
            return self.backend
        return dc_replace(self.backend, seed=self.seed)

    def config_echo(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "method": self.method.value,
            "runs": self.runs,
            "max_items": self.max_items,
            "seed": self.seed,
            "backend": self.resolved_backend().summary(),
            "m3cot": {
                "max_iterations": self.m3cot.max_iterations,
                "consensus_threshold": self.m3cot.consensus_threshold,
            },
        }


def _config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.config_echo(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def execute_run(
    config: RunConfig,
    items: Sequence[BenchmarkItem],
    catalog: PromptCatalog,
    gateway_factory: Optional[Callable[[int], ChatGateway]] = None,
    out_dir: Optional[Path] = None,
) -> tuple[Path, AggregateReport]:
    if config.max_items is not None:
        items = list(items)[: config.max_items]
    if gateway_factory is None:
        def gateway_factory(run_index: int, _config=config) -> ChatGateway:
            backend_config = _config.resolved_backend()
            if backend_config.cache_dir is not None:
                # One cache namespace per run so repeated runs stay independent.
                backend_config = backend_config.with_cache_dir(
                    Path(backend_config.cache_dir) / f"run-{run_index}"
                )
            provider = build_provider(backend_config, script=_config.script)
            return ChatGateway(provider, backend_config)

    output = run_benchmark(
        items, config.method, config.runs, gateway_factory, catalog, config.m3cot
    )
    report = aggregate(output.records, items)

    if out_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out_dir = Path(config.out_dir) / f"{stamp}-{_config_hash(config)[:8]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config.config_echo(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_records(out_dir / "records.jsonl", output.records)
    (out_dir / "aggregate.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "report.md").write_text(render_report(report), encoding="utf-8")
    if config.save_traces:
        traces_dir = out_dir / "traces"
        traces_dir.mkdir(exist_ok=True)
        for (run_index, item_id), method_record in sorted(output.method_records.items()):
            if not method_record.trace:
                continue
            trace_path = traces_dir / f"{item_id}-run{run_index}.json"
            trace_path.write_text(
                json.dumps(method_record.trace, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
    return out_dir, report


def write_records(path: Path, records: Sequence[EvalRecord]) -> None:
    ordered = sorted(records, key=lambda record: (record.run_index, record.item_id))
    with path.open("w", encoding="utf-8") as handle:
        for record in ordered:
            handle.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_records(path: Path) -> list[EvalRecord]:
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(EvalRecord.from_json(json.loads(line)))
    return records
