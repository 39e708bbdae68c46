"""Shared non-fixture helpers for the test suite."""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

from e3vqa.backend import BackendConfig, ChatGateway, ScriptedBackend
from e3vqa.chat import ImageRef, ImageSource
from e3vqa.core import CATEGORY_ORDER, Category, View
from e3vqa.dataset import BenchmarkItem


def tiny_png(rgb: tuple[int, int, int] = (200, 30, 30)) -> bytes:
    """A valid 1x1 PNG; distinct colors give distinct bytes and digests."""

    def chunk(tag: bytes, data: bytes) -> bytes:
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", 1, 1, 8, 2, 0, 0, 0)
    idat = zlib.compress(b"\x00" + bytes(rgb))
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


def make_item(
    images: tuple[ImageRef, ImageRef],
    item_id: str = "item-000",
    category: Category = Category.POSE_ACTION,
    perspective: View = View.EGO,
    answer_index: int = 0,
) -> BenchmarkItem:
    return BenchmarkItem(
        id=item_id,
        category=category,
        question_perspective=perspective,
        ego_image=images[0],
        exo_image=images[1],
        question="What am I doing?",
        options=("writing", "sleeping", "running", "cooking"),
        answer_index=answer_index,
    )


def make_grid_items(
    images: tuple[ImageRef, ImageRef], per_cell: int = 2, answer_index: int = 0
) -> list[BenchmarkItem]:
    """Items grouped cell by cell: 4 categories x Ego/Exo, per_cell each."""
    items = []
    for category in CATEGORY_ORDER:
        for perspective in (View.EGO, View.EXO):
            for i in range(per_cell):
                items.append(
                    make_item(
                        images,
                        item_id=f"{category.value.lower()}-{perspective.value.lower()}-{i:02d}",
                        category=category,
                        perspective=perspective,
                        answer_index=answer_index,
                    )
                )
    return items


def scripted_gateway(script, **config_overrides) -> tuple[ScriptedBackend, ChatGateway]:
    backend = ScriptedBackend(script)
    config = BackendConfig(**config_overrides)
    return backend, ChatGateway(backend, config)


def write_benchmark_file(path: Path, items: list[BenchmarkItem]) -> Path:
    from e3vqa.dataset import item_to_record, write_manifest

    with path.open("w", encoding="utf-8") as handle:
        for bench_item in items:
            handle.write(json.dumps(item_to_record(bench_item, path.parent)) + "\n")
    write_manifest(path, ".")
    return path
