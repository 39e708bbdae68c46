from __future__ import annotations

from pathlib import Path

import pytest

from e3vqa.catalog import PromptCatalog
from e3vqa.chat import ImageRef, ImageSource
from e3vqa.dataset import BenchmarkItem

from helpers import make_grid_items, make_item, tiny_png


@pytest.fixture(scope="session")
def catalog() -> PromptCatalog:
    return PromptCatalog.load_default()


@pytest.fixture()
def image_pair(tmp_path: Path) -> tuple[ImageRef, ImageRef]:
    ego_path = tmp_path / "ego.png"
    exo_path = tmp_path / "exo.png"
    ego_path.write_bytes(tiny_png((255, 0, 0)))
    exo_path.write_bytes(tiny_png((0, 0, 255)))
    return (
        ImageRef(ImageSource.LOCAL_PATH, str(ego_path), "image/png"),
        ImageRef(ImageSource.LOCAL_PATH, str(exo_path), "image/png"),
    )


@pytest.fixture()
def item(image_pair) -> BenchmarkItem:
    return make_item(image_pair)


@pytest.fixture()
def grid_items(image_pair) -> list[BenchmarkItem]:
    return make_grid_items(image_pair)
