from __future__ import annotations

import json
import shutil

import pytest

from e3vqa.catalog import (
    CatalogError,
    ExtraBinding,
    GoldenMissing,
    MissingBinding,
    PromptCatalog,
    TemplateKey,
    TemplateMethod,
    TypeMismatch,
    UnknownKey,
    lettered_options,
    question_prompt,
    system_text,
)
from e3vqa.chat import ImageRef, ImageSource
from e3vqa.core import Category, View

DEFAULT_Q = TemplateKey(TemplateMethod.DEFAULT, "question", view=View.BOTH)
SYSTEM = TemplateKey(TemplateMethod.DEFAULT, "system")


def _refs():
    a = ImageRef(ImageSource.URI, "ego://frame", "image/png")
    b = ImageRef(ImageSource.URI, "exo://frame", "image/png")
    return a, b


def test_default_catalog_loads_with_goldens(catalog):
    assert len(catalog) == 39
    report = catalog.golden_check()
    assert report.ok
    assert report.checked == 39


def test_every_key_is_distinct_and_looks_up(catalog):
    keys = catalog.keys()
    assert len(set(keys)) == len(keys)
    for key in keys:
        assert catalog.lookup(key).key == key


def test_unknown_key(catalog):
    with pytest.raises(UnknownKey, match="Default/party/NA/NA/NA"):
        catalog.lookup(TemplateKey(TemplateMethod.DEFAULT, "party"))


def test_render_splits_on_images(catalog):
    ego, exo = _refs()
    parts = catalog.render(DEFAULT_Q, {"EgoImage": ego, "ExoImage": exo, "Question": "Q?"})
    kinds = [p.kind for p in parts]
    assert kinds.count("Image") == 2
    images = [p.image for p in parts if p.kind == "Image"]
    assert images[0].value == "ego://frame"  # ego presented before exo
    assert images[1].value == "exo://frame"
    texts = [p.text for p in parts if p.kind == "Text"]
    assert any("Q?" in t for t in texts)
    assert all(t == t.strip() and t for t in texts)  # edges trimmed, no empty runs


def test_render_binding_coverage_is_exact(catalog):
    ego, exo = _refs()
    with pytest.raises(MissingBinding, match="Question"):
        catalog.render(DEFAULT_Q, {"EgoImage": ego, "ExoImage": exo})
    with pytest.raises(ExtraBinding, match="Stray"):
        catalog.render(
            DEFAULT_Q,
            {"EgoImage": ego, "ExoImage": exo, "Question": "Q?", "Stray": "nope"},
        )


def test_render_binding_types(catalog):
    ego, exo = _refs()
    with pytest.raises(TypeMismatch):
        catalog.render(DEFAULT_Q, {"EgoImage": "a-string", "ExoImage": exo, "Question": "Q?"})
    with pytest.raises(TypeMismatch):
        catalog.render(DEFAULT_Q, {"EgoImage": ego, "ExoImage": exo, "Question": ego})


def test_render_text_rejects_image_templates(catalog):
    ego, exo = _refs()
    with pytest.raises(TypeMismatch, match="text-only"):
        catalog.render_text(DEFAULT_Q, {"EgoImage": ego, "ExoImage": exo, "Question": "Q?"})


def test_system_prompt_is_sequential_two_view(catalog):
    text = system_text(catalog)
    assert text == catalog.render_text(SYSTEM)
    assert "first image" in text
    assert "second image" in text
    assert "same event at the same time" in text


def test_category_prompts_exist_for_all_cells(catalog):
    for view in (View.EGO, View.EXO):
        for category in (
            Category.POSE_ACTION,
            Category.OBJECT_ATTRIBUTE,
            Category.NUMERICAL,
            Category.SPATIAL,
        ):
            key = TemplateKey(TemplateMethod.FORGE_STEP1, "category", view=view, category=category)
            assert catalog.lookup(key).body.strip()


def test_cross_refine_template_carries_both_graphs(catalog):
    key = TemplateKey(TemplateMethod.M3COT, "sg_cross_refine", view=View.BOTH)
    template = catalog.lookup(key)
    assert {"SceneGraphA", "SceneGraphB"} <= template.placeholders


def test_question_prompt_shape():
    text = question_prompt("Where am I?", ["desk", "park", "car", "roof"])
    lines = text.split("\n")
    assert lines[0] == "Where am I?"
    assert lines[1:5] == ["A) desk", "B) park", "C) car", "D) roof"]
    assert lines[5] == "Only one option is correct."
    assert lines[6] == "Present the answer in the form X)."
    with pytest.raises(ValueError):
        question_prompt("Q?", ["just", "three", "options"])


def test_lettered_options_has_no_suffix():
    text = lettered_options("Q?", ["w", "x", "y", "z"])
    assert text == "Q?\nA) w\nB) x\nC) y\nD) z"
    with pytest.raises(ValueError):
        lettered_options("Q?", ["a", "b", "c", "d", "e"])


# -- load-time validation ----------------------------------------------------


def _copy_templates(tmp_path):
    import e3vqa

    src = next(iter(e3vqa.__path__))
    shutil.copytree(f"{src}/templates", tmp_path / "templates")
    shutil.copytree(f"{src}/templates_golden", tmp_path / "golden")
    return tmp_path / "templates", tmp_path / "golden"


def test_golden_mismatch_reports_offset(tmp_path):
    template_dir, golden_dir = _copy_templates(tmp_path)
    target = template_dir / "default_question.txt"
    body = target.read_text(encoding="utf-8")
    target.write_text(body.replace("Question", "Quest1on", 1), encoding="utf-8")
    catalog = PromptCatalog.load(template_dir, golden_dir)
    report = catalog.golden_check()
    assert not report.ok
    assert len(report.mismatches) == 1
    mismatch = report.mismatches[0]
    assert mismatch.file_name == "default_question.txt"
    assert mismatch.first_diff_offset == body.encode().index(b"Question") + len("Quest")


def test_golden_check_without_goldens(tmp_path):
    template_dir, _ = _copy_templates(tmp_path)
    with pytest.raises(GoldenMissing):
        PromptCatalog.load(template_dir).golden_check()


def test_missing_golden_file(tmp_path):
    template_dir, golden_dir = _copy_templates(tmp_path)
    (golden_dir / "default_question.txt").unlink()
    with pytest.raises(GoldenMissing, match="default_question.txt"):
        PromptCatalog.load(template_dir, golden_dir).golden_check()


def test_unknown_placeholder_rejected_at_load(tmp_path):
    template_dir, golden_dir = _copy_templates(tmp_path)
    target = template_dir / "default_question.txt"
    target.write_text(target.read_text() + "\n{Mystery}\n", encoding="utf-8")
    with pytest.raises(CatalogError, match="Mystery"):
        PromptCatalog.load(template_dir, golden_dir)


def test_duplicate_manifest_entry_rejected(tmp_path):
    template_dir, golden_dir = _copy_templates(tmp_path)
    manifest_path = template_dir / "manifest.json"
    rows = json.loads(manifest_path.read_text())
    rows.append(dict(rows[0]))
    manifest_path.write_text(json.dumps(rows), encoding="utf-8")
    with pytest.raises(CatalogError, match="duplicate"):
        PromptCatalog.load(template_dir, golden_dir)
