"""Toy dataset generator: determinism, exact masks, style structure."""

import json
from pathlib import Path

import numpy as np
import pytest

from cropseg.datamodel import load_manifest
from cropseg.toydata import (
    GREEN_LOW,
    STRAW,
    ToyDomainSpec,
    default_toy_specs,
    generate_toy_manifest,
    mask_from_shapes,
)


def test_round_trip_through_manifest(tiny_manifest):
    assert len(tiny_manifest.domains) == 4
    for desc in tiny_manifest.domains:
        assert desc.sample_count == 8
        assert len(tiny_manifest.index[desc.name]) == 8
    sample = tiny_manifest.dataset("Meadow").load(0)
    assert sample.image.shape == (48, 48, 3)
    assert set(np.unique(sample.mask)) <= {0, 1}


def test_regeneration_is_byte_identical(tmp_path):
    specs = default_toy_specs(samples=3, image_size=(48, 48))
    generate_toy_manifest(specs, tmp_path / "a", seed=5)
    generate_toy_manifest(specs, tmp_path / "b", seed=5)
    files_a = sorted((tmp_path / "a").rglob("*.png"))
    files_b = sorted((tmp_path / "b").rglob("*.png"))
    assert len(files_a) == 2 * 3 * 4
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_different_seed_changes_content(tmp_path):
    specs = default_toy_specs(samples=2, image_size=(48, 48))
    generate_toy_manifest(specs, tmp_path / "a", seed=1)
    generate_toy_manifest(specs, tmp_path / "b", seed=2)
    a = (tmp_path / "a/Meadow/images/0000.png").read_bytes()
    b = (tmp_path / "b/Meadow/images/0000.png").read_bytes()
    assert a != b


def test_masks_match_stored_geometry(tiny_manifest):
    root = Path(tiny_manifest.root)
    for desc in tiny_manifest.domains:
        params = json.loads((root / desc.name / "gen_params.json").read_text())
        w, h = params["image_size"]
        ds = tiny_manifest.dataset(desc.name)
        for record in params["samples"]:
            stored = ds.load(record["index"]).mask
            recomputed = mask_from_shapes(record["shapes"], w, h)
            assert np.array_equal(stored, recomputed), (desc.name, record["index"])


def test_foreground_fraction_band(tiny_manifest):
    for desc in tiny_manifest.domains:
        ds = tiny_manifest.dataset(desc.name)
        for i in range(len(ds)):
            fraction = ds.load(i).mask.mean()
            assert 0.05 <= fraction <= 0.6, (desc.name, i, fraction)


def test_default_specs_carry_color_confound():
    specs = {s.name: s for s in default_toy_specs()}
    # the confound domain wears the others' clutter color and vice versa
    assert specs["Strawfield"].foreground_palette == STRAW
    assert specs["Meadow"].clutter_palette == STRAW
    assert specs["Strawfield"].clutter_palette == GREEN_LOW
    families = {s.shape_family for s in specs.values()}
    assert families == {"blob", "row_of_blobs", "tall_column"}


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyDomainSpec("X", "hexagon", STRAW, STRAW, STRAW).validate()
    with pytest.raises(ValueError):
        ToyDomainSpec("X", "blob", STRAW, STRAW, STRAW, samples=0).validate()


def test_generated_images_are_informative(tiny_manifest):
    # foreground and background should be separable in color space on the
    # source domains (sanity for the training tests downstream)
    ds = tiny_manifest.dataset("Meadow")
    sample = ds.load(0)
    fg = sample.image[sample.mask == 1].mean(axis=0)
    bg = sample.image[sample.mask == 0].mean(axis=0)
    assert np.abs(fg - bg).max() > 0.05
