import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdiff import datagen
from sgdiff.datagen import (NUM_CLASSES, RGB, all_graphs, box_downsample, from_uint8, generate, layout,
                            load_dataset, load_png, make_sample, render, save_dataset, save_png, to_uint8)
from sgdiff.scenegraph import RELATIONS, SceneGraph, SceneObject, Triple, parse_caption


def _pair(rel, a=("circle", "red"), b=("square", "blue")):
    return SceneGraph((SceneObject(0, a[0], (a[1],)), SceneObject(1, b[0], (b[1],))), (Triple(0, rel, 1),))


def _centroid(img, color):
    target = np.asarray(RGB[color])
    mask = np.all(np.abs(img - target) < 0.2, axis=-1)
    rows, cols = np.nonzero(mask)
    return rows.mean(), cols.mean()


def test_generation_is_deterministic():
    a, b = generate(3, 20), generate(3, 20)
    assert [s.caption for s in a] == [s.caption for s in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert [s.caption for s in generate(4, 20)] != [s.caption for s in a]


def test_captions_parse_back_to_their_graphs():
    for s in generate(0, 100):
        assert parse_caption(s.caption) == s.graph
        assert 0 <= s.label < NUM_CLASSES
        assert sorted(s.images) == [8, 16, 32]
        for r, img in s.images.items():
            assert img.shape == (r, r, 3) and img.min() >= -1 and img.max() <= 1


@pytest.mark.parametrize("rel", RELATIONS)
def test_relations_place_objects(rel):
    img = make_sample(_pair(rel)).image
    (ry, rx), (by, bx) = _centroid(img, "red"), _centroid(img, "blue")
    if rel == "left of":
        assert rx < bx
    elif rel == "right of":
        assert rx > bx
    elif rel == "above":
        assert ry < by
    else:
        assert ry > by


def test_single_object_sits_top_left():
    g = SceneGraph((SceneObject(0, "circle", ("green",)),), ())
    assert layout(g) == [(0, 0)]
    cy, cx = _centroid(render(datagen.spec_from_graph(g)), "green")
    assert cy < 16 and cx < 16


def test_contradictory_layout_rejected():
    objs = tuple(SceneObject(i, "circle", ("red",)) for i in range(3))
    g = SceneGraph(objs, (Triple(0, "left of", 1), Triple(1, "right of", 2)))
    with pytest.raises(ValueError):
        layout(g)


def test_closed_world_enumeration():
    graphs = all_graphs()
    assert len({g.caption() for g in graphs}) == len(graphs)
    assert all(len(g.objects) <= 3 for g in graphs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_box_downsample_conserves_mean(seed):
    img = np.random.default_rng(seed).uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    small = box_downsample(img)
    assert small.shape == (8, 8, 3)
    np.testing.assert_allclose(small.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-6)


def test_uint8_mapping():
    x = np.array([-1.0, 0.0, 1.0, 2.0, -3.0])
    assert to_uint8(x).tolist() == [0, 128, 255, 255, 0]
    assert np.abs(from_uint8(to_uint8(x[:3])) - x[:3]).max() <= 1 / 127.5


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3))
    save_png(tmp_path / "a.png", img)
    back = load_png(tmp_path / "a.png")
    assert np.array_equal(to_uint8(back), to_uint8(img))


def test_dataset_round_trip(tmp_path):
    samples = generate(1, 5)
    save_dataset(tmp_path / "d", samples, seed=1)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["count"] == 5 and manifest["seed"] == 1
    loaded = load_dataset(tmp_path / "d")
    for a, b in zip(samples, loaded):
        assert a.caption == b.caption and a.graph == b.graph and a.label == b.label
        for r in a.images:
            assert np.array_equal(to_uint8(a.images[r]), to_uint8(b.images[r]))


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate(0, 0)
