"""Synthetic captioned scenes: colored shapes on a 2x2 layout grid.

The caption fixes the picture: each relation moves the next object one cell
(``left of`` puts it one column to the right, ``above`` one row down, and so
on), then the layout is shifted to the top-left corner.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scenegraph import COLORS, RELATIONS, SHAPES, SceneGraph, SceneObject, Triple, load_scene_graph

GRID = 2
RESOLUTIONS = (32, 16, 8)
SUPERSAMPLE = 4
MAX_OBJECTS = 3

RGB = {"red": (1.0, -1.0, -1.0), "green": (-1.0, 1.0, -1.0), "blue": (-1.0, -1.0, 1.0)}
BACKGROUND = -1.0

_STEP = {"left of": (0, 1), "right of": (0, -1), "above": (1, 0), "below": (-1, 0)}
NUM_CLASSES = len(SHAPES) * len(COLORS) * (len(RELATIONS) + 1)


@dataclass
class SceneSpec:
    shapes: list[str]
    colors: list[str]
    cells: list[tuple[int, int]]
    relations: list[tuple[int, str, int]] = field(default_factory=list)

    def graph(self) -> SceneGraph:
        objs = tuple(SceneObject(i, s, (c,)) for i, (s, c) in enumerate(zip(self.shapes, self.colors)))
        return SceneGraph(objs, tuple(Triple(a, p, b) for a, p, b in self.relations))


@dataclass
class Sample:
    images: dict[int, np.ndarray]   # resolution -> [r, r, 3] in [-1, 1]
    caption: str
    graph: SceneGraph
    spec: SceneSpec
    label: int

    @property
    def image(self) -> np.ndarray:
        return self.images[max(self.images)]


def layout(graph: SceneGraph) -> list[tuple[int, int]]:
    """Grid cell (row, col) of every object, or ``ValueError`` if the relations don't fit."""
    n = graph.num_objects
    pos: list[tuple[int, int] | None] = [None] * n
    pos[0] = (0, 0)
    changed = True
    while changed:
        changed = False
        for e in graph.edges:
            dr, dc = _STEP[e.predicate]
            s, o = pos[e.subject], pos[e.object]
            if s is not None and o is None:
                pos[e.object] = (s[0] + dr, s[1] + dc)
                changed = True
            elif o is not None and s is None:
                pos[e.subject] = (o[0] - dr, o[1] - dc)
                changed = True
    if any(p is None for p in pos):
        raise ValueError("scene graph is not connected")
    r0 = min(p[0] for p in pos)
    c0 = min(p[1] for p in pos)
    cells = [(p[0] - r0, p[1] - c0) for p in pos]
    if any(r >= GRID or c >= GRID for r, c in cells):
        raise ValueError("layout does not fit the 2x2 grid")
    if len(set(cells)) != n:
        raise ValueError("two objects share a cell")
    for e in graph.edges:
        dr, dc = _STEP[e.predicate]
        s, o = cells[e.subject], cells[e.object]
        if (o[0] - s[0], o[1] - s[1]) != (dr, dc):
            raise ValueError(f"relation {e} contradicts the layout")
    return cells


def class_label(graph: SceneGraph) -> int:
    """Class of (first shape, first color, first relation or none)."""
    o = graph.objects[0]
    rel = RELATIONS.index(graph.edges[0].predicate) + 1 if graph.edges else 0
    return (SHAPES.index(o.category) * len(COLORS) + COLORS.index(o.attributes[0])) * (len(RELATIONS) + 1) + rel


def _coverage(shape: str, size: int, cy: float, cx: float) -> np.ndarray:
    """Fractional pixel coverage of one shape at ``size`` px, via supersampling."""
    hi = size * SUPERSAMPLE
    yy, xx = np.mgrid[0:hi, 0:hi]
    y = (yy + 0.5) / SUPERSAMPLE
    x = (xx + 0.5) / SUPERSAMPLE
    cell = size / GRID
    r = 0.36 * cell
    if shape == "circle":
        inside = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    elif shape == "square":
        h = 0.8 * r
        inside = (np.abs(y - cy) <= h) & (np.abs(x - cx) <= h)
    elif shape == "triangle":
        top, bottom = cy - r, cy + 0.8 * r
        half = (y - top) / (bottom - top) * r
        inside = (y >= top) & (y <= bottom) & (np.abs(x - cx) <= half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render(spec: SceneSpec, size: int = 32) -> np.ndarray:
    """Anti-aliased ``[size, size, 3]`` image in [-1, 1]."""
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
    cell = size / GRID
    for shape, color, (row, col) in zip(spec.shapes, spec.colors, spec.cells):
        cov = _coverage(shape, size, (row + 0.5) * cell, (col + 0.5) * cell)[..., None]
        img = img * (1.0 - cov) + np.asarray(RGB[color]) * cov
    return img.astype(np.float32)


def box_downsample(img: np.ndarray, factor: int = 2) -> np.ndarray:
    H, W, C = img.shape
    return img.reshape(H // factor, factor, W // factor, factor, C).mean(axis=(1, 3), dtype=np.float64).astype(img.dtype)


def ladder(img: np.ndarray, resolutions=RESOLUTIONS) -> dict[int, np.ndarray]:
    out = {img.shape[0]: img}
    cur = img
    for r in sorted(resolutions, reverse=True):
        while cur.shape[0] > r:
            cur = box_downsample(cur, 2)
        out[r] = cur
    return {r: out[r] for r in resolutions}


def spec_from_graph(graph: SceneGraph) -> SceneSpec:
    return SceneSpec(
        [o.category for o in graph.objects],
        [o.attributes[0] for o in graph.objects],
        layout(graph),
        [(e.subject, e.predicate, e.object) for e in graph.edges],
    )


def make_sample(graph: SceneGraph, resolutions=RESOLUTIONS) -> Sample:
    spec = spec_from_graph(graph)
    img = render(spec, max(resolutions))
    return Sample(ladder(img, resolutions), graph.caption(), graph, spec, class_label(graph))


def random_graph(rng: np.random.Generator, max_objects: int = MAX_OBJECTS) -> SceneGraph:
    while True:
        n = int(rng.integers(1, max_objects + 1))
        objs = tuple(SceneObject(i, SHAPES[rng.integers(len(SHAPES))], (COLORS[rng.integers(len(COLORS))],))
                     for i in range(n))
        edges = tuple(Triple(i, RELATIONS[rng.integers(len(RELATIONS))], i + 1) for i in range(n - 1))
        g = SceneGraph(objs, edges)
        try:
            layout(g)
        except ValueError:
            continue
        return g


def generate(seed: int, n: int, resolutions=RESOLUTIONS, max_objects: int = MAX_OBJECTS) -> list[Sample]:
    """``n`` samples, fully determined by ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    return [make_sample(random_graph(rng, max_objects), resolutions) for _ in range(n)]


def all_graphs(max_objects: int = MAX_OBJECTS) -> list[SceneGraph]:
    """Every chain caption of the grammar whose layout fits the grid."""
    out = []
    for n in range(1, max_objects + 1):
        for objs in itertools.product(itertools.product(SHAPES, COLORS), repeat=n):
            for rels in itertools.product(RELATIONS, repeat=n - 1):
                g = SceneGraph(tuple(SceneObject(i, s, (c,)) for i, (s, c) in enumerate(objs)),
                               tuple(Triple(i, r, i + 1) for i, r in enumerate(rels)))
                try:
                    layout(g)
                except ValueError:
                    continue
                out.append(g)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 with ``round(127.5 * (x + 1))``."""
    return np.clip(np.round(127.5 * (np.asarray(img, dtype=np.float64) + 1.0)), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_dataset(root, samples: list[Sample], seed: int | None = None) -> Path:
    """Write PNGs for every resolution plus ``manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        paths = {}
        for r, img in sorted(s.images.items()):
            rel = f"images/{i:05d}_{r}.png"
            save_png(root / rel, img)
            paths[str(r)] = rel
        rows.append({"index": i, "caption": s.caption, "graph": s.graph.to_document(),
                     "label": s.label, "images": paths})
    manifest = {"seed": seed, "count": len(samples), "resolutions": sorted(samples[0].images),
                "samples": rows}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return root


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for row in manifest["samples"]:
        graph = load_scene_graph(row["graph"])
        images = {int(r): load_png(root / p) for r, p in row["images"].items()}
        out.append(Sample(images, row["caption"], graph, spec_from_graph(graph), row["label"]))
    return out
