"""Scene graphs for the controlled caption grammar.

Grammar (case-insensitive, trailing period allowed)::

    caption  := phrase (relation phrase)*
    phrase   := "a" COLOR SHAPE
    relation := "left of" | "right of" | "above" | "below"

Relations bind left-associatively between adjacent noun phrases, so
``A r1 B r2 C`` yields edges ``(A, r1, B)`` and ``(B, r2, C)``.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
RELATIONS = ("left of", "right of", "above", "below")

_REL_FIRST = {"left": "left of", "right": "right of", "above": "above", "below": "below"}
_WORD = re.compile(r"[a-z0-9'\-]+")


class ParseError(ValueError):
    """Caption does not conform to the grammar."""

    def __init__(self, message: str, token: str | None = None, position: int | None = None):
        super().__init__(message)
        self.token = token
        self.position = position


class SchemaError(ValueError):
    """A scene-graph document violates the schema or graph invariants."""


@dataclass(frozen=True)
class SceneObject:
    id: int
    category: str
    attributes: tuple[str, ...] = ()


@dataclass(frozen=True)
class Triple:
    subject: int
    predicate: str
    object: int


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[SceneObject, ...]
    edges: tuple[Triple, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _validate(self.objects, self.edges)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def to_document(self) -> dict:
        return {
            "objects": [{"category": o.category, "attributes": list(o.attributes)} for o in self.objects],
            "edges": [{"s": e.subject, "p": e.predicate, "o": e.object} for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), separators=(",", ":"))

    def permute(self, perm) -> SceneGraph:
        """Relabel objects: old index ``i`` moves to position ``perm[i]``."""
        n = len(self.objects)
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(n)):
            raise ValueError(f"{perm} is not a permutation of range({n})")
        slots: list[SceneObject | None] = [None] * n
        for old, new in enumerate(perm):
            o = self.objects[old]
            slots[new] = SceneObject(new, o.category, o.attributes)
        edges = tuple(Triple(perm[e.subject], e.predicate, perm[e.object]) for e in self.edges)
        return SceneGraph(tuple(slots), edges)

    def caption(self) -> str:
        """Render back to grammar text; only valid for chain graphs."""
        if any(e.subject != k or e.object != k + 1 for k, e in enumerate(self.edges)) \
                or len(self.edges) != len(self.objects) - 1:
            raise ValueError("caption() needs a chain graph (object k related to k+1)")
        parts = [_phrase(self.objects[0])]
        for e in self.edges:
            parts += [e.predicate, _phrase(self.objects[e.object])]
        return " ".join(parts)


def _phrase(o: SceneObject) -> str:
    return " ".join(["a", *o.attributes, o.category])


def _validate(objects, edges) -> None:
    if len(objects) < 1:
        raise SchemaError("scene graph needs at least one object")
    for k, o in enumerate(objects):
        if o.id != k:
            raise SchemaError(f"object ids must be dense from 0; got {o.id} at position {k}")
        if o.category not in SHAPES:
            raise SchemaError(f"unknown category {o.category!r}")
        for a in o.attributes:
            if a not in COLORS:
                raise SchemaError(f"unknown attribute {a!r}")
    n = len(objects)
    for e in edges:
        if e.predicate not in RELATIONS:
            raise SchemaError(f"unknown predicate {e.predicate!r}")
        for end in (e.subject, e.object):
            if not isinstance(end, int) or isinstance(end, bool) or not 0 <= end < n:
                raise SchemaError(f"edge endpoint {end!r} out of range for {n} objects")
        if e.subject == e.object:
            raise SchemaError(f"self-loop on object {e.subject}")


def words(caption: str) -> list[str]:
    return _WORD.findall(caption.lower())


def parse_caption(caption: str) -> SceneGraph:
    """Parse a grammar caption into a scene graph."""
    toks = words(caption)
    pos = 0
    objects: list[SceneObject] = []
    edges: list[Triple] = []

    def expect(pred, what):
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"expected {what} at end of caption", None, pos)
        tok = toks[pos]
        if not pred(tok):
            raise ParseError(f"expected {what}, got {tok!r} at token {pos}", tok, pos)
        pos += 1
        return tok

    def phrase():
        expect(lambda t: t == "a", "'a'")
        color = expect(lambda t: t in COLORS, "a color")
        shape = expect(lambda t: t in SHAPES, "a shape")
        objects.append(SceneObject(len(objects), shape, (color,)))

    phrase()
    while pos < len(toks):
        head = expect(lambda t: t in _REL_FIRST, "a relation")
        rel = _REL_FIRST[head]
        if rel.endswith(" of"):
            expect(lambda t: t == "of", "'of'")
        phrase()
        k = len(objects) - 1
        edges.append(Triple(k - 1, rel, k))
    return SceneGraph(tuple(objects), tuple(edges))


def load_scene_graph(document) -> SceneGraph:
    """Validate and build a graph from a JSON string or an already-decoded dict."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError("document must be an object")
    extra = set(document) - {"objects", "edges"}
    if extra:
        raise SchemaError(f"unexpected keys {sorted(extra)}")
    objs = document.get("objects")
    edges = document.get("edges", [])
    if not isinstance(objs, list) or not isinstance(edges, list):
        raise SchemaError("'objects' and 'edges' must be arrays")
    objects = []
    for k, o in enumerate(objs):
        if not isinstance(o, dict) or not isinstance(o.get("category"), str):
            raise SchemaError(f"object {k}: needs a string 'category'")
        attrs = o.get("attributes", [])
        if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
            raise SchemaError(f"object {k}: 'attributes' must be a list of strings")
        objects.append(SceneObject(k, o["category"], tuple(attrs)))
    triples = []
    for k, e in enumerate(edges):
        if not isinstance(e, dict) or set(e) != {"s", "p", "o"}:
            raise SchemaError(f"edge {k}: needs exactly keys s, p, o")
        if not isinstance(e["p"], str):
            raise SchemaError(f"edge {k}: predicate must be a string")
        triples.append(Triple(e["s"], e["p"], e["o"]))
    return SceneGraph(tuple(objects), tuple(triples))


def isomorphic(a: SceneGraph, b: SceneGraph) -> bool:
    """Brute-force isomorphism test; intended for the small graphs used here."""
    if a.num_objects != b.num_objects or a.num_edges != b.num_edges:
        return False
    target = {(e.subject, e.predicate, e.object) for e in b.edges}
    if len(target) != b.num_edges:
        target_list = sorted((e.subject, e.predicate, e.object) for e in b.edges)
    else:
        target_list = None
    for perm in itertools.permutations(range(a.num_objects)):
        if any((a.objects[i].category, a.objects[i].attributes)
               != (b.objects[perm[i]].category, b.objects[perm[i]].attributes)
               for i in range(a.num_objects)):
            continue
        mapped = [(perm[e.subject], e.predicate, perm[e.object]) for e in a.edges]
        if target_list is None:
            if set(mapped) == target:
                return True
        elif sorted(mapped) == target_list:
            return True
    return False
