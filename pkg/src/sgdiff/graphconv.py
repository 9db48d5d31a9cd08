"""Graph triple convolution over scene graphs.

Each edge ``(i, r, j)`` is run through one shared candidate MLP on
``[v_i; v_r; v_j]``; the output splits into a subject candidate, the new
relation vector and an object candidate. A node's new vector is the mean of
all subject candidates where it is the subject and object candidates where it
is the object. Nodes with no edges go through a separate linear map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Adam, Embedding, Linear, Module, ModuleList
from .scenegraph import COLORS, RELATIONS, SHAPES, SceneGraph
from .tensor import Tensor


@dataclass
class GraphBatch:
    """Disjoint union of several scene graphs with index arrays."""

    categories: np.ndarray      # [n] category ids
    attributes: list[list[int]]  # per node attribute ids
    predicates: np.ndarray      # [E] predicate ids
    subjects: np.ndarray        # [E] global node index
    objects: np.ndarray         # [E] global node index
    node_counts: list[int]
    edge_counts: list[int]

    @property
    def num_nodes(self) -> int:
        return int(self.categories.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.predicates.shape[0])

    @classmethod
    def from_graphs(cls, graphs: Sequence[SceneGraph]) -> GraphBatch:
        cats, attrs, preds, subs, objs = [], [], [], [], []
        ncount, ecount = [], []
        offset = 0
        for g in graphs:
            for o in g.objects:
                try:
                    cats.append(SHAPES.index(o.category))
                    attrs.append([COLORS.index(a) for a in o.attributes])
                except ValueError as exc:
                    raise KeyError(f"out-of-vocabulary symbol in object {o}") from exc
            for e in g.edges:
                if e.predicate not in RELATIONS:
                    raise KeyError(f"out-of-vocabulary predicate {e.predicate!r}")
                preds.append(RELATIONS.index(e.predicate))
                subs.append(offset + e.subject)
                objs.append(offset + e.object)
            ncount.append(g.num_objects)
            ecount.append(g.num_edges)
            offset += g.num_objects
        as_int = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
        return cls(as_int(cats), attrs, as_int(preds), as_int(subs), as_int(objs), ncount, ecount)


@dataclass
class GraphEmbeddings:
    object_vecs: Tensor    # [n, D_out]
    relation_vecs: Tensor  # [E, D_out]


class GraphEmbeddingTables(Module):
    def __init__(self, d_in: int, rng: np.random.Generator,
                 num_categories: int = len(SHAPES), num_attributes: int = len(COLORS),
                 num_predicates: int = len(RELATIONS)):
        self.category = Embedding(num_categories, d_in, rng)
        self.attribute = Embedding(num_attributes, d_in, rng)
        self.predicate = Embedding(num_predicates, d_in, rng)
        self.d_in = d_in


def init_vectors(batch: GraphBatch, tables: GraphEmbeddingTables) -> tuple[Tensor, Tensor]:
    """Node vector = category row + mean of attribute rows; edge vector = predicate row."""
    nodes = tables.category(batch.categories)
    n = batch.num_nodes
    n_attr = tables.attribute.weight.shape[0]
    # attribute averaging as a fixed [n, num_attributes] weight matrix
    avg = np.zeros((n, n_attr), dtype=nodes.dtype)
    for k, ids in enumerate(batch.attributes):
        for a in ids:
            avg[k, a] += 1.0 / len(ids)
    if any(batch.attributes):
        nodes = nodes + T.matmul(T.Tensor(avg), tables.attribute.weight)
    edges = tables.predicate(batch.predicates)
    return nodes, edges


def pooling_matrix(subjects: np.ndarray, objects: np.ndarray, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooling weights over ``[subject candidates; object candidates]``.

    Returns ``(P, isolated)`` with ``P`` of shape ``[n, 2E]`` and ``isolated`` a
    ``[n, 1]`` indicator of nodes that touch no edge.
    """
    E = subjects.shape[0]
    P = np.zeros((n, 2 * E), dtype=dtype)
    P[subjects, np.arange(E)] += 1.0
    P[objects, E + np.arange(E)] += 1.0
    counts = P.sum(axis=1, keepdims=True)
    P = P / np.where(counts > 0, counts, 1.0)
    return P, (counts == 0).astype(dtype)


class GraphConvLayer(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or max(d_in, d_out) * 2
        self.net = MLP(3 * d_in, hidden, 3 * d_out, rng)
        self.isolated = Linear(d_in, d_out, rng)
        self.d_in, self.d_out = d_in, d_out

    def candidate(self, triples: Tensor) -> Tensor:
        return self.net(triples)

    def forward(self, node_vecs: Tensor, edge_vecs: Tensor, subjects: np.ndarray,
                objects: np.ndarray) -> tuple[Tensor, Tensor]:
        if node_vecs.shape[-1] != self.d_in or edge_vecs.shape[-1] != self.d_in:
            raise ValueError(
                f"expected vectors of width {self.d_in}, got {node_vecs.shape[-1]} / {edge_vecs.shape[-1]}")
        n = node_vecs.shape[0]
        triples = T.concat([T.take_rows(node_vecs, subjects), edge_vecs,
                            T.take_rows(node_vecs, objects)], axis=-1)
        s_c, p_c, o_c = T.split(self.candidate(triples), [self.d_out] * 3, axis=-1)
        P, isolated = pooling_matrix(subjects, objects, n, node_vecs.dtype)
        pooled = T.matmul(T.Tensor(P), T.concat([s_c, o_c], axis=0))
        if isolated.any():
            pooled = pooled + self.isolated(node_vecs) * isolated
        return pooled, p_c


def layer_forward(layer: GraphConvLayer, graph: SceneGraph | GraphBatch, node_vecs: Tensor,
                  edge_vecs: Tensor) -> tuple[Tensor, Tensor]:
    batch = graph if isinstance(graph, GraphBatch) else GraphBatch.from_graphs([graph])
    return layer(node_vecs, edge_vecs, batch.subjects, batch.objects)


class GraphNet(Module):
    """Embedding tables plus ``m`` stacked graph convolution layers."""

    def __init__(self, d_in: int = 64, d_out: int = 64, n_layers: int = 2,
                 rng: np.random.Generator | None = None, hidden: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tables = GraphEmbeddingTables(d_in, rng)
        dims = [d_in] + [d_out] * n_layers
        self.layers = ModuleList(GraphConvLayer(dims[k], dims[k + 1], rng, hidden) for k in range(n_layers))
        self.d_out = dims[-1]

    def forward(self, graphs) -> GraphEmbeddings:
        return graph_embed(graphs, self.tables, list(self.layers))


def graph_embed(graphs, tables: GraphEmbeddingTables, layers: Sequence[GraphConvLayer]) -> GraphEmbeddings:
    """Initial vectors followed by every layer in order."""
    if isinstance(graphs, SceneGraph):
        graphs = [graphs]
    batch = graphs if isinstance(graphs, GraphBatch) else GraphBatch.from_graphs(graphs)
    d = tables.d_in
    for k, layer in enumerate(layers):
        if layer.d_in != d:
            raise ValueError(f"layer {k} expects width {layer.d_in}, previous width is {d}")
        d = layer.d_out
    nodes, edges = init_vectors(batch, tables)
    for layer in layers:
        nodes, edges = layer(nodes, edges, batch.subjects, batch.objects)
    return GraphEmbeddings(nodes, edges)


class _AutoencoderHeads(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.category = Linear(d, len(SHAPES), rng)
        self.attribute = Linear(d, len(COLORS), rng)
        self.predicate = Linear(d, len(RELATIONS), rng)
        self.subject_cat = Linear(d, len(SHAPES), rng)
        self.object_cat = Linear(d, len(SHAPES), rng)
        self.subject_attr = Linear(d, len(COLORS), rng)
        self.object_attr = Linear(d, len(COLORS), rng)


def pretrain_autoencoder(net: GraphNet, graphs: Sequence[SceneGraph], steps: int = 200,
                         batch_size: int = 16, lr: float = 3e-3,
                         rng: np.random.Generator | None = None) -> list[float]:
    """Fit the graph network so its outputs decode back to the graph symbols.

    Node outputs must predict their category and color; relation outputs must
    predict the predicate and both endpoints' category and color. Returns the
    per-step losses.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    heads = _AutoencoderHeads(net.d_out, rng)
    params = list(net.named_parameters("gcn.")) + list(heads.named_parameters("heads."))
    opt = Adam(params, lr=lr)
    losses = []
    graphs = list(graphs)
    for _ in range(steps):
        pick = rng.choice(len(graphs), size=min(batch_size, len(graphs)), replace=False)
        batch = GraphBatch.from_graphs([graphs[i] for i in pick])
        emb = net(batch)
        first_attr = np.array([a[0] if a else 0 for a in batch.attributes], dtype=np.int64)
        loss = T.cross_entropy(heads.category(emb.object_vecs), batch.categories)
        loss = loss + T.cross_entropy(heads.attribute(emb.object_vecs), first_attr)
        if batch.num_edges:
            r = emb.relation_vecs
            loss = loss + T.cross_entropy(heads.predicate(r), batch.predicates)
            loss = loss + T.cross_entropy(heads.subject_cat(r), batch.categories[batch.subjects])
            loss = loss + T.cross_entropy(heads.object_cat(r), batch.categories[batch.objects])
            loss = loss + T.cross_entropy(heads.subject_attr(r), first_attr[batch.subjects])
            loss = loss + T.cross_entropy(heads.object_attr(r), first_attr[batch.objects])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
