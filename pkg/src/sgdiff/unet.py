"""Swin-v2 UNet denoiser with cross-attention conditioning."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .graphconv import GraphBatch, GraphEmbeddings, GraphNet
from .nn import LayerNorm, Linear, Module, ModuleList, sinusoidal
from .scenegraph import SceneGraph
from .swin import PatchExpand, PatchMerge, SwinBlock, WindowConfig, depth_to_space, space_to_depth
from .tensor import Tensor
from .textenc import TextEmbeddings, TextEncoder, Vocabulary, pad_batch, tokenize

# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


@dataclass
class ConditionalEmbeddings:
    """Text, object and relation rows (in that order) plus their masked mean.

    ``seq`` is ``[B, L, d_cond]``; ``mask`` is ``[B, L]``; ``segments`` gives the
    ``(start, stop)`` row range of each segment.
    """

    seq: Tensor
    pooled: Tensor
    mask: np.ndarray
    segments: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.seq.shape[0]


def masked_mean(seq: Tensor, mask: np.ndarray) -> Tensor:
    w = mask.astype(seq.dtype)
    count = w.sum(axis=-1, keepdims=True)
    w = w / np.where(count > 0, count, 1.0)
    return (seq * w[..., None]).sum(axis=-2)


def _scatter_segment(rows: Tensor | None, counts: Sequence[int], d: int, dtype) -> tuple[Tensor, np.ndarray]:
    """Lay out a ragged ``[sum(counts), d]`` block as ``[B, max(counts), d]`` plus mask."""
    B = len(counts)
    width = max(counts) if counts else 0
    mask = np.zeros((B, width), dtype=bool)
    if width == 0 or rows is None:
        return T.Tensor(np.zeros((B, width, d), dtype=dtype)), mask
    total = int(sum(counts))
    ids = np.full((B, width), total, dtype=np.int64)
    start = 0
    for b, c in enumerate(counts):
        ids[b, :c] = np.arange(start, start + c)
        mask[b, :c] = True
        start += c
    padded = T.concat([rows, T.Tensor(np.zeros((1, d), dtype=dtype))], axis=0)
    return T.take_rows(padded, ids), mask


class ConditionAdapters(Module):
    """Per-segment linear maps into the shared conditioning width."""

    def __init__(self, d_text: int, d_graph: int, d_cond: int, rng: np.random.Generator):
        self.text = Linear(d_text, d_cond, rng)
        self.objects = Linear(d_graph, d_cond, rng)
        self.relations = Linear(d_graph, d_cond, rng)
        self.d_cond = d_cond


def build_conditional_embeddings(text: TextEmbeddings, graph: GraphEmbeddings | None,
                                 adapters: ConditionAdapters,
                                 node_counts: Sequence[int] | None = None,
                                 edge_counts: Sequence[int] | None = None,
                                 use_graph: bool = True) -> ConditionalEmbeddings:
    """Project and concatenate text, object and relation rows.

    ``graph`` holds the rows of every sample back to back; ``node_counts`` and
    ``edge_counts`` say how many belong to each sample (defaults: one sample).
    With ``use_graph=False`` the graph rows are kept but masked out.
    """
    seq_t = text.seq
    tmask = text.mask
    if seq_t.ndim == 2:
        seq_t = seq_t.reshape(1, *seq_t.shape)
        tmask = tmask[None]
    B = seq_t.shape[0]
    d = adapters.d_cond
    dtype = seq_t.dtype
    parts = [adapters.text(seq_t) * tmask[..., None].astype(dtype)]
    masks = [tmask]
    Lt = seq_t.shape[1]
    segments = {"text": (0, Lt)}
    if graph is None:
        node_counts = [0] * B
        edge_counts = [0] * B
        obj_rows = rel_rows = None
    else:
        node_counts = list(node_counts) if node_counts is not None else [graph.object_vecs.shape[0]]
        edge_counts = list(edge_counts) if edge_counts is not None else [graph.relation_vecs.shape[0]]
        obj_rows = adapters.objects(graph.object_vecs)
        rel_rows = adapters.relations(graph.relation_vecs) if graph.relation_vecs.shape[0] else None
    objs, omask = _scatter_segment(obj_rows, node_counts, d, dtype)
    rels, rmask = _scatter_segment(rel_rows, edge_counts, d, dtype)
    if not use_graph:
        omask = np.zeros_like(omask)
        rmask = np.zeros_like(rmask)
    segments["objects"] = (Lt, Lt + objs.shape[1])
    segments["relations"] = (Lt + objs.shape[1], Lt + objs.shape[1] + rels.shape[1])
    parts += [objs, rels]
    masks += [omask, rmask]
    seq = T.concat(parts, axis=1) if (objs.shape[1] or rels.shape[1]) else parts[0]
    mask = np.concatenate(masks, axis=1)
    # masked rows are zeroed so they cannot leak through any path
    seq = seq * mask[..., None].astype(dtype)
    return ConditionalEmbeddings(seq, masked_mean(seq, mask), mask, segments)


class Conditioner(Module):
    """Text encoder, graph network and adapters producing conditional embeddings."""

    def __init__(self, vocab: Vocabulary, d_text: int = 64, text_layers: int = 2, text_heads: int = 4,
                 max_len: int = 16, d_graph: int = 64, graph_layers: int = 2, d_cond: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.text = TextEncoder(len(vocab), d_text, text_layers, text_heads, max_len, rng)
        self.graph = GraphNet(d_graph, d_graph, graph_layers, rng)
        self.adapters = ConditionAdapters(d_text, d_graph, d_cond, rng)
        self._vocab = vocab
        self.d_cond = d_cond

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def forward(self, captions: Sequence[str], graphs: Sequence[SceneGraph | None] | None = None,
                use_graph: bool = True) -> ConditionalEmbeddings:
        ids, _ = pad_batch([tokenize(c, self._vocab) for c in captions], self.text.max_len)
        text = self.text.encode(ids)
        if graphs is None or all(g is None for g in graphs):
            return build_conditional_embeddings(text, None, self.adapters, use_graph=use_graph)
        present = [g for g in graphs if g is not None]
        batch = GraphBatch.from_graphs(present)
        emb = self.graph(batch)
        # the text encoder ends in a layer norm; put graph rows on the same scale
        ones, zeros = T.ones(emb.object_vecs.shape[-1]), T.zeros(emb.object_vecs.shape[-1])
        emb = GraphEmbeddings(T.layer_norm(emb.object_vecs, ones, zeros),
                              T.layer_norm(emb.relation_vecs, ones, zeros))
        it = iter(zip(batch.node_counts, batch.edge_counts))
        counts = [next(it) if g is not None else (0, 0) for g in graphs]
        return build_conditional_embeddings(
            text, emb, self.adapters, [c[0] for c in counts], [c[1] for c in counts], use_graph)


# ---------------------------------------------------------------------------
# UNet blocks
# ---------------------------------------------------------------------------

class TimestepEmbedding(Module):
    def __init__(self, d_cond: int, rng: np.random.Generator):
        self.fc1 = Linear(d_cond, d_cond, rng)
        self.fc2 = Linear(d_cond, d_cond, rng)
        self.dim = d_cond

    def forward(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        return self.fc2(T.gelu(self.fc1(T.Tensor(sinusoidal(t, self.dim)))))


class CrossAttention(Module):
    """Image tokens attend to conditioning rows (dot-product, key-masked)."""

    def __init__(self, dim: int, d_cond: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each logit row, which softmax ignores
        self.k = Linear(d_cond, dim, rng, bias=False)
        self.v = Linear(d_cond, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads

    def forward(self, x: Tensor, cond: ConditionalEmbeddings) -> Tensor:
        B, N, C = x.shape
        h = self.heads
        dh = C // h
        L = cond.seq.shape[1]
        q = T.transpose(self.q(self.norm(x)).reshape(B, N, h, dh), (0, 2, 1, 3))
        k = T.transpose(self.k(cond.seq).reshape(B, L, h, dh), (0, 2, 1, 3))
        v = T.transpose(self.v(cond.seq).reshape(B, L, h, dh), (0, 2, 1, 3))
        logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        attn = T.masked_softmax(logits, cond.mask[:, None, None, :])
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(B, N, C)
        return self.proj(out)


def _swin_stack(dim, heads, window_size, n, rng, full, mlp_ratio):
    blocks = ModuleList()
    for i in range(n):
        shift = (window_size // 2) if (i % 2 == 1 and not full) else 0
        blocks.append(SwinBlock(dim, heads, WindowConfig(window_size, shift, full), rng, mlp_ratio))
    return blocks


class DBlock(Module):
    """Add pooled+timestep conditioning, cross-attend, then ``num_block - 1`` swin blocks."""

    def __init__(self, dim: int, d_cond: int, heads: int, window_size: int, num_block: int,
                 rng: np.random.Generator, full_attention: bool = False, mlp_ratio: int = 4):
        if num_block < 2:
            raise ValueError("num_block must be at least 2")
        self.cond_proj = Linear(d_cond, dim, rng)
        self.cross = CrossAttention(dim, d_cond, heads, rng)
        self.blocks = _swin_stack(dim, heads, window_size, num_block - 1, rng, full_attention, mlp_ratio)
        self.dim = dim

    def forward(self, x: Tensor, cond: ConditionalEmbeddings, t_emb: Tensor) -> Tensor:
        B, H, W, C = x.shape
        if C != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {C}")
        x = x + self.cond_proj(cond.pooled + t_emb).reshape(B, 1, 1, C)
        tokens = x.reshape(B, H * W, C)
        x = (tokens + self.cross(tokens, cond)).reshape(B, H, W, C)
        for blk in self.blocks:
            x = blk(x)
        return x


class UBlock(DBlock):
    """Fuse the mirrored encoder features, then the DBlock body."""

    def __init__(self, dim: int, d_cond: int, heads: int, window_size: int, num_block: int,
                 rng: np.random.Generator, full_attention: bool = False, mlp_ratio: int = 4):
        super().__init__(dim, d_cond, heads, window_size, num_block, rng, full_attention, mlp_ratio)
        self.fuse = Linear(2 * dim, dim, rng)

    def forward(self, x: Tensor, skip: Tensor, cond: ConditionalEmbeddings, t_emb: Tensor) -> Tensor:
        if x.shape != skip.shape:
            raise ValueError(f"skip shape {skip.shape} does not match {x.shape}")
        return super().forward(self.fuse(T.concat([x, skip], axis=-1)), cond, t_emb)


def dblock(x, cond, t_emb, block: DBlock) -> Tensor:
    return block(x, cond, t_emb)


def ublock(x, skip, cond, t_emb, block: UBlock) -> Tensor:
    return block(x, skip, cond, t_emb)


@dataclass
class UNetConfig:
    resolution: int = 8
    in_channels: int = 3
    out_channels: int = 3
    patch_size: int = 1
    base_dim: int = 32
    num_merges: int = 2
    num_block: int = 2
    heads: int = 4
    window_size: int = 4
    d_cond: int = 64
    target: str = "epsilon"
    attention: str = "window"
    mlp_ratio: int = 4
    max_timestep: int = 1000

    def __post_init__(self):
        if self.target not in ("epsilon", "x0"):
            raise ValueError(f"unknown prediction target {self.target!r}")
        if self.attention not in ("window", "full"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.resolution % self.patch_size:
            raise ValueError("resolution must be divisible by patch_size")
        grid = self.resolution // self.patch_size
        if grid % (2 ** self.num_merges):
            raise ValueError(f"token grid {grid} cannot be halved {self.num_merges} times")
        if self.num_block < 2:
            raise ValueError("num_block must be at least 2")

    @property
    def stage_dims(self) -> list[int]:
        return [self.base_dim * 2 ** k for k in range(self.num_merges + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        p = cfg.patch_size
        dims = cfg.stage_dims
        full = cfg.attention == "full"
        self.time = TimestepEmbedding(cfg.d_cond, rng)
        self.patch_embed = Linear(p * p * cfg.in_channels, dims[0], rng)
        self.encoder = ModuleList(
            DBlock(d, cfg.d_cond, cfg.heads, cfg.window_size, cfg.num_block, rng, full, cfg.mlp_ratio)
            for d in dims)
        self.merges = ModuleList(PatchMerge(d, rng) for d in dims[:-1])
        self.expands = ModuleList(PatchExpand(dims[k + 1], rng) for k in reversed(range(cfg.num_merges)))
        self.decoder = ModuleList(
            UBlock(dims[k], cfg.d_cond, cfg.heads, cfg.window_size, cfg.num_block, rng, full, cfg.mlp_ratio)
            for k in reversed(range(cfg.num_merges)))
        self.norm = LayerNorm(dims[0])
        # zero head: an untrained net predicts zero, so sampling starts unbiased
        self.head = Linear(dims[0], p * p * cfg.out_channels, rng, std=0.0)
        self.cfg = cfg

    def skip_pairs(self) -> list[tuple[str, str]]:
        """(encoder block path, decoder block path) for every skip connection."""
        K = self.cfg.num_merges
        return [(f"encoder.{k}", f"decoder.{K - 1 - k}") for k in range(K)]

    def forward(self, z: Tensor, t, cond: ConditionalEmbeddings) -> Tensor:
        cfg = self.cfg
        if not isinstance(z, Tensor):
            z = T.Tensor(z)
        B, H, W, C = z.shape
        if H != cfg.resolution or W != cfg.resolution or C != cfg.in_channels:
            raise ValueError(f"expected input [B, {cfg.resolution}, {cfg.resolution}, {cfg.in_channels}], "
                             f"got {z.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        if (t < 0).any() or (t > cfg.max_timestep).any():
            raise ValueError(f"timestep out of range [0, {cfg.max_timestep}]")
        t_emb = self.time(t)
        x = self.patch_embed(space_to_depth(z, cfg.patch_size) if cfg.patch_size > 1 else z)
        skips = []
        for k, blk in enumerate(self.encoder):
            x = blk(x, cond, t_emb)
            if k < cfg.num_merges:
                skips.append(x)
                x = self.merges[k](x)
        for expand, blk in zip(self.expands, self.decoder):
            x = blk(expand(x), skips.pop(), cond, t_emb)
        out = self.head(self.norm(x))
        return depth_to_space(out, cfg.patch_size) if cfg.patch_size > 1 else out


def unet_forward(unet: UNet, z_t, t, cond: ConditionalEmbeddings) -> Tensor:
    return unet(z_t, t, cond)
