"""Finite-difference checks for every differentiable layer, in float64.

Each check builds a small random instance, reduces the output to a scalar with a
fixed random projection and compares autograd against central differences.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .graphconv import GraphConvLayer
from .nn import Linear
from .swin import PatchExpand, PatchMerge, SwinBlock, WindowAttention, WindowConfig, cosine_attention
from .unet import ConditionalEmbeddings, DBlock, UBlock, UNet, UNetConfig

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _projector(rng: np.random.Generator):
    cache: dict[tuple, np.ndarray] = {}

    def project(out: T.Tensor) -> T.Tensor:
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        return T.tsum(out * cache[out.shape])
    return project


def _cond(rng, B: int, L: int, d: int) -> ConditionalEmbeddings:
    mask = np.ones((B, L), dtype=bool)
    mask[:, -1] = False
    seq = T.Tensor(rng.standard_normal((B, L, d)) * mask[..., None], requires_grad=True)
    return ConditionalEmbeddings(seq, T.Tensor(rng.standard_normal((B, d)), requires_grad=True), mask,
                                 {"text": (0, L)})


def _params(*mods, extra=()):
    out = [p for m in mods for p in m.parameters()]
    return out + [t for t in extra if t.requires_grad]


def check_layer_norm(rng, **kw) -> float:
    x = T.Tensor(rng.standard_normal((3, 5, 8)), requires_grad=True)
    g = T.Tensor(1 + 0.1 * rng.standard_normal(8), requires_grad=True)
    b = T.Tensor(0.1 * rng.standard_normal(8), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(T.layer_norm(x, g, b)), [x, g, b], **kw)


def check_gelu(rng, **kw) -> float:
    x = T.Tensor(rng.standard_normal((4, 7)) * 2, requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(T.gelu(x)), [x], **kw)


def check_cosine_attention(rng, **kw) -> float:
    q, k, v = (T.Tensor(rng.standard_normal((2, 3, 6, 4)), requires_grad=True) for _ in range(3))
    tau = T.Tensor(np.full((3, 1, 1), 0.5) + 0.1 * rng.standard_normal((3, 1, 1)), requires_grad=True)
    bias = T.Tensor(0.1 * rng.standard_normal((3, 6, 6)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(cosine_attention(q, k, v, tau, bias)), [q, k, v, tau, bias], **kw)


def check_window_attention(rng, **kw) -> float:
    attn = WindowAttention(8, 2, 2, rng)
    attn.tau.data[:] = 0.5
    x = T.Tensor(rng.standard_normal((3, 4, 8)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(attn(x, 2)), _params(attn, extra=[x]), **kw)


def check_swin_block(rng, **kw) -> float:
    blk = SwinBlock(8, 2, WindowConfig(2, shift=1), rng, mlp_ratio=2)
    blk.attn.tau.data[:] = 0.5
    x = T.Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(blk(x)), _params(blk, extra=[x]), **kw)


def check_patch_merge(rng, **kw) -> float:
    m = PatchMerge(4, rng)
    x = T.Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(m(x)), _params(m, extra=[x]), **kw)


def check_patch_expand(rng, **kw) -> float:
    m = PatchExpand(8, rng)
    x = T.Tensor(rng.standard_normal((2, 2, 2, 8)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(m(x)), _params(m, extra=[x]), **kw)


def check_dblock(rng, **kw) -> float:
    blk = DBlock(8, 6, 2, 2, 2, rng, mlp_ratio=2)
    for mod in blk.blocks:
        mod.attn.tau.data[:] = 0.5
    x = T.Tensor(rng.standard_normal((2, 4, 4, 8)), requires_grad=True)
    cond = _cond(rng, 2, 3, 6)
    t_emb = T.Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(blk(x, cond, t_emb)),
                      _params(blk, extra=[x, cond.seq, cond.pooled, t_emb]), **kw)


def check_ublock(rng, **kw) -> float:
    blk = UBlock(8, 6, 2, 2, 2, rng, mlp_ratio=2)
    for mod in blk.blocks:
        mod.attn.tau.data[:] = 0.5
    x = T.Tensor(rng.standard_normal((2, 4, 4, 8)), requires_grad=True)
    skip = T.Tensor(rng.standard_normal((2, 4, 4, 8)), requires_grad=True)
    cond = _cond(rng, 2, 3, 6)
    t_emb = T.Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(blk(x, skip, cond, t_emb)),
                      _params(blk, extra=[x, skip, cond.seq, cond.pooled, t_emb]), **kw)


def check_graphconv(rng, **kw) -> float:
    layer = GraphConvLayer(5, 6, rng, hidden=7)
    nodes = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    edges = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    s = np.array([0, 1, 1])
    o = np.array([1, 2, 0])   # node 3 is isolated
    proj = _projector(rng)

    def f():
        n, e = layer(nodes, edges, s, o)
        return proj(n) + proj(e)
    return grad_check(f, _params(layer, extra=[nodes, edges]), **kw)


def check_linear(rng, **kw) -> float:
    lin = Linear(5, 3, rng)
    x = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    proj = _projector(rng)
    return grad_check(lambda: proj(lin(x)), _params(lin, extra=[x]), **kw)


def check_unet(rng, max_entries: int | None = 6, **kw) -> float:
    """Full 8x8 UNet with two merges; a sample of entries per parameter."""
    cfg = UNetConfig(resolution=8, base_dim=8, num_merges=2, num_block=2, heads=2, window_size=4,
                     d_cond=8, mlp_ratio=2)
    net = UNet(cfg, rng)
    for name, p in net.named_parameters():
        if name.endswith("attn.tau"):
            p.data[:] = 0.5
    # the zero-initialised head would hide every upstream gradient
    net.head.weight.data[:] = rng.standard_normal(net.head.weight.shape) / np.sqrt(net.head.d_in)
    z = rng.standard_normal((2, 8, 8, 3))
    t = np.array([3, 700])
    cond = _cond(rng, 2, 4, 8)
    proj = _projector(rng)
    return grad_check(lambda: proj(net(z, t, cond)), _params(net, extra=[cond.seq, cond.pooled]),
                      max_entries=max_entries, rng=rng, **kw)


LAYER_CHECKS: dict[str, Callable[..., float]] = {
    "linear": check_linear,
    "layer_norm": check_layer_norm,
    "gelu": check_gelu,
    "cosine_attention": check_cosine_attention,
    "window_attention": check_window_attention,
    "swin_block": check_swin_block,
    "patch_merge": check_patch_merge,
    "patch_expand": check_patch_expand,
    "dblock": check_dblock,
    "ublock": check_ublock,
    "graphconv": check_graphconv,
}


def run_all(seed: int = 0, include_model: bool = True) -> list[dict]:
    """One row per check: name, relative error, tolerance, pass flag, seconds."""
    rows = []
    checks = list(LAYER_CHECKS.items()) + ([("unet_8x8", check_unet)] if include_model else [])
    with T.default_dtype(np.float64):
        for i, (name, fn) in enumerate(checks):
            start = time.perf_counter()
            err = fn(np.random.default_rng([seed, i]))
            tol = MODEL_TOLERANCE if name == "unet_8x8" else LAYER_TOLERANCE
            rows.append({"name": name, "error": err, "tolerance": tol, "passed": bool(err < tol),
                         "seconds": time.perf_counter() - start})
    return rows
