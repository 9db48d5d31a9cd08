"""Windowed scaled-cosine attention blocks and patch merging/expanding.

Token grids are ``[..., H, W, C]`` tensors; any leading dims are batch dims.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

TAU_MIN = 0.01


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 4
    shift: int = 0
    full: bool = False  # attend over the whole grid (plain-transformer variant)

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be positive")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift must lie in [0, {self.window_size}), got {self.shift}")

    def resolve(self, height: int, width: int) -> tuple[int, int]:
        """Effective (window, shift) for a grid: windows never exceed the grid."""
        if self.full:
            if height != width:
                raise ValueError("full attention needs a square grid")
            return height, 0
        w = min(self.window_size, height, width)
        shift = self.shift if w < min(height, width) else 0
        return w, shift


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, window: int, shift: int = 0) -> Tensor:
    """Roll by ``-shift`` on both spatial axes, then tile into ``window x window`` blocks.

    ``[..., H, W, C]`` becomes ``[prod(...) * nW, window*window, C]`` with windows
    in row-major order and tokens row-major inside each window.
    """
    *lead, H, W, C = x.shape
    if H % window or W % window:
        raise ValueError(f"grid {H}x{W} is not divisible by window {window}")
    if shift:
        x = T.roll(x, (-shift, -shift), (-3, -2))
    B = int(np.prod(lead)) if lead else 1
    x = x.reshape(B, H // window, window, W // window, window, C)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(B * (H // window) * (W // window), window * window, C)


def window_reverse(windows: Tensor, lead: tuple[int, ...], H: int, W: int, window: int,
                   shift: int = 0) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    B = int(np.prod(lead)) if lead else 1
    x = windows.reshape(B, H // window, W // window, window, window, C)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5)).reshape(*lead, H, W, C)
    if shift:
        x = T.roll(x, (shift, shift), (-3, -2))
    return x


@lru_cache(maxsize=None)
def relative_position_index(window: int, table_window: int | None = None) -> np.ndarray:
    """``[w*w, w*w]`` indices into a ``(2t-1)^2`` bias table.

    Offsets beyond the table's reach (``table_window < window``) are clipped.
    """
    t = table_window or window
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = np.clip(rel, -(t - 1), t - 1) + (t - 1)
    idx = rel[0] * (2 * t - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def shift_mask(H: int, W: int, window: int, shift: int) -> np.ndarray:
    """``[nW, N, N]`` boolean mask; false between tokens that only touch through the roll."""
    n = (H // window) * (W // window)
    N = window * window
    if not shift:
        return np.ones((n, N, N), dtype=bool)
    region = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[hs, ws] = cnt
            cnt += 1
    r = region.reshape(H // window, window, W // window, window).transpose(0, 2, 1, 3).reshape(n, N)
    mask = r[:, :, None] == r[:, None, :]
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention_weights(q: Tensor, k: Tensor, tau, bias=None, mask=None) -> Tensor:
    """``softmax(cos(q_i, k_j) / tau + B_ij)`` over the key axis."""
    qn = T.l2_normalize(q)
    kn = T.l2_normalize(k)
    logits = T.matmul(qn, T.swapaxes(kn, -1, -2))
    logits = logits / tau
    if bias is not None:
        logits = logits + bias
    if mask is None:
        return T.softmax(logits, axis=-1)
    return T.masked_softmax(logits, mask, axis=-1)


def cosine_attention(q: Tensor, k: Tensor, v: Tensor, tau, bias=None, mask=None) -> Tensor:
    """Scaled cosine attention; ``tau`` is a positive temperature."""
    return T.matmul(attention_weights(q, k, tau, bias, mask), v)


class WindowAttention(Module):
    """Multi-head scaled-cosine attention over one window configuration.

    Holds a per-head temperature and a ``[heads, (2w-1)^2]`` relative bias
    table, where ``w`` is the configured window size.
    """

    def __init__(self, dim: int, heads: int, window_size: int, rng: np.random.Generator,
                 tau_init: float = 0.1):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        dtype = T.get_default_dtype()
        self.qkv = Linear(dim, 3 * dim, rng)
        self.tau = Parameter(np.full(heads, tau_init, dtype=dtype))
        self.bias_table = Parameter((rng.standard_normal((heads, (2 * window_size - 1) ** 2)) * 0.02).astype(dtype))
        self.proj = Linear(dim, dim, rng)
        self.heads = heads
        self.window_size = window_size

    def clamp_tau(self) -> None:
        np.maximum(self.tau.data, TAU_MIN, out=self.tau.data)

    def bias(self, window: int) -> Tensor:
        idx = relative_position_index(window, self.window_size)
        return T.index(self.bias_table, (slice(None), idx))  # [h, N, N]

    def forward(self, windows: Tensor, window: int, mask: np.ndarray | None = None) -> Tensor:
        Bw, N, C = windows.shape
        h = self.heads
        qkv = self.qkv(windows).reshape(Bw, N, 3, h, C // h)
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, Bw, h, N, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        tau = self.tau.reshape(h, 1, 1)
        out = cosine_attention(q, k, v, tau, self.bias(window), mask)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(Bw, N, C)
        return self.proj(out)


class SwinBlock(Module):
    """``z' = LN(Attn(z)) + z`` then ``z'' = MLP(LN(z')) + z'``."""

    def __init__(self, dim: int, heads: int, cfg: WindowConfig, rng: np.random.Generator,
                 mlp_ratio: int = 4):
        self.attn = WindowAttention(dim, heads, cfg.window_size, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng)
        self.cfg = cfg
        self.dim = dim

    def attend(self, z: Tensor) -> Tensor:
        *lead, H, W, C = z.shape
        if C != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {C}")
        window, shift = self.cfg.resolve(H, W)
        windows = window_partition(z, window, shift)
        mask = None
        if shift:
            m = shift_mask(H, W, window, shift)
            B = int(np.prod(lead)) if lead else 1
            mask = np.tile(m, (B, 1, 1))[:, None]
        out = self.attn(windows, window, mask)
        return window_reverse(out, tuple(lead), H, W, window, shift)

    def forward(self, z: Tensor) -> Tensor:
        z = self.norm1(self.attend(z)) + z
        return self.mlp(self.norm2(z)) + z


def swin_block(z: Tensor, block: SwinBlock) -> Tensor:
    return block(z)


class PatchMerge(Module):
    """2x2 neighborhood concat (4C), LayerNorm, then linear 4C -> 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        return self.reduce(self.norm(space_to_depth(x)))


class PatchExpand(Module):
    """Linear C -> 2C, then the 2C channels become a 2x2 block of C/2 channels."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ValueError(f"patch expand needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, rng)
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[-1]}")
        return depth_to_space(self.expand(x), 2)


def space_to_depth(x: Tensor, r: int = 2) -> Tensor:
    """``[..., H, W, C]`` to ``[..., H/r, W/r, r*r*C]``; neighborhood order is row-major."""
    *lead, H, W, C = x.shape
    if H % r or W % r:
        raise ValueError(f"grid {H}x{W} is not divisible by {r}")
    nl = len(lead)
    x = x.reshape(*lead, H // r, r, W // r, r, C)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return T.transpose(x, axes).reshape(*lead, H // r, W // r, r * r * C)


def depth_to_space(x: Tensor, r: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    *lead, H, W, C = x.shape
    if C % (r * r):
        raise ValueError(f"{C} channels cannot fill a {r}x{r} block")
    c = C // (r * r)
    nl = len(lead)
    x = x.reshape(*lead, H, W, r, r, c)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return T.transpose(x, axes).reshape(*lead, H * r, W * r, c)
