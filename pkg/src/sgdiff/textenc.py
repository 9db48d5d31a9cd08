"""Caption tokenizer and a small trainable transformer text encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import MLP, Embedding, LayerNorm, Linear, Module, ModuleList, sinusoidal
from .scenegraph import COLORS, RELATIONS, SHAPES
from .tensor import Tensor

PAD, UNK, NULL = "<pad>", "<unk>", "<null>"

_SPLIT = re.compile(r"[^\w'\-]+")


class Vocabulary:
    """Dense token ids; ``<pad>`` is 0, then ``<unk>`` and ``<null>``."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:3] != [PAD, UNK, NULL]:
            tokens = [PAD, UNK, NULL] + [t for t in tokens if t not in (PAD, UNK, NULL)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_grammar(cls) -> Vocabulary:
        words = ["a"]
        words += list(COLORS) + list(SHAPES)
        for rel in RELATIONS:
            for w in rel.split():
                if w not in words:
                    words.append(w)
        return cls(words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def null_id(self) -> int:
        return self.ids[NULL]

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids.get(token, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


def tokenize(caption: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on whitespace/punctuation (hyphens stay inside words)."""
    return [vocab[w] for w in _SPLIT.split(caption.lower()) if w]


@dataclass
class TextEmbeddings:
    seq: Tensor          # [..., L, d_text]
    mask: np.ndarray     # [..., L] bool, True for real tokens


def pad_batch(token_lists, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id lists to a common length (the longest, at least 1)."""
    longest = max([len(t) for t in token_lists] + [1])
    if longest > max_len:
        raise ValueError(f"token sequence of length {longest} exceeds max length {max_len}")
    ids = np.zeros((len(token_lists), longest), dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, :len(toks)] = toks
    return ids, ids != 0


class SelfAttention(Module):
    """Multi-head scaled dot-product attention with a key padding mask."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError("model width must be divisible by heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng, bias=False)   # a key bias cannot change softmax rows
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)
        self.heads = heads

    def forward(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        *lead, L, d = x.shape
        h = self.heads
        dh = d // h
        nl = len(lead)
        heads_first = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        q, k, v = (T.transpose(lin(x).reshape(*lead, L, h, dh), heads_first)
                   for lin in (self.q, self.k, self.v))
        logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        mask = key_mask[..., None, None, :]
        attn = T.masked_softmax(logits, mask)
        out = T.matmul(attn, v)
        out = T.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, L, d)
        return self.proj(out)


class EncoderLayer(Module):
    """Pre-norm transformer layer: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class TextEncoder(Module):
    def __init__(self, vocab_size: int, d_text: int = 64, n_layers: int = 2, heads: int = 4,
                 max_len: int = 16, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embed = Embedding(vocab_size, d_text, rng, std=1.0 / np.sqrt(d_text) * 4)
        self.layers = ModuleList(EncoderLayer(d_text, heads, rng) for _ in range(n_layers))
        self.norm = LayerNorm(d_text)
        self.d_text = d_text
        self.max_len = max_len

    def forward(self, ids: np.ndarray) -> TextEmbeddings:
        return self.encode(ids)

    def encode(self, ids) -> TextEmbeddings:
        """Embed a ``[L]`` or ``[B, L]`` id array; PAD rows come out as zeros."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max length {self.max_len}")
        mask = ids != 0
        L = ids.shape[-1]
        x = self.embed(ids) + sinusoidal(np.arange(L), self.d_text)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm(x) * mask[..., None].astype(x.dtype)
        return TextEmbeddings(x, mask)
