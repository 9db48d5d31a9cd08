"""Frechet distance and Inception-style score over a small trained feature network.

Scores computed here live in the toy network's feature space, so they are
labelled ``fid_proxy`` / ``is_proxy`` and are not comparable to published
Inception-based numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datagen import NUM_CLASSES
from .nn import Adam, Linear, Module
from .tensor import Tensor


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of ``[n, d]`` features."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be [n, d], got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples for a covariance")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (n - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T), n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term uses ``Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``, which equals the
    trace of ``(S_a S_b)^(1/2)`` and keeps every root symmetric PSD.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    ra = _psd_sqrt(a.sigma)
    inner = ra @ b.sigma @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mu - b.mu
    val = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross
    return float(max(val, 0.0))


def inception_score(probs, atol: float = 1e-4) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` for rows of class probabilities."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probabilities must be [n, classes]")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol, rtol=0):
        raise ValueError("every row must be a probability distribution")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


class ToyFeatureNet(Module):
    """MLP classifier on 8x8 images with a 16-d penultimate feature layer.

    Larger inputs are box-averaged down to 8x8 first.
    """

    def __init__(self, d_feat: int = 16, hidden: int = 128, num_classes: int = NUM_CLASSES,
                 input_res: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(input_res * input_res * 3, hidden, rng)
        self.fc2 = Linear(hidden, d_feat, rng)
        self.head = Linear(d_feat, num_classes, rng)
        self.input_res = input_res
        self.d_feat = d_feat

    def _flatten(self, images) -> Tensor:
        x = np.asarray(images, dtype=T.get_default_dtype())
        r = x.shape[1]
        if r % self.input_res:
            raise ValueError(f"resolution {r} is not a multiple of {self.input_res}")
        f = r // self.input_res
        if f > 1:
            x = x.reshape(x.shape[0], self.input_res, f, self.input_res, f, 3).mean(axis=(2, 4))
        return T.Tensor(x.reshape(x.shape[0], -1))

    def features(self, images) -> Tensor:
        return T.gelu(self.fc2(T.gelu(self.fc1(self._flatten(images)))))

    def logits(self, images) -> Tensor:
        return self.head(self.features(images))

    def forward(self, images) -> Tensor:
        return self.logits(images)

    def probabilities(self, images) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(images), axis=-1).data.astype(np.float64)

    def embed(self, images) -> np.ndarray:
        with T.no_grad():
            return self.features(images).data.astype(np.float64)


def train_feature_net(net: ToyFeatureNet, images: np.ndarray, labels: np.ndarray, steps: int = 600,
                      batch_size: int = 64, lr: float = 3e-3, noise: float = 0.1,
                      rng: np.random.Generator | None = None) -> list[float]:
    """Cross-entropy training; light Gaussian input noise keeps features smooth."""
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(net.named_parameters(), lr=lr)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = images[idx] + noise * rng.standard_normal(images[idx].shape).astype(np.float32)
        loss = T.cross_entropy(net.logits(x), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def fid_proxy(net: ToyFeatureNet, real: np.ndarray, fake: np.ndarray) -> float:
    return fid(gaussian_stats(net.embed(real)), gaussian_stats(net.embed(fake)))


def is_proxy(net: ToyFeatureNet, images: np.ndarray) -> float:
    return inception_score(net.probabilities(images))
