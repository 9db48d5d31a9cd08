"""DDPM noising/denoising, the pixel MSE objective and the three-stage cascade."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, ModuleList
from .tensor import Tensor
from .unet import ConditionalEmbeddings, Conditioner, UNet, UNetConfig


class NoiseSchedule:
    """Per-step coefficients indexed ``1..T``; index 0 is the clean image (alpha_bar = 1).

    ``timesteps[k]`` is the model-facing timestep for schedule index ``k``; it is
    the identity except on respaced schedules.
    """

    def __init__(self, betas: Sequence[float], timesteps: Sequence[int] | None = None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        self.T = betas.size
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        ab_prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            post = self.betas * (1.0 - ab_prev) / (1.0 - self.alpha_bars)
        post[0] = 0.0
        self.posterior_variance = post
        self.alpha_bars_prev = ab_prev
        ts = np.arange(self.T + 1) if timesteps is None else np.concatenate([[0], np.asarray(timesteps)])
        self.timesteps = ts.astype(np.int64)

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
               reference_steps: int | None = 1000) -> NoiseSchedule:
        """Linear betas; endpoints are quoted for ``reference_steps`` and rescaled to ``T``."""
        scale = 1.0 if reference_steps is None else reference_steps / T
        lo, hi = beta_start * scale, min(beta_end * scale, 0.999)
        return cls(np.linspace(lo, hi, T))

    def respace(self, n: int) -> NoiseSchedule:
        """Schedule over ``n`` evenly strided original steps with matching alpha_bars."""
        if n >= self.T:
            return self
        keep = np.unique(np.round(np.linspace(1, self.T, n)).astype(np.int64))
        ab = self.alpha_bars[keep]
        prev = np.concatenate([[1.0], ab[:-1]])
        return NoiseSchedule(1.0 - ab / prev, self.timesteps[keep])

    def check_t(self, t, lo: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if (t < lo).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [{lo}, {self.T}]")
        return t


def _bcast(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t`` is a scalar or one per leading item."""
    t = sched.check_t(t)
    x0 = np.asarray(x0)
    ab = sched.alpha_bars[t]
    a = _bcast(np.sqrt(ab), x0.ndim)
    s = _bcast(np.sqrt(1.0 - ab), x0.ndim)
    return (a * x0 + s * eps).astype(x0.dtype, copy=False)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=-3), factor, axis=-2)


def box_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    *lead, H, W, C = x.shape
    x = x.reshape(*lead, H // factor, factor, W // factor, factor, C)
    return x.mean(axis=(-4, -2))


class DiffusionStage(Module):
    """One resolution of the cascade: a UNet and its noise schedule."""

    def __init__(self, unet_cfg: UNetConfig, schedule: NoiseSchedule, role: str = "base",
                 sample_steps: int | None = None, rng: np.random.Generator | None = None,
                 low_res: int | None = None):
        if role not in ("base", "sr1", "sr2"):
            raise ValueError(f"unknown stage role {role!r}")
        self.unet = UNet(unet_cfg, rng)
        self._schedule = schedule
        self._role = role
        self._sample_steps = sample_steps or schedule.T
        self._low_res = low_res

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def role(self) -> str:
        return self._role

    @property
    def resolution(self) -> int:
        return self.unet.cfg.resolution

    @property
    def low_res(self) -> int | None:
        return self._low_res

    @property
    def target(self) -> str:
        return self.unet.cfg.target

    @property
    def sampling_schedule(self) -> NoiseSchedule:
        return self._schedule.respace(self._sample_steps)

    def model_input(self, z: np.ndarray, low_res: np.ndarray | None) -> np.ndarray:
        if self._low_res is None:
            return z
        if low_res is None:
            raise ValueError(f"stage {self._role} needs a low-resolution conditioning image")
        up = upsample_nearest(np.asarray(low_res, dtype=z.dtype), self.resolution // low_res.shape[-2])
        return np.concatenate([z, up], axis=-1)

    def predict(self, z: np.ndarray, t, cond: ConditionalEmbeddings, low_res=None) -> Tensor:
        """Network output for model-facing timestep(s) ``t``."""
        return self.unet(T.Tensor(self.model_input(z, low_res)), t, cond)


def training_loss(stage: DiffusionStage, x0: np.ndarray, cond: ConditionalEmbeddings,
                  rng: np.random.Generator, low_res: np.ndarray | None = None,
                  t: np.ndarray | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Pixel MSE between the network output and its target at a random timestep.

    The target is the injected noise (``epsilon`` mode) or the clean image
    (``x0`` mode). ``t`` and ``eps`` are drawn from ``rng`` unless given.
    """
    sched = stage.schedule
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    z = forward_noise(x0, t, eps, sched)
    pred = stage.predict(z, sched.timesteps[t], cond, low_res)
    target = eps if stage.target == "epsilon" else x0
    return T.mse(pred, T.Tensor(target.astype(pred.dtype)))


def predict_x0(stage, z: np.ndarray, k: np.ndarray, pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if stage.target == "x0":
        return pred
    ab = _bcast(sched.alpha_bars[k], z.ndim)
    return (z - np.sqrt(1.0 - ab) * pred) / np.sqrt(ab)


def posterior_step(sched: NoiseSchedule, z: np.ndarray, k, x0_hat: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Sample ``z_{k-1} ~ q(z_{k-1} | z_k, x0_hat)``; no noise is added at ``k = 1``."""
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), z.shape[:1])
    beta = _bcast(sched.betas[k], z.ndim)
    ab = _bcast(sched.alpha_bars[k], z.ndim)
    ab_prev = _bcast(sched.alpha_bars_prev[k], z.ndim)
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    c_z = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    mean = c_x0 * x0_hat + c_z * z
    sigma = np.sqrt(_bcast(sched.posterior_variance[k], z.ndim))
    noise = rng.standard_normal(z.shape)
    noise = np.where(_bcast(k > 1, z.ndim), noise, 0.0)
    return (mean + sigma * noise).astype(z.dtype, copy=False)


def ddpm_step(stage, z_t: np.ndarray, t, cond, rng: np.random.Generator, low_res=None,
              sched: NoiseSchedule | None = None, clip: bool = True) -> np.ndarray:
    """One ancestral step from schedule index ``t`` to ``t - 1``.

    ``stage`` needs ``target``, ``schedule`` and ``predict(z, t, cond, low_res)``
    returning a tensor or array.
    """
    sched = sched or stage.schedule
    k = sched.check_t(np.broadcast_to(np.asarray(t), z_t.shape[:1]), lo=1)
    with T.no_grad():
        out = stage.predict(z_t, sched.timesteps[k], cond, low_res)
    pred = out.data if isinstance(out, Tensor) else np.asarray(out)
    x0_hat = predict_x0(stage, z_t, k, pred, sched)
    if clip:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    return posterior_step(sched, z_t, k, x0_hat, rng)


def sample_stage(stage: DiffusionStage, cond: ConditionalEmbeddings, rng: np.random.Generator,
                 low_res: np.ndarray | None = None, steps: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise; returns images clamped to [-1, 1]."""
    sched = stage.schedule.respace(steps) if steps else stage.sampling_schedule
    B = cond.batch_size
    r = stage.resolution
    z = rng.standard_normal((B, r, r, 3)).astype(T.get_default_dtype())
    for k in range(sched.T, 0, -1):
        z = ddpm_step(stage, z, k, cond, rng, low_res, sched=sched)
    return np.clip(z, -1.0, 1.0)


@dataclass
class CascadeConfig:
    resolutions: tuple[int, int, int] = (8, 16, 32)
    patch_sizes: tuple[int, int, int] = (1, 2, 4)
    base_dim: int = 32
    num_merges: int = 2
    num_block: int = 2
    heads: int = 4
    window_size: int = 4
    d_cond: int = 64
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_len: int = 16
    d_graph: int = 64
    graph_layers: int = 2
    timesteps: int = 200
    sample_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    target: str = "epsilon"
    attention: str = "window"

    def unet_config(self, k: int) -> UNetConfig:
        sr = k > 0
        return UNetConfig(
            resolution=self.resolutions[k], in_channels=6 if sr else 3, out_channels=3,
            patch_size=self.patch_sizes[k], base_dim=self.base_dim, num_merges=self.num_merges,
            num_block=self.num_block, heads=self.heads, window_size=self.window_size,
            d_cond=self.d_cond, target=self.target, attention=self.attention,
            max_timestep=self.timesteps)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


class Cascade(Module):
    """Shared conditioner plus base and two super-resolution stages."""

    ROLES = ("base", "sr1", "sr2")

    def __init__(self, cfg: CascadeConfig, vocab, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        res = cfg.resolutions
        for a, b in zip(res, res[1:]):
            if b % a or b // a not in (2, 4):
                raise ValueError(f"resolution ladder {res} must step by 2x or 4x")
        self.conditioner = Conditioner(vocab, cfg.d_text, cfg.text_layers, cfg.text_heads, cfg.max_len,
                                       cfg.d_graph, cfg.graph_layers, cfg.d_cond, rng)
        sched = cfg.schedule()
        self.stages = ModuleList(
            DiffusionStage(cfg.unet_config(k), sched, self.ROLES[k], cfg.sample_steps, rng,
                           low_res=res[k - 1] if k else None)
            for k in range(len(res)))
        self._cfg = cfg

    @property
    def cfg(self) -> CascadeConfig:
        return self._cfg

    def condition(self, captions, graphs=None, use_graph: bool = True) -> ConditionalEmbeddings:
        return self.conditioner(captions, graphs, use_graph)


def cascade_sample(cascade: Cascade, cond: ConditionalEmbeddings, rng: np.random.Generator,
                   steps: int | None = None, n_stages: int | None = None) -> list[np.ndarray]:
    """Base sample from noise, then each SR stage on the upsampled previous output."""
    images = []
    prev = None
    with T.no_grad():
        for stage in list(cascade.stages)[:n_stages]:
            prev = sample_stage(stage, cond, rng, prev, steps)
            images.append(prev)
    return images
