import numpy as np
import pytest

from sgdiff import tensor as T
from sgdiff.diffusion import (Cascade, CascadeConfig, NoiseSchedule, cascade_sample, ddpm_step, forward_noise,
                              posterior_step, sample_stage, training_loss, upsample_nearest)
from sgdiff.scenegraph import parse_caption
from sgdiff.tensor import Tensor
from sgdiff.textenc import Vocabulary
from sgdiff.unet import ConditionalEmbeddings


class OracleStage:
    """Knows x0, so it can return the exact noise for any z_t."""

    target = "epsilon"

    def __init__(self, x0, sched):
        self.x0, self.schedule = x0, sched

    def predict(self, z, t, cond, low_res=None):
        ab = self.schedule.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
        return (z - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


class FixedStage:
    def __init__(self, out, sched, target="epsilon"):
        self.out, self.schedule, self.target = out, sched, target

    def predict(self, z, t, cond, low_res=None):
        return Tensor(self.out)


def test_default_schedule_endpoints():
    s = NoiseSchedule.linear(200)
    assert s.betas[1] == pytest.approx(5e-4) and s.betas[-1] == pytest.approx(0.1)
    assert s.alpha_bars[0] == 1.0 and s.alpha_bars[-1] < 1e-4
    ref = NoiseSchedule.linear(1000)
    assert ref.betas[1] == pytest.approx(1e-4) and ref.betas[-1] == pytest.approx(0.02)


def test_t_zero_returns_x0_exactly():
    s = NoiseSchedule.linear(50)
    x0 = np.random.default_rng(0).uniform(-1, 1, (2, 4, 4, 3))
    eps = np.random.default_rng(1).standard_normal(x0.shape)
    assert np.array_equal(forward_noise(x0, 0, eps, s), x0)


def test_t_max_is_mostly_noise():
    s = NoiseSchedule.linear(200)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((1000, 8))
    z = forward_noise(x0, 200, rng.standard_normal(x0.shape), s)
    assert abs(np.corrcoef(x0.ravel(), z.ravel())[0, 1]) < 0.1


def test_closed_form_equals_iterative_composition():
    s = NoiseSchedule.linear(50)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 4, 4, 3))
    for t in (1, 7, 50):
        z = x0.copy()
        noise_total = np.zeros_like(x0)
        for k in range(1, t + 1):
            e = rng.standard_normal(x0.shape)
            z = np.sqrt(1 - s.betas[k]) * z + np.sqrt(s.betas[k]) * e
            noise_total = np.sqrt(1 - s.betas[k]) * noise_total + np.sqrt(s.betas[k]) * e
        # the accumulated noise has variance 1 - alpha_bar_t; rescale it to a unit draw
        eps = noise_total / np.sqrt(1 - s.alpha_bars[t])
        np.testing.assert_allclose(forward_noise(x0, t, eps, s), z, atol=1e-5)
        var = 0.0
        for k in range(1, t + 1):
            var = (1 - s.betas[k]) * var + s.betas[k]
        assert abs(var - (1 - s.alpha_bars[t])) < 1e-12


@pytest.mark.parametrize("t", [1, 25, 100, 200])
def test_variance_preservation(t):
    s = NoiseSchedule.linear(200)
    rng = np.random.default_rng(t)
    x0 = rng.standard_normal((1000, 16))
    z = forward_noise(x0, t, rng.standard_normal(x0.shape), s)
    assert abs(z.var() - 1.0) < 0.05


def test_forward_noise_rejects_bad_t():
    s = NoiseSchedule.linear(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros((1, 2)), 11, np.zeros((1, 2)), s)


def test_loss_examples():
    s = NoiseSchedule.linear(10)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 4, 4, 3)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    t = np.array([3, 9])
    c = None
    assert training_loss(FixedStage(eps, s), x0, c, rng, t=t, eps=eps).item() == 0.0
    assert training_loss(FixedStage(eps + 1, s), x0, c, rng, t=t, eps=eps).item() == pytest.approx(1.0)
    assert training_loss(FixedStage(x0, s, "x0"), x0, c, rng, t=t, eps=eps).item() == 0.0


def test_loss_matches_pixel_loop():
    s = NoiseSchedule.linear(10)
    rng = np.random.default_rng(1)
    with T.default_dtype(np.float64):
        x0 = rng.uniform(-1, 1, (1, 4, 4, 3))
        eps = rng.standard_normal(x0.shape)
        pred = rng.standard_normal(x0.shape)
        got = training_loss(FixedStage(pred, s), x0, None, rng, t=np.array([4]), eps=eps).item()
    total = 0.0
    for i in range(4):
        for j in range(4):
            for c in range(3):
                total += (pred[0, i, j, c] - eps[0, i, j, c]) ** 2
    assert abs(got - total / 48) < 1e-7


def test_oracle_denoiser_recovers_x0():
    s = NoiseSchedule.linear(50)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (4, 8, 8, 3))
    z = rng.standard_normal(x0.shape)
    stage = OracleStage(x0, s)
    for k in range(50, 0, -1):
        z = ddpm_step(stage, z, k, None, rng)
    assert np.sqrt(np.mean((z - x0) ** 2)) < 0.05


def test_last_step_is_deterministic():
    s = NoiseSchedule.linear(50)
    x0 = np.random.default_rng(0).uniform(-1, 1, (2, 4, 4, 3))
    z = np.random.default_rng(1).standard_normal(x0.shape)
    a = ddpm_step(OracleStage(x0, s), z, 1, None, np.random.default_rng(2))
    b = ddpm_step(OracleStage(x0, s), z, 1, None, np.random.default_rng(3))
    assert np.array_equal(a, b)
    c = posterior_step(s, z, 2, x0, np.random.default_rng(2))
    d = posterior_step(s, z, 2, x0, np.random.default_rng(3))
    assert not np.array_equal(c, d)


def test_step_rejects_t_zero():
    s = NoiseSchedule.linear(5)
    with pytest.raises(ValueError):
        ddpm_step(OracleStage(np.zeros((1, 2, 2, 3)), s), np.zeros((1, 2, 2, 3)), 0, None, np.random.default_rng())


def test_respacing_keeps_alpha_bars_and_timesteps():
    s = NoiseSchedule.linear(200)
    r = s.respace(50)
    assert r.T == 50
    assert r.timesteps[-1] == 200 and r.timesteps[1] == 1
    np.testing.assert_allclose(r.alpha_bars[1:], s.alpha_bars[r.timesteps[1:]], rtol=1e-12)


def test_upsample_nearest():
    x = np.arange(4.0).reshape(1, 2, 2, 1)
    assert upsample_nearest(x, 2)[0, :, :, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


SMALL = dict(base_dim=8, heads=2, d_cond=8, d_text=8, text_heads=2, d_graph=8, text_layers=1, graph_layers=1)


def _small_cascade(**kw):
    return Cascade(CascadeConfig(**{**SMALL, **kw}), Vocabulary.from_grammar(), np.random.default_rng(0))


def test_cascade_shapes_and_graph_masking():
    casc = _small_cascade()
    caps = ["a red circle left of a blue square", "a green triangle"]
    graphs = [parse_caption(c) for c in caps]
    for use_graph in (True, False):
        imgs = cascade_sample(casc, casc.condition(caps, graphs, use_graph), np.random.default_rng(0), steps=3)
        assert [i.shape for i in imgs] == [(2, 8, 8, 3), (2, 16, 16, 3), (2, 32, 32, 3)]
        assert all(np.abs(i).max() <= 1 for i in imgs)


def test_untrained_samples_are_centred():
    casc = _small_cascade()
    cond = casc.condition(["a red circle"] * 8, [parse_caption("a red circle")] * 8)
    img = sample_stage(casc.stages[0], cond, np.random.default_rng(0), steps=10)
    assert abs(img.mean()) < 0.2


def test_sampling_is_reproducible():
    casc = _small_cascade()
    cond = casc.condition(["a red circle"], [parse_caption("a red circle")])
    a = cascade_sample(casc, cond, np.random.default_rng(5), steps=3, n_stages=2)
    b = cascade_sample(casc, cond, np.random.default_rng(5), steps=3, n_stages=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sr_stage_needs_low_res_input():
    casc = _small_cascade()
    cond = casc.condition(["a red circle"])
    with pytest.raises(ValueError):
        casc.stages[1].predict(np.zeros((1, 16, 16, 3), np.float32), 3, cond)


def test_bad_ladder_rejected():
    with pytest.raises(ValueError):
        _small_cascade(resolutions=(8, 24, 48))
