import numpy as np
import pytest

from ummdiff import numerics as nx
from ummdiff.diffusion import (
    SamplerConfig,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    fuse_predictions,
    make_schedule,
    q_sample,
    q_step,
    training_loss,
)


@pytest.fixture(scope="module")
def sched():
    return make_schedule(1000, 1e-4, 0.02)


# ---- schedule ------------------------------------------------------------

def test_first_alpha_bar(sched):
    assert sched.alpha_bars[1] == pytest.approx(0.9999, abs=1e-12)
    assert sched.alpha_bars[0] == 1.0 and sched.T == 1000


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bars[1] == 0.5


@pytest.mark.parametrize("start,end", [(1e-4, 0.02), (0.3, 0.3), (1e-6, 0.9)])
def test_alpha_bar_strictly_decreasing(start, end):
    ab = make_schedule(50, start, end).alpha_bars
    assert np.all(np.diff(ab) < 0)


@pytest.mark.parametrize("start,end", [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)])
def test_invalid_beta_range(start, end):
    with pytest.raises(ValueError):
        make_schedule(10, start, end)


# ---- forward process -----------------------------------------------------

def test_q_step_without_noise_scales(sched):
    x = np.linspace(-1, 1, 12).reshape(2, 2, 3)
    np.testing.assert_allclose(q_step(sched, x, 7, np.zeros_like(x)), np.sqrt(1 - sched.betas[7]) * x)


def test_q_step_is_identity_when_beta_vanishes():
    s = make_schedule(3, 1e-12, 1e-12)
    x = np.arange(6.0)
    np.testing.assert_allclose(q_step(s, x, 2, np.ones(6)), x, atol=1e-5)


def test_q_sample_without_noise(sched):
    x0 = np.full((1, 2, 2, 3), 0.5)
    np.testing.assert_allclose(q_sample(sched, x0, 10, np.zeros_like(x0)), np.sqrt(sched.alpha_bars[10]) * x0)


def test_q_sample_at_T_is_nearly_the_noise(sched):
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (4, 16, 16, 3))
    eps = rng.standard_normal(x0.shape)
    out = q_sample(sched, x0, 1000, eps)
    ab = sched.alpha_bars[1000]
    bound = np.sqrt(ab) * np.abs(x0).max() + abs(np.sqrt(1 - ab) - 1) * np.abs(eps).max()
    assert np.abs(out - eps).max() <= bound + 1e-12


@pytest.mark.parametrize("t", [0, 1001])
def test_timestep_range_is_checked(sched, t):
    with pytest.raises(ValueError):
        q_sample(sched, np.zeros(3), t, np.zeros(3))
    with pytest.raises(ValueError):
        q_step(sched, np.zeros(3), t, np.zeros(3))


# ---- denoiser ------------------------------------------------------------

def test_denoiser_shape_and_determinism(tiny_model):
    x = np.random.default_rng(0).standard_normal((3, 8, 8, 3)).astype(np.float32)
    h = np.random.default_rng(1).standard_normal((3, 8, 16)).astype(np.float32)
    for t in (1, 50, 100):
        a = tiny_model.predict_noise(x, h, t)
        assert a.shape == x.shape
        np.testing.assert_array_equal(a, tiny_model.predict_noise(x, h, t))


def test_null_mask_rows_match_the_null_branch(tiny_model):
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3)).astype(np.float32)
    h = np.random.default_rng(1).standard_normal((2, 8, 16)).astype(np.float32)
    mixed = tiny_model.denoiser(x, 5, h, np.array([True, False])).data
    null = tiny_model.predict_noise(x, None, 5)
    cond = tiny_model.predict_noise(x, h, 5)
    np.testing.assert_allclose(mixed[0], null[0], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(mixed[1], cond[1], rtol=1e-5, atol=1e-6)
    assert not np.allclose(null, cond)


def test_denoiser_rejects_bad_shapes(tiny_model):
    with pytest.raises(nx.ShapeError):
        tiny_model.predict_noise(np.zeros((1, 16, 16, 3)), None, 1)
    with pytest.raises(nx.ShapeError):
        tiny_model.predict_noise(np.zeros((2, 8, 8, 3)), np.zeros((1, 8, 16)), 1)


# ---- training loss -------------------------------------------------------

def test_loss_is_zero_for_the_true_noise(sched):
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (4, 8, 8, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 10, 100, 1000])
    loss = training_loss(lambda x_t, t_: nx.Tensor(eps), x0, sched, rng, t=t, eps=eps)
    assert loss.item() == 0.0


def test_loss_of_a_zero_predictor_is_the_pixel_count(sched):
    rng = np.random.default_rng(0)
    x0 = np.zeros((4000, 4, 4, 3))
    loss = training_loss(lambda x_t, t_: nx.Tensor(np.zeros_like(x_t.data)), x0, sched, rng)
    assert loss.item() == pytest.approx(48, rel=0.02)


def test_loss_decreases_when_overfitting_two_samples(tiny_model):
    tiny_model.set_phase("pretrain")
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 8, 8, 3)).astype(np.float32)
    h = tiny_model.tiue.encode_text_condition(np.stack([tiny_model.tokens("a dog").ids] * 2)).data
    t = np.array([30, 60])
    eps = rng.standard_normal(x0.shape)
    state = nx.AdamState(lr=3e-3)

    def loss_fn():
        return training_loss(lambda x_t, t_: tiny_model.denoiser(x_t, t_, h), x0, tiny_model.schedule,
                             rng, t=t, eps=eps)

    start = loss_fn().item()
    for _ in range(150):
        loss = loss_fn()
        nx.adam_step(tiny_model.store, tiny_model.store.gradients(loss), state)
    assert loss_fn().item() < 0.5 * start


# ---- fused guidance ------------------------------------------------------

def test_fused_scalar_probe():
    assert fuse_predictions(1.0, 0.0, 0.0, 0.5, 2.0) == 1.0


def test_fused_reduces_to_single_condition_guidance():
    rng = np.random.default_rng(0)
    u, y, n = (rng.standard_normal(10) for _ in range(3))
    w = 7.5
    np.testing.assert_allclose(fuse_predictions(u, y, n, 1.0, w), w * u + (1 - w) * n, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(u, y, n, 0.0, w), w * y + (1 - w) * n, atol=1e-12)
    np.testing.assert_allclose(fuse_predictions(u, y, None, 0.3, 1.0), 0.3 * u + 0.7 * y, atol=1e-12)


def test_fused_shift_equivariance():
    rng = np.random.default_rng(1)
    u, y, n = (rng.standard_normal(10) for _ in range(3))
    c = 3.25
    np.testing.assert_allclose(fuse_predictions(u + c, y + c, n + c, 0.4, 5.0),
                               fuse_predictions(u, y, n, 0.4, 5.0) + c, atol=1e-12)


def test_fused_rejects_alpha_out_of_range():
    with pytest.raises(ValueError):
        fuse_predictions(0.0, 0.0, 0.0, 1.5, 2.0)


def test_sampler_config_defaults_and_validation():
    cfg = SamplerConfig()
    assert (cfg.alpha, cfg.guidance, cfg.steps, cfg.eta) == (0.5, 7.5, 50, 0.0)
    for bad in ({"alpha": -0.1}, {"guidance": -1}, {"steps": 0}, {"eta": 2}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


# ---- DDIM ----------------------------------------------------------------

def test_timesteps_are_uniform_and_decreasing():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)
    assert np.ptp(np.diff(ts)) <= 1


def test_single_step_starts_at_T():
    assert ddim_timesteps(1000, 1).tolist() == [1000]
    assert ddim_timesteps(5, 50).tolist() == [5, 4, 3, 2, 1]


def test_deterministic_step_with_true_noise_recovers_the_marginal(sched):
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 4, 4, 3))
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(sched, x0, 700, eps)
    np.testing.assert_allclose(ddim_step(sched, x_t, eps, 700, 300), q_sample(sched, x0, 300, eps), atol=1e-10)
    np.testing.assert_allclose(ddim_step(sched, x_t, eps, 700, 0), x0, atol=1e-10)


def test_ddim_step_argument_checks(sched):
    x = np.zeros(3)
    with pytest.raises(ValueError):
        ddim_step(sched, x, x, 5, 5)
    with pytest.raises(ValueError):
        ddim_step(sched, x, x, 5, 2, eta=1.0)


def test_stochastic_ddim_uses_the_noise(sched):
    x, eps = np.zeros(3), np.ones(3)
    a = ddim_step(sched, x, eps, 500, 400, eta=1.0, noise=np.zeros(3))
    b = ddim_step(sched, x, eps, 500, 400, eta=1.0, noise=np.ones(3))
    assert not np.allclose(a, b)


def test_sampler_records_a_trajectory(sched):
    traj = []
    x_T = np.random.default_rng(0).standard_normal((2, 3))
    ddim_sample(lambda x, t: 0.5 * x, sched, x_T, 10, trajectory=traj)
    assert [t for t, _, _ in traj] == ddim_timesteps(1000, 10).tolist()
    np.testing.assert_array_equal(traj[0][1], x_T)


# ---- full sampling -------------------------------------------------------

def test_sampling_is_bit_reproducible(tiny_model):
    cfg = SamplerConfig(steps=5, seed=3)
    cond = [tiny_model.condition("a dog on grass", [np.zeros((6, 6, 3), np.float32)], [2])]
    a, b = tiny_model.sample(cond, cfg), tiny_model.sample(cond, cfg)
    assert a.shape == (1, 8, 8, 3) and a.min() >= -1 and a.max() <= 1
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_no_subjects_matches_the_pure_text_path(tiny_model, alpha):
    cond = [tiny_model.condition("a red circle on sky")]
    out = tiny_model.sample(cond, SamplerConfig(alpha=alpha, steps=4, seed=0))
    ref = tiny_model.sample(cond, SamplerConfig(alpha=0.0, steps=4, seed=0))
    np.testing.assert_array_equal(out, ref)


def test_batched_branches_equal_separate_predictions(tiny_model):
    """The sampler's single batched denoiser call reproduces three separate calls."""
    crop = np.random.default_rng(0).uniform(-1, 1, (6, 6, 3)).astype(np.float32)
    conds = [tiny_model.condition("a dog on grass", [crop], [2])]
    h_u, h_y = tiny_model.encode_conditions(conds)
    cfg = SamplerConfig(alpha=0.5, guidance=3.0, steps=1, seed=0)
    x_T = np.random.default_rng(0).standard_normal((1, 8, 8, 3)).astype(np.float32)
    t = 100
    fused = fuse_predictions(tiny_model.predict_noise(x_T, h_u, t), tiny_model.predict_noise(x_T, h_y, t),
                             tiny_model.predict_noise(x_T, None, t), 0.5, 3.0)
    expected = np.clip(ddim_step(tiny_model.schedule, x_T, fused.astype(np.float32), t, 0), -1, 1)
    np.testing.assert_allclose(tiny_model.sample(conds, cfg), expected, rtol=1e-4, atol=1e-5)


# ---- Gaussian sandbox ----------------------------------------------------

def test_trained_denoiser_learns_the_gaussian_optimal_noise(sched):
    """Data N(mu, sigma^2 I): eps* = sqrt(1-ab)(x_t - sqrt(ab) mu) / (sigma^2 ab + 1 - ab)."""
    from ummdiff.diffusion.denoiser import Denoiser, DenoiserConfig
    rng = np.random.default_rng(0)
    store = nx.ParameterStore()
    den = Denoiser(store, DenoiserConfig(channels=8, context_dim=8, context_len=2, heads=2, time_dim=16,
                                         groups=4, image_size=8), rng)
    mu = np.broadcast_to(np.array([0.3, -0.2, 0.5], np.float32), (8, 8, 3))
    sigma = 0.5
    state = nx.AdamState(lr=3e-3)
    for _ in range(250):
        x0 = (mu + sigma * rng.standard_normal((32, 8, 8, 3))).astype(np.float32)
        nx.adam_step(store, store.gradients(training_loss(lambda x, t: den(x, t), x0, sched, rng)), state)

    t = rng.integers(1, sched.T + 1, 512)
    ab = sched.alpha_bars[t][:, None, None, None]
    x_t = np.sqrt(ab) * (mu + sigma * rng.standard_normal((512, 8, 8, 3))) \
        + np.sqrt(1 - ab) * rng.standard_normal((512, 8, 8, 3))
    star = np.sqrt(1 - ab) * (x_t - np.sqrt(ab) * mu) / (sigma ** 2 * ab + 1 - ab)
    pred = den(x_t.astype(np.float32), t).data
    assert ((pred - star) ** 2).mean() < 0.1 * star.var()
