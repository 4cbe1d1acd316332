import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskiba import classifier as clf
from deskiba import evaluate as ev
from deskiba import iba
from deskiba import rng
from deskiba import tensor as T
from deskiba.heatmap import bilinear_matrix, resize_bilinear
from gradcheck import numeric_grad_at, rel_err


def closed_form(m, z):
    return -math.log(1 - m) + ((1 - m) ** 2 + m * m * z * z - 1) / 2


# ---------------------------------------------------------------- inject_noise


def test_full_mask_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32)
    eta = np.random.default_rng(1).normal(size=x.shape).astype(np.float32)
    np.testing.assert_array_equal(iba.inject_noise(x, np.ones_like(x), eta).data, x)


def test_zero_mask_gives_noise():
    x = np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32)
    eta = np.random.default_rng(1).normal(size=x.shape).astype(np.float32)
    np.testing.assert_array_equal(iba.inject_noise(x, np.zeros_like(x), eta).data, eta)


def test_half_mask_arithmetic():
    out = iba.inject_noise(np.array([2.0]), np.array([0.5]), np.array([0.0]))
    assert out.data[0] == 1.0


def test_inject_noise_with_sample_axis():
    x, m = np.ones((2, 2)), np.full((2, 2), 0.25)
    eta = np.stack([np.zeros((2, 2)), np.full((2, 2), 4.0)])
    np.testing.assert_allclose(iba.inject_noise(x, m, eta).data, [np.full((2, 2), 0.25), np.full((2, 2), 3.25)])


def test_inject_noise_errors():
    with pytest.raises(T.ShapeError):
        iba.inject_noise(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        iba.inject_noise(np.ones(2), np.array([0.5, 1.5]), np.ones(2))


# ---------------------------------------------------------------- noise


def test_degenerate_noise_sits_on_mu():
    mu = np.linspace(-1, 1, 50).reshape(2, 5, 5)
    stats = clf.FeatureStats(mu, np.full_like(mu, 1e-5))
    eta = iba.sample_noise(stats, rng.stream(0, "n"))
    assert np.all(np.abs(eta - mu) <= 6e-5)


def test_noise_mean_within_four_standard_errors():
    mu = np.array([[[0.5, -2.0]]])
    sigma = np.array([[[1.0, 3.0]]])
    eta = iba.sample_noise(clf.FeatureStats(mu, sigma), rng.stream(1, "n"), 10000)
    se = sigma / math.sqrt(10000)
    assert np.all(np.abs(eta.mean(axis=0) - mu) < 4 * se)


def test_noise_is_seeded():
    stats = clf.FeatureStats(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))
    a = iba.sample_noise(stats, rng.stream(3, "n"), 2)
    np.testing.assert_array_equal(a, iba.sample_noise(stats, rng.stream(3, "n"), 2))


# ---------------------------------------------------------------- capacity_kl


def test_kl_zero_mask():
    assert np.all(iba.capacity_kl(0.0, np.array([-3.0, 0.0, 5.0]), 0.0, 1.0) == 0)


@pytest.mark.parametrize("m, z, expected", [(0.5, 0.0, 0.318147), (0.9, 2.0, 3.427585)])
def test_kl_worked_values(m, z, expected):
    assert float(iba.capacity_kl(m, z, 0.0, 1.0)) == pytest.approx(expected, abs=1e-6)


def test_kl_standardizes():
    assert float(iba.capacity_kl(0.9, 7.0, 3.0, 2.0)) == pytest.approx(closed_form(0.9, 2.0), abs=1e-12)


def test_kl_clamp_keeps_finite():
    value = float(iba.capacity_kl(1.0, 1.0, 0.0, 1.0))
    assert math.isfinite(value)
    assert value == pytest.approx(closed_form(1 - 1e-6, 1.0), rel=1e-9)


def test_kl_rejects_small_sigma_and_bad_mask():
    with pytest.raises(ValueError):
        iba.capacity_kl(0.5, 0.0, 0.0, 1e-7)
    with pytest.raises(ValueError):
        iba.capacity_kl(1.5, 0.0, 0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 1 - 1e-6),
    st.floats(0, 1 - 1e-6),
    st.floats(-20, 20),
)
def test_kl_monotone_in_mask(m1, m2, z):
    lo, hi = sorted((m1, m2))
    assert iba.capacity_kl(lo, z, 0.0, 1.0) <= iba.capacity_kl(hi, z, 0.0, 1.0) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1 - 1e-6), st.floats(-20, 20))
def test_kl_nonnegative(m, z):
    assert iba.capacity_kl(m, z, 0.0, 1.0) >= 0


def test_kl_matches_scipy_gaussian_entropy_identity():
    # KL(N(a, s^2) || N(0, 1)) = -ln s + (s^2 + a^2 - 1) / 2
    from scipy import stats

    for m, z in [(0.3, 1.0), (0.7, -2.5), (0.95, 0.2)]:
        s = 1 - m
        p = stats.norm(m * z, s)
        cross = -p.expect(lambda t: stats.norm.logpdf(t))
        assert float(iba.capacity_kl(m, z, 0.0, 1.0)) == pytest.approx(cross - p.entropy(), abs=1e-8)


# ---------------------------------------------------------------- mask parametrization


def test_gaussian_matrix_rows_sum_to_one():
    g = iba.gaussian_matrix(16, 1.0)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    np.testing.assert_array_equal(iba.gaussian_matrix(5, 0.0), np.eye(5))


def test_initial_mask_near_one_and_clamped():
    state = iba.MaskState.initial((4, 16, 16), iba.BottleneckConfig())
    m = state.mask()
    assert np.all(m <= 1 - 1e-6 + 1e-7) and np.all(m > 0.99)
    big = iba.MaskState(np.full((1, 4, 4), 50.0), iba.BottleneckConfig(smoothing_sigma=0))
    assert np.all(1 - big.mask().astype(np.float64) >= 1e-6 - 1e-7)


def test_smoothing_of_uniform_alpha_is_uniform():
    state = iba.MaskState(np.full((2, 16, 16), -1.0), iba.BottleneckConfig())
    np.testing.assert_allclose(state.mask(), 1 / (1 + math.e), rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        iba.BottleneckConfig(samples=0)
    with pytest.raises(ValueError):
        iba.BottleneckConfig(readout="gradient")


# ---------------------------------------------------------------- objective


def small_setup(arch="A", seed=0):
    with T.precision("float64"):
        model = clf.build_model(arch, seed)
    images = np.random.default_rng(seed).random((6, 1, 64, 64))
    stats = clf.estimate_stats(model, images)
    return model, images, stats


def test_objective_gradient_matches_finite_differences():
    with T.precision("float64"):
        model, images, stats = small_setup()
        feats = clf.capture_single(model, images[0])
        config = iba.BottleneckConfig(beta=10.0, samples=2)
        noise = rng.stream(0, "fd").standard_normal((2, *feats.shape))
        alpha0 = rng.stream(1, "fd").normal(0.0, 2.0, size=feats.shape)
        target = int(np.argmax(clf.forward_tail(model, feats).data))

        def f(a):
            return float(iba.iba_objective(model, feats, T.Tensor(a), stats, target, config, noise).data)

        alpha = T.Tensor(alpha0, requires_grad=True)
        with T.Tape() as tape:
            loss = iba.iba_objective(model, feats, alpha, stats, target, config, noise)
        T.backward(loss, tape)
        idx = rng.stream(2, "fd").choice(alpha0.size, 30, replace=False)
        numeric = numeric_grad_at(f, alpha0, idx)
    assert rel_err(alpha.grad.reshape(-1)[idx], numeric) <= 1e-3


def test_objective_is_nonnegative():
    model, images, stats = small_setup()
    feats = clf.capture_single(model, images[1])
    config = iba.BottleneckConfig()
    for seed in range(3):
        alpha = T.Tensor(rng.stream(seed, "a").normal(0, 3, size=feats.shape))
        noise = rng.stream(seed, "z").standard_normal((3, *feats.shape))
        assert float(iba.iba_objective(model, feats, alpha, stats, 0, config, noise).data) >= 0


def test_objective_limit_of_open_mask():
    with T.precision("float64"):
        model, images, stats = small_setup()
        feats = clf.capture_single(model, images[2])
        config = iba.BottleneckConfig(smoothing_sigma=0)
        target = int(np.argmax(clf.forward_tail(model, feats).data))
        alpha = T.Tensor(np.full(feats.shape, 40.0))
        noise = rng.stream(0, "z").standard_normal((4, *feats.shape))
        loss = float(iba.iba_objective(model, feats, alpha, stats, target, config, noise).data)
        z = (feats.data - stats.mu) / stats.sigma
        capacity = iba.capacity_kl(1 - 1e-6, feats.data, stats.mu, stats.sigma).mean()
        ce = -math.log(float(clf.forward_tail(model, feats).data[target]))
    assert np.isfinite(z).all()
    assert loss == pytest.approx(capacity + config.beta * ce, rel=1e-4)


def test_shape_mismatch_rejected():
    model, images, stats = small_setup()
    feats = clf.capture_single(model, images[0])
    with pytest.raises(T.ShapeError):
        iba.iba_objective(model, feats, T.Tensor(np.zeros((2, 2, 2))), stats, 0, iba.BottleneckConfig(), np.zeros((1, 2, 2, 2)))


# ---------------------------------------------------------------- optimization


def test_beta_zero_drives_capacity_down(trained_a, default_dataset):
    s = [x for x in default_dataset.test if x.label][0]
    _, cap_full, _ = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, iba.BottleneckConfig())
    _, cap_zero, diag = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, iba.BottleneckConfig(beta=0))
    start = iba.capacity_kl(
        iba.MaskState.initial(cap_zero.per_element.shape, iba.BottleneckConfig()).mask(),
        clf.capture_single(trained_a.model, s.image[None]).data,
        trained_a.stats.mu,
        trained_a.stats.sigma,
    ).mean()
    assert cap_zero.per_element.mean() < 0.05 * start
    assert cap_zero.per_element.mean() < cap_full.per_element.mean()
    assert diag.final_loss < diag.initial_loss


def test_optimization_is_deterministic(trained_a, default_dataset):
    s = default_dataset.test[5]
    config = iba.BottleneckConfig(seed=7)
    a = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, config)
    b = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, config)
    np.testing.assert_array_equal(a[1].reduced, b[1].reduced)
    np.testing.assert_array_equal(a[0].alpha, b[0].alpha)
    assert a[2].loss_trace == b[2].loss_trace


def test_diagnostics_shape(trained_a, default_dataset):
    s = default_dataset.test[0]
    _, cap, diag = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, iba.BottleneckConfig(steps=4))
    assert len(diag.loss_trace) == 4
    assert cap.per_element.shape == (32, 16, 16) and cap.reduced.shape == (16, 16)
    assert np.all(cap.per_element >= 0)
    np.testing.assert_allclose(cap.reduced, cap.per_element.sum(axis=0) / math.log(2))


def test_final_loss_not_above_initial(trained_a, default_dataset):
    worse = []
    for s in default_dataset.test:
        cfg = ev.sample_config(iba.BottleneckConfig(), s.id)
        diag = iba.optimize_mask(trained_a.model, s.image[None], trained_a.stats, cfg)[2]
        worse.append(diag.final_loss > diag.initial_loss)
    assert np.mean(worse) <= 0.01


# ---------------------------------------------------------------- readout


def test_zero_capacity_heatmap():
    h = iba.capacity_heatmap(iba.CapacityMap(np.zeros((32, 16, 16))))
    assert h.shape == (64, 64) and not h.values.any() and h.method == "iba"


def test_uniform_capacity_is_one_bit():
    h = iba.capacity_heatmap(iba.CapacityMap(np.full((32, 16, 16), 0.0216609)))
    np.testing.assert_allclose(h.values, 32 * 0.0216609 / math.log(2), rtol=1e-12)
    assert abs(h.values.mean() - 1.0) < 1e-5


def test_zero_roi_kills_heatmap():
    h = iba.capacity_heatmap(iba.CapacityMap(np.ones((32, 16, 16))), np.zeros((64, 64)))
    assert not h.values.any() and h.roi_applied


def test_roi_shape_mismatch():
    with pytest.raises(T.ShapeError):
        iba.capacity_heatmap(iba.CapacityMap(np.ones((32, 16, 16))), np.ones((32, 32)))


def test_bilinear_matches_half_pixel_reference():
    grid = np.random.default_rng(0).random((16, 16))
    out = resize_bilinear(grid)
    # output pixel 10 sits at input coordinate (10 + 0.5) / 4 - 0.5 = 2.125
    expected_row = 0.875 * grid[2] + 0.125 * grid[3]
    ref = bilinear_matrix(64, 16) @ expected_row[:, None]
    assert out[10, 10] == pytest.approx(float(ref[10, 0]), abs=1e-12)
    np.testing.assert_allclose(bilinear_matrix(64, 16).sum(axis=1), 1.0)


def test_bilinear_agrees_with_scipy_zoom_in_interior():
    from scipy import ndimage

    grid = np.random.default_rng(1).random((16, 16))
    ours = resize_bilinear(grid)
    coords = (np.arange(64) + 0.5) / 4 - 0.5
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    theirs = ndimage.map_coordinates(grid, [rr, cc], order=1, mode="nearest")
    np.testing.assert_allclose(ours, theirs, atol=1e-12)


def test_attribute_readouts(trained_a, default_dataset):
    s = [x for x in default_dataset.test if x.label][1]
    heat, state, cap, _ = iba.attribute(trained_a.model, s.image[None], trained_a.stats, None, s.lung_mask)
    assert heat.roi_applied and not heat.values[~s.lung_mask].any()
    assert heat.config["readout"] == "capacity"
    mheat = iba.attribute(
        trained_a.model, s.image[None], trained_a.stats, iba.BottleneckConfig(readout="mask"), s.lung_mask
    )[0]
    assert mheat.values.max() <= 1.0 and mheat.values.min() >= 0.0
