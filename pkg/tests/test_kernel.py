import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kao.errors import ConfigError, DomainError
from kao.kernel import KernelConfig, hsv_map, kernel_weighted_loss, rbf_kernel, resolve_bandwidth
from kao.schedule import build_schedule

from oracles import window_variance_hsv


def test_rbf_analytic_cases():
    a = np.arange(6.0).reshape(2, 3)
    assert rbf_kernel(a, a, 0.7) == 1.0
    b = a.copy()
    b[0, 0] += math.sqrt(2) * 1.5
    assert rbf_kernel(a, b, 1.5) == pytest.approx(math.exp(-1), abs=1e-12)
    assert rbf_kernel([0.0, 0.0], [3.0, 4.0], 5.0) == pytest.approx(0.6065306597126334, abs=1e-12)


def test_rbf_errors():
    with pytest.raises(DomainError):
        rbf_kernel(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(DomainError):
        rbf_kernel(np.zeros(3), np.zeros(3), 0.0)


finite = st.floats(-10, 10, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, 8, elements=finite), arrays(np.float32, 8, elements=finite),
       st.floats(0.1, 100), st.permutations(range(8)))
def test_rbf_properties(a, b, sigma, perm):
    k = rbf_kernel(a, b, sigma)
    assert 0.0 <= k <= 1.0
    assert k == rbf_kernel(b, a, sigma)
    perm = list(perm)
    assert k == pytest.approx(rbf_kernel(a[perm], b[perm], sigma), rel=1e-12)
    if np.array_equal(a, b):
        assert k == 1.0
    elif np.sum((a.astype(np.float64) - b) ** 2) > 1e-6 * sigma**2:
        assert k < 1.0


def test_median_bandwidth_single_pair():
    cfg = KernelConfig(bandwidth_policy="median", sigma_floor=1e-3)
    a = np.zeros(2)
    b = np.array([2.0, 2.0])  # squared distance 8
    assert resolve_bandwidth([(a, b)], cfg) == pytest.approx(2.0)


def test_bandwidth_floor_engages():
    cfg = KernelConfig(bandwidth_policy="median", sigma_floor=0.25)
    x = np.ones(5)
    assert resolve_bandwidth([(x, x)] * 3, cfg) == 0.25


def test_fixed_bandwidth():
    cfg = KernelConfig(bandwidth_policy="fixed", sigma=3.0)
    assert resolve_bandwidth([(np.zeros(2), np.ones(2))], cfg) == 3.0


def test_median_matches_sorted_distances(np_rng):
    pairs = [(np_rng.normal(size=(1, 4, 4)), np_rng.normal(size=(1, 4, 4))) for _ in range(5)]
    d = sorted(float(((a - b) ** 2).sum()) for a, b in pairs)
    sigma = resolve_bandwidth(pairs, KernelConfig(bandwidth_policy="median"))
    assert sigma == pytest.approx(math.sqrt(d[2] / 2), rel=1e-12)


def test_empty_pairs_rejected():
    with pytest.raises(DomainError):
        resolve_bandwidth([], KernelConfig())


def test_kernel_config_validation():
    with pytest.raises(ConfigError):
        KernelConfig(hsv_window=4)
    with pytest.raises(ConfigError):
        KernelConfig(bandwidth_policy="mean")


def test_hsv_constant_image():
    out = hsv_map(np.full((1, 12, 12), 0.3, np.float32), 3, 0.125)
    np.testing.assert_array_equal(out, np.full((1, 12, 12), -0.125, np.float32))


def test_hsv_step_edge_band():
    img = np.zeros((1, 16, 16), np.float32)
    img[:, :, 8:] = 1.0
    out = hsv_map(img, 3, 0.0)
    np.testing.assert_array_equal(out, window_variance_hsv(img, 3, 0.0))
    assert np.all(out[0, :, 6:10] > 0)
    assert np.all(out[0, :, :4] == 0) and np.all(out[0, :, 12:] == 0)


def test_hsv_single_bright_pixel():
    img = np.zeros((1, 9, 9), np.float32)
    img[0, 4, 4] = 1.0
    np.testing.assert_array_equal(hsv_map(img, 3, 0.0), window_variance_hsv(img, 3, 0.0))


def test_hsv_even_window_rejected():
    with pytest.raises(ConfigError):
        hsv_map(np.zeros((1, 8, 8)), 4, 0.0)


def test_hsv_translation_equivariance(np_rng):
    img = np_rng.normal(size=(1, 20, 20)).astype(np.float32)
    shifted = np.roll(img, (2, 3), axis=(1, 2))
    a = hsv_map(img, 3, 0.0)[0]
    b = hsv_map(shifted, 3, 0.0)[0]
    # interior pixels whose 5x5 support touches neither a border nor the wrap seam
    np.testing.assert_allclose(b[4:16, 5:17], a[2:14, 2:14], rtol=1e-5, atol=1e-7)


class LinearDenoiser(torch.nn.Module):
    """mu = w * x + b per pixel; enough to exercise the loss."""

    def __init__(self, w=0.9, b=0.05):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(w, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor(b, dtype=torch.float64))

    def forward(self, x, t):
        return self.w * x + self.b


def _batch(rng, n=4, T=50):
    x0 = rng.uniform(-1, 1, (n, 1, 6, 6))
    xt = rng.normal(size=(n, 1, 6, 6))
    t = rng.integers(2, T + 1, n)
    return x0, xt, t


def _oracle_loss(x0, xt, t, w, b, sched, sigma=None):
    terms, dists = [], []
    for i in range(len(t)):
        a, ab, abp = sched.alpha[t[i]], sched.alpha_bar[t[i]], sched.alpha_bar[t[i] - 1]
        mu_q = (np.sqrt(abp) * (1 - a) * x0[i] + np.sqrt(a) * (1 - abp) * xt[i]) / (1 - ab)
        var = (1 - abp) * (1 - a) / (1 - ab)
        mu = w * xt[i] + b
        terms.append(np.sum((mu - mu_q) ** 2) / (2 * var))
        dists.append(np.sum((xt[i] - mu_q) ** 2))
    if sigma is None:
        sigma = math.sqrt(sorted(dists)[len(dists) // 2] / 2) if len(dists) % 2 else \
            math.sqrt((sorted(dists)[len(dists) // 2 - 1] + sorted(dists)[len(dists) // 2]) / 4)
    weights = [math.exp(-d / (2 * sigma**2)) for d in dists]
    return sum(k * v for k, v in zip(weights, terms)) / len(terms), terms


def test_loss_matches_per_sample_oracle(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    model = LinearDenoiser()
    loss = kernel_weighted_loss(x0, xt, t, model, sched, KernelConfig(), dtype=torch.float64)
    expected, _ = _oracle_loss(x0, xt, t, 0.9, 0.05, sched)
    assert loss.item() == pytest.approx(expected, rel=1e-6)


def test_infinite_bandwidth_gives_unweighted_loss(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    cfg = KernelConfig(bandwidth_policy="fixed", sigma=math.inf)
    loss = kernel_weighted_loss(x0, xt, t, LinearDenoiser(), sched, cfg, dtype=torch.float64)
    _, terms = _oracle_loss(x0, xt, t, 0.9, 0.05, sched)
    assert loss.item() == pytest.approx(np.mean(terms), rel=1e-6)


def test_single_sample_with_no_change_has_unit_weight(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng, n=1)
    # x_t equal to its posterior-mean target: choose x0 so that mu_q == xt
    a, ab, abp = sched.alpha[t[0]], sched.alpha_bar[t[0]], sched.alpha_bar[t[0] - 1]
    c0 = np.sqrt(abp) * (1 - a) / (1 - ab)
    ct = np.sqrt(a) * (1 - abp) / (1 - ab)
    x0 = (1 - ct) * xt / c0
    loss, parts = kernel_weighted_loss(x0, xt, t, LinearDenoiser(), sched, KernelConfig(),
                                       return_parts=True, dtype=torch.float64)
    assert parts["weights"][0] == pytest.approx(1.0, abs=1e-12)
    assert loss.item() == pytest.approx(parts["terms"][0], rel=1e-12)


def test_loss_nonnegative_and_monotone(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    cfg = KernelConfig(bandwidth_policy="fixed", sigma=4.0)
    losses = [kernel_weighted_loss(x0, xt, t, LinearDenoiser(0.9, b), sched, cfg, dtype=torch.float64).item()
              for b in (0.0, 0.5, 1.0, 2.0)]
    assert all(v >= 0 for v in losses)
    # the bias moves every term further from its target once it exceeds the optimum
    assert losses[1] < losses[2] < losses[3]


def test_weight_is_not_differentiated(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    model = LinearDenoiser()
    loss, parts = kernel_weighted_loss(x0, xt, t, model, sched, KernelConfig(), return_parts=True,
                                       dtype=torch.float64)
    loss.backward()
    # analytic gradient of sum_i k_i * ||w x + b - mu_q||^2 / (2 var_i) / n with k_i constant
    g_b = 0.0
    for i in range(len(t)):
        a, ab, abp = sched.alpha[t[i]], sched.alpha_bar[t[i]], sched.alpha_bar[t[i] - 1]
        mu_q = (np.sqrt(abp) * (1 - a) * x0[i] + np.sqrt(a) * (1 - abp) * xt[i]) / (1 - ab)
        var = (1 - abp) * (1 - a) / (1 - ab)
        g_b += parts["weights"][i] * np.sum(0.9 * xt[i] + 0.05 - mu_q) / var
    assert float(model.b.grad) == pytest.approx(g_b / len(t), rel=1e-9)


def test_hsv_weighting_increases_loss_on_structured_pixels(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    base = kernel_weighted_loss(x0, xt, t, LinearDenoiser(), sched, KernelConfig(), dtype=torch.float64).item()
    weighted = kernel_weighted_loss(x0, xt, t, LinearDenoiser(), sched, KernelConfig(hsv_loss_weight=5.0),
                                    dtype=torch.float64).item()
    assert weighted > base


def test_bad_steps_rejected(np_rng):
    sched = build_schedule(50)
    x0, xt, t = _batch(np_rng)
    t[0] = 1
    with pytest.raises(DomainError):
        kernel_weighted_loss(x0, xt, t, LinearDenoiser(), sched, KernelConfig())
