import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clap.distributions import (BETA_FLOOR, MIN_STD, SUPPORT_EPS, Bernoulli, BetaVector, DiagGaussian,
                                TanhGaussian, entropy, kl_gaussian, mode)
from clap.numerics import make_generator

T = torch.tensor


def test_constants():
    assert MIN_STD == 1e-4 and BETA_FLOOR == 1e-4 and SUPPORT_EPS == 1e-6


def test_standard_gaussian_sample_is_noise():
    z = T([0.3, -1.7])
    assert torch.equal(DiagGaussian(torch.zeros(2), torch.ones(2)).rsample(noise=z), z)


def test_floored_std_sample():
    d = DiagGaussian.from_raw(torch.cat([T([5.0]), T([-50.0])]))
    x = d.rsample(make_generator(0))
    assert abs(x.item() - 5.0) < 10 * MIN_STD
    assert d.std.item() == pytest.approx(MIN_STD, rel=1e-6)


def test_beta_two_two_mean_mc():
    d = BetaVector(torch.full((100_000,), 2.0, dtype=torch.float64), torch.full((100_000,), 2.0, dtype=torch.float64))
    assert abs(d.rsample(make_generator(0)).mean().item() - 0.5) < 0.01


def test_rsample_seeded():
    d = BetaVector(T([2.0, 3.0]), T([4.0, 1.5]))
    assert torch.equal(d.rsample(make_generator(7)), d.rsample(make_generator(7)))


def test_known_log_probs():
    std = DiagGaussian(torch.zeros(1), torch.ones(1))
    assert std.log_prob(torch.zeros(1)).item() == pytest.approx(-0.9189385, abs=1e-6)
    uni = BetaVector(torch.ones(3), torch.ones(3))
    assert uni.log_prob(T([0.1, 0.5, 0.93])).item() == pytest.approx(0.0, abs=1e-6)


def test_beta_log_prob_clamps_bounds():
    d = BetaVector(T([2.0, 2.0]), T([3.0, 3.0]))
    assert torch.isfinite(d.log_prob(T([0.0, 1.0])))


def test_kl_examples():
    p = DiagGaussian(torch.zeros(3), torch.ones(3))
    assert kl_gaussian(p, p).item() == 0.0
    q = DiagGaussian(torch.ones(1), torch.ones(1))
    assert kl_gaussian(q, DiagGaussian(torch.zeros(1), torch.ones(1))).item() == pytest.approx(0.5)


def test_kl_matches_monte_carlo(f64):
    g = make_generator(1)
    q = DiagGaussian(torch.randn(5, generator=g) * 0.5, torch.rand(5, generator=g) + 0.5)
    p = DiagGaussian(torch.randn(5, generator=g) * 0.5, torch.rand(5, generator=g) + 0.5)
    x = q.rsample(noise=torch.randn(200_000, 5, generator=g))
    mc = (q.log_prob(x) - p.log_prob(x)).mean().item()
    assert abs(mc - kl_gaussian(q, p).item()) / kl_gaussian(q, p).item() < 0.02


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(0.01, 5), min_size=4, max_size=4))
def test_kl_nonnegative(means, stds):
    q = DiagGaussian(T(means[:2], dtype=torch.float64), T(stds[:2], dtype=torch.float64))
    p = DiagGaussian(T(means[2:], dtype=torch.float64), T(stds[2:], dtype=torch.float64))
    assert kl_gaussian(q, p).item() >= -1e-12


def test_gaussian_pathwise_gradient_exact():
    mu = T([0.4, -1.0], requires_grad=True)
    sigma = T([0.7, 2.0], requires_grad=True)
    z = T([1.3, -0.2])
    DiagGaussian(mu, sigma).rsample(noise=z).sum().backward()
    assert mu.grad.tolist() == [1.0, 1.0]
    assert torch.equal(sigma.grad, z)


def test_tanh_samples_inside_support_and_finite_log_prob():
    d = TanhGaussian(DiagGaussian(torch.full((10_000, 2), 3.0), torch.full((10_000, 2), 5.0)))
    x, logp = d.rsample_with_log_prob(make_generator(0))
    assert (x.abs() < 1).all()
    assert torch.isfinite(logp).all()
    assert torch.isfinite(d.log_prob(x)).all()


def test_tanh_density_matches_histogram(f64):
    d = TanhGaussian(DiagGaussian(T([0.3]), T([0.8])))
    x = d.rsample(noise=torch.randn(1_000_000, 1, generator=make_generator(2)))
    counts, edges = np.histogram(x.numpy().ravel(), bins=40, range=(-0.95, 0.95))
    width = edges[1] - edges[0]
    centers = torch.from_numpy((edges[:-1] + edges[1:]) / 2).unsqueeze(-1)
    # average the density over each bin by fine quadrature
    fine = torch.linspace(0, 1, 21, dtype=torch.float64)
    pts = torch.from_numpy(edges[:-1]).unsqueeze(-1) + fine * width
    dens = d.log_prob(pts.unsqueeze(-1)).exp()
    expected = torch.trapezoid(dens, dx=width / 20, dim=-1) / width
    empirical = counts / (len(x) * width)
    rel = np.abs(empirical - expected.numpy()) / expected.numpy()
    assert rel.max() < 0.02, rel.max()
    assert centers.shape[0] == 40


def test_tanh_entropy_is_negative_log_prob_of_sample():
    d = TanhGaussian(DiagGaussian(T([0.1, 0.2]), T([0.5, 0.9])))
    z = T([0.3, -0.4])
    x, logp = d.rsample_with_log_prob(noise=z)
    assert d.entropy(noise=z).item() == pytest.approx(-logp.item())


@pytest.mark.parametrize("a,b", [(1.1, 1.1), (2.0, 5.0), (9.5, 1.3), (4.0, 4.0)])
def test_beta_density_integrates_to_one(a, b):
    x = torch.linspace(0, 1, 200_001, dtype=torch.float64)[1:-1]
    d = BetaVector(T([a], dtype=torch.float64), T([b], dtype=torch.float64))
    dens = d.log_prob(x.unsqueeze(-1)).exp()
    assert abs(torch.trapezoid(dens, x).item() - 1.0) < 1e-3


def test_entropy_and_mode_examples():
    assert entropy(DiagGaussian(torch.zeros(1), torch.ones(1))).item() == pytest.approx(1.4189385, abs=1e-6)
    assert mode(BetaVector(T([2.0]), T([2.0]))).item() == pytest.approx(0.5)
    assert mode(BetaVector(T([5.0]), T([2.0]))).item() == pytest.approx(0.8)
    # undefined mode falls back to the mean
    assert mode(BetaVector(T([0.5]), T([1.5]))).item() == pytest.approx(0.25)


def test_beta_entropy_matches_quadrature(f64):
    d = BetaVector(T([2.5]), T([4.0]))
    x = torch.linspace(0, 1, 100_001)[1:-1].unsqueeze(-1)
    lp = d.log_prob(x)
    assert d.entropy().item() == pytest.approx(-torch.trapezoid(lp.exp() * lp, x.squeeze(-1)).item(), abs=1e-4)


def test_beta_huge_concentration_mode_is_center():
    d = BetaVector(T([1e6]), T([1e6]))
    assert 2 * d.mode().item() - 1 == pytest.approx(0.0, abs=1e-6)


def test_beta_implicit_gradient_matches_fd(f64):
    a = T([2.3, 1.4], requires_grad=True)
    b = T([3.1, 6.0], requires_grad=True)
    u = T([0.3, 0.8])
    x = BetaVector(a, b).rsample(noise=u)
    ga, gb = torch.autograd.grad(x.sum(), [a, b])
    h = 1e-6
    for i in range(2):
        e = torch.zeros(2)
        e[i] = h
        fa = (BetaVector(a + e, b).rsample(noise=u) - BetaVector(a - e, b).rsample(noise=u))[i] / (2 * h)
        fb = (BetaVector(a, b + e).rsample(noise=u) - BetaVector(a, b - e).rsample(noise=u))[i] / (2 * h)
        assert ga[i].item() == pytest.approx(fa.item(), rel=1e-5)
        assert gb[i].item() == pytest.approx(fb.item(), rel=1e-5)


def test_bernoulli_log_prob_and_mode():
    d = Bernoulli(T([math.log(3.0)]))  # p = 0.75
    assert d.probs.item() == pytest.approx(0.75)
    assert d.log_prob(T([1.0])).item() == pytest.approx(math.log(0.75))
    assert d.log_prob(T([0.0])).item() == pytest.approx(math.log(0.25))
    assert d.mode().item() == 1.0


def test_invalid_gaussian_rejected():
    with pytest.raises(Exception):
        DiagGaussian(torch.zeros(2), T([1.0, -1.0]))
