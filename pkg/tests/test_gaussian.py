import numpy as np
import pytest

from edumine.gaussian import (
    DiagGaussian,
    gaussian_kl,
    kl_to_standard,
    reparam_sample,
    standard_normal,
)


def test_kl_identical_standard_normals_is_exactly_zero():
    q = standard_normal(4)
    assert gaussian_kl(q, standard_normal(4)) == 0.0


def test_kl_identical_arbitrary_gaussians_is_zero():
    q = DiagGaussian(np.array([0.3, -2.0]), np.array([0.7, 3.1]))
    p = DiagGaussian(np.array([0.3, -2.0]), np.array([0.7, 3.1]))
    assert abs(gaussian_kl(q, p)) <= 1e-12


def test_kl_unit_shift_closed_form():
    # KL(N(1,1) || N(0,1)) = (mu^2 + sigma^2 - 1 - ln sigma^2) / 2 = 0.5
    q = DiagGaussian(np.array([1.0]), np.array([1.0]))
    assert gaussian_kl(q, standard_normal(1)) == pytest.approx(0.5)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        q = DiagGaussian(rng.normal(size=k), rng.uniform(0.1, 3.0, size=k))
        p = DiagGaussian(rng.normal(size=k), rng.uniform(0.1, 3.0, size=k))
        assert gaussian_kl(q, p) >= 0.0


def test_kl_matches_monte_carlo_estimate():
    # E_q[ln q - ln p] by sampling, within 3 standard errors.
    rng = np.random.default_rng(7)
    for _ in range(3):
        k = 3
        q = DiagGaussian(rng.normal(size=k), rng.uniform(0.3, 2.0, size=k))
        p = DiagGaussian(rng.normal(size=k), rng.uniform(0.3, 2.0, size=k))
        z = q.mean + q.std * rng.standard_normal((100_000, k))

        def logpdf(g, z):
            return np.sum(
                -0.5 * ((z - g.mean) / g.std) ** 2 - np.log(g.std) - 0.5 * np.log(2 * np.pi),
                axis=1,
            )

        diffs = logpdf(q, z) - logpdf(p, z)
        se = diffs.std(ddof=1) / np.sqrt(diffs.size)
        assert abs(gaussian_kl(q, p) - diffs.mean()) <= 3 * se


def test_nonpositive_std_is_fatal():
    with pytest.raises(ValueError):
        DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        DiagGaussian(np.zeros(1), np.array([-0.5]))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        gaussian_kl(standard_normal(2), standard_normal(3))


def test_reparam_zero_noise_returns_mean():
    g = DiagGaussian(np.array([2.0, -1.0]), np.array([0.5, 0.5]))
    assert np.array_equal(reparam_sample(g, np.zeros(2)), g.mean)


def test_reparam_unit_gaussian_passes_noise_through():
    eps = np.array([0.3, -1.2, 0.0])
    g = standard_normal(3)
    assert np.array_equal(reparam_sample(g, eps), eps)


def test_reparam_sample_mean_converges_to_mu():
    rng = np.random.default_rng(3)
    g = DiagGaussian(np.array([1.5, -0.5]), np.array([2.0, 0.3]))
    z = reparam_sample(g, rng.standard_normal((100_000, 2)))
    se = z.std(axis=0, ddof=1) / np.sqrt(z.shape[0])
    assert np.all(np.abs(z.mean(axis=0) - g.mean) <= 3 * se)


def test_kl_to_standard_matches_gaussian_kl():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(4, 3))
    sd = rng.uniform(0.2, 2.0, size=(4, 3))
    batch = kl_to_standard(mu, sd)
    for i in range(4):
        expected = gaussian_kl(DiagGaussian(mu[i], sd[i]), standard_normal(3))
        assert batch[i] == pytest.approx(expected, rel=1e-12)
