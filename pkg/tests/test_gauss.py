"""
Diagonal-Gaussian algebra against quadrature and grid oracles
"""
import itertools

import numpy as np
import pytest
from scipy import integrate, stats

from mmnorm.core import gauss
from mmnorm.core import numkit as nk
from mmnorm.core.gauss import DiagGaussian
from mmnorm.core.numkit import Tape
from mmnorm.utils.errors import ContractError, DimensionError
from tests.conftest import numeric_grad

GRID = np.linspace(-15.0, 15.0, 60001)


def _kl_1d(mu, logvar):
    var = np.exp(logvar)

    def integrand(x):
        log_q = -0.5 * ((x - mu) ** 2 / var + logvar + np.log(2 * np.pi))
        log_p = -0.5 * (x * x + np.log(2 * np.pi))
        return np.exp(log_q) * (log_q - log_p)

    sd = np.sqrt(var)
    value, _ = integrate.quad(integrand, mu - 15 * sd, mu + 15 * sd, epsabs=1e-13, epsrel=1e-12, limit=200)
    return value


def test_kl_matches_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(50):
        mu = rng.uniform(-3, 3, size=(1, 3))
        logvar = rng.uniform(-3, 3, size=(1, 3))
        q = DiagGaussian.constant(Tape(), mu, logvar)
        expected = sum(_kl_1d(mu[0, j], logvar[0, j]) for j in range(3))
        assert abs(gauss.kl_to_std_normal(q).item() - expected) < 1e-7


def test_kl_of_standard_normal_is_zero():
    q = DiagGaussian.standard(Tape(), rows=4, dim=3)
    np.testing.assert_array_equal(gauss.kl_to_std_normal(q).value, np.zeros((4, 1)))


def test_kl_nonnegative_per_row():
    rng = np.random.default_rng(4)
    q = DiagGaussian.constant(Tape(), rng.normal(size=(50, 4)), rng.uniform(-5, 5, size=(50, 4)))
    kl = gauss.kl_to_std_normal(q).value
    assert kl.shape == (50, 1)
    assert (kl >= 0).all()


def test_log_density_matches_scipy():
    rng = np.random.default_rng(5)
    mu, logvar, z = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    tape = Tape()
    q = DiagGaussian.constant(tape, mu, logvar)
    expected = stats.norm.logpdf(z, loc=mu, scale=np.exp(0.5 * logvar)).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(gauss.log_density(q, tape.constant(z)).value, expected, rtol=1e-12)
    np.testing.assert_allclose(
        gauss.log_std_normal(tape.constant(z)).value,
        stats.norm.logpdf(z).sum(axis=1, keepdims=True),
        rtol=1e-12,
    )


def test_reparam_sample():
    tape = Tape()
    mu, logvar, eps = np.ones((2, 2)), np.log(np.full((2, 2), 4.0)), np.array([[1.0, -1.0], [0.5, 0.0]])
    z = gauss.reparam_sample(DiagGaussian.constant(tape, mu, logvar), eps)
    np.testing.assert_allclose(z.value, mu + 2.0 * eps)
    with pytest.raises(DimensionError):
        gauss.reparam_sample(DiagGaussian.constant(tape, mu, logvar), np.zeros((3, 2)))


@pytest.mark.parametrize("include_prior", [True, False])
def test_product_of_experts_matches_grid_product(include_prior):
    rng = np.random.default_rng(6 + include_prior)
    for _ in range(200):
        count = rng.integers(2, 4)
        mus = rng.uniform(-2, 2, size=count)
        logvars = rng.uniform(-2, 1, size=count)
        tape = Tape()
        experts = [DiagGaussian.constant(tape, m, lv) for m, lv in zip(mus, logvars)]
        fused = gauss.product_of_experts(experts, include_prior=include_prior)

        log_prod = sum(-0.5 * (GRID - m) ** 2 / np.exp(lv) for m, lv in zip(mus, logvars))
        if include_prior:
            log_prod = log_prod - 0.5 * GRID ** 2
        density = np.exp(log_prod - log_prod.max())
        density /= np.trapz(density, GRID)
        closed = stats.norm.pdf(GRID, loc=fused.mu.item(), scale=np.exp(0.5 * fused.logvar.item()))
        assert np.max(np.abs(density - closed)) <= 1e-8


def test_single_expert_without_prior_is_unchanged():
    q = DiagGaussian.constant(Tape(), np.ones((2, 3)), np.zeros((2, 3)))
    assert gauss.product_of_experts([q], include_prior=False) is q


def test_single_expert_with_prior_adds_unit_precision():
    q = DiagGaussian.constant(Tape(), np.full((1, 2), 2.0), np.zeros((1, 2)))
    fused = gauss.product_of_experts([q], include_prior=True)
    np.testing.assert_allclose(fused.mu.value, np.full((1, 2), 1.0))
    np.testing.assert_allclose(fused.logvar.value, np.full((1, 2), -np.log(2.0)))


def test_product_of_experts_validation():
    with pytest.raises(ContractError):
        gauss.product_of_experts([])
    tape = Tape()
    with pytest.raises(DimensionError):
        gauss.product_of_experts([
            DiagGaussian.constant(tape, np.zeros((2, 2)), np.zeros((2, 2))),
            DiagGaussian.constant(tape, np.zeros((2, 3)), np.zeros((2, 3))),
        ])


def test_stratified_indices():
    np.testing.assert_array_equal(gauss.stratified_indices(7, np.full(3, 1 / 3)), [0, 1, 2, 0, 1, 2, 0])
    idx = gauss.stratified_indices(8, np.array([0.5, 0.25, 0.25]))
    np.testing.assert_array_equal(np.bincount(idx, minlength=3), [4, 2, 2])


def test_mixture_sample_selects_component_per_row():
    tape = Tape()
    a = DiagGaussian.constant(tape, np.zeros((4, 2)), np.zeros((4, 2)))
    b = DiagGaussian.constant(tape, np.full((4, 2), 10.0), np.zeros((4, 2)))
    eps = np.ones((4, 2))
    z = gauss.mixture_sample([a, b], np.array([0.5, 0.5]), np.array([0, 1, 1, 0]), eps)
    np.testing.assert_allclose(z.value[:, 0], [1.0, 11.0, 11.0, 1.0])


def test_mixture_weights_validated():
    tape = Tape()
    q = DiagGaussian.constant(tape, np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ContractError):
        gauss.mixture_sample([q, q], np.array([0.7, 0.7]), np.array([0]), np.zeros((1, 1)))
    with pytest.raises(ContractError):
        gauss.mixture_kl_to_std_normal([q, q], np.array([1.0]), np.zeros((1, 1, 1)))
    with pytest.raises(DimensionError):
        gauss.mixture_kl_to_std_normal([q, q], np.array([0.5, 0.5]), np.zeros((1, 1)))


def test_mixture_kl_monte_carlo_matches_quadrature():
    rows = 20000
    params = [(-1.0, np.log(0.25)), (1.5, 0.0)]
    tape = Tape()
    components = [
        DiagGaussian.constant(tape, np.full((rows, 1), m), np.full((rows, 1), lv)) for m, lv in params
    ]
    eps = np.random.default_rng(8).standard_normal((1, rows, 1))
    estimate = gauss.mixture_kl_to_std_normal(components, np.array([0.5, 0.5]), eps).value.mean()

    def mixture_pdf(x):
        return sum(0.5 * stats.norm.pdf(x, m, np.exp(0.5 * lv)) for m, lv in params)

    expected, _ = integrate.quad(
        lambda x: mixture_pdf(x) * (np.log(mixture_pdf(x)) - stats.norm.logpdf(x)), -12, 12, limit=200
    )
    assert abs(estimate - expected) < 0.03


def test_mixture_kl_of_identical_components_estimates_closed_form():
    rows = 20000
    tape = Tape()
    q = DiagGaussian.constant(tape, np.full((rows, 2), 0.5), np.full((rows, 2), -0.5))
    eps = np.random.default_rng(9).standard_normal((1, rows, 2))
    estimate = gauss.mixture_kl_to_std_normal([q, q], np.array([0.5, 0.5]), eps).value.mean()
    closed = gauss.kl_to_std_normal(q).value[0, 0]
    assert abs(estimate - closed) < 0.03


def _gaussian_loss(builder, x):
    tape = Tape()
    leaf = tape.leaf(x)
    return tape, leaf, nk.sum(builder(tape, leaf) * WEIGHTS[: x.shape[0]])


WEIGHTS = np.random.default_rng(10).normal(size=(4, 1))
EPS = np.random.default_rng(11).normal(size=(2, 4, 2))
OTHER = np.random.default_rng(12).normal(size=(4, 2))


@pytest.mark.parametrize(
    "builder",
    [
        lambda tape, a: gauss.kl_to_std_normal(DiagGaussian(a, tape.constant(OTHER))),
        lambda tape, a: gauss.kl_to_std_normal(DiagGaussian(tape.constant(OTHER), a)),
        lambda tape, a: nk.sum(gauss.reparam_sample(DiagGaussian(a, nk.scale(a, 0.5)), EPS[0]), axis=1),
        lambda tape, a: nk.sum(gauss.product_of_experts(
            [DiagGaussian(a, tape.constant(OTHER)), DiagGaussian(tape.constant(OTHER), a)]
        ).mu, axis=1),
        lambda tape, a: nk.sum(gauss.product_of_experts(
            [DiagGaussian(a, a), DiagGaussian(tape.constant(OTHER), tape.constant(OTHER))]
        ).logvar, axis=1),
        lambda tape, a: gauss.mixture_kl_to_std_normal(
            [DiagGaussian(a, tape.constant(OTHER)), DiagGaussian(tape.constant(OTHER), nk.scale(a, 0.3))],
            np.array([0.5, 0.5]),
            EPS,
        ),
    ],
)
def test_gaussian_gradients_match_finite_differences(builder):
    x = np.random.default_rng(13).uniform(-2, 2, size=(4, 2))
    tape, leaf, loss = _gaussian_loss(builder, x)
    (grad,) = tape.backward(loss, [leaf])
    expected = numeric_grad(lambda v: _gaussian_loss(builder, v)[2].item(), x)
    np.testing.assert_allclose(grad, expected, rtol=1e-5, atol=1e-8)


def _within_moments(draws, mean, var, k=3.0):
    n = draws.shape[0]
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= k * np.sqrt(var / n))
    assert np.all(np.abs(draws.var(axis=0, ddof=1) - var) <= k * var * np.sqrt(2.0 / (n - 1)))


def test_product_of_experts_is_permutation_invariant():
    rng = np.random.default_rng(12)
    tape = Tape()
    experts = [
        DiagGaussian.constant(tape, rng.normal(size=(5, 3)), rng.uniform(-3, 3, size=(5, 3)))
        for _ in range(4)
    ]
    base = gauss.product_of_experts(experts)
    for order in itertools.permutations(range(4)):
        fused = gauss.product_of_experts([experts[i] for i in order])
        np.testing.assert_allclose(fused.mu.value, base.mu.value, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(fused.logvar.value, base.logvar.value, rtol=1e-12, atol=1e-14)


def test_reparam_sample_moments():
    n = 100_000
    mu, logvar = np.array([1.5, -0.5]), np.array([0.7, -1.2])
    q = DiagGaussian.constant(Tape(), np.tile(mu, (n, 1)), np.tile(logvar, (n, 1)))
    eps = np.random.default_rng(13).standard_normal((n, 2))
    _within_moments(gauss.reparam_sample(q, eps).value, mu, np.exp(logvar))


def test_mixture_sample_moments():
    n = 100_000
    mus, logvars = np.array([[-1.0, 2.0], [1.5, 0.0]]), np.array([[0.0, -1.0], [0.5, 0.3]])
    tape = Tape()
    components = [
        DiagGaussian.constant(tape, np.tile(m, (n, 1)), np.tile(lv, (n, 1))) for m, lv in zip(mus, logvars)
    ]
    weights = np.array([0.5, 0.5])
    eps = np.random.default_rng(14).standard_normal((n, 2))
    draws = gauss.mixture_sample(components, weights, gauss.stratified_indices(n, weights), eps).value
    mean = weights @ mus
    var = weights @ (np.exp(logvars) + mus ** 2) - mean ** 2
    _within_moments(draws, mean, var)
