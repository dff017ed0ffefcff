"""
PoE / MoE / MoPoE aggregation
"""
import itertools

import numpy as np
import pytest

from mmnorm.core import fusion, gauss
from mmnorm.core.fusion import FusionMethod, FusionSpec
from mmnorm.core.gauss import DiagGaussian
from mmnorm.core.numkit import Tape
from mmnorm.utils.errors import ContractError, DimensionError


def _experts(tape, rng, modalities=3, rows=2, dim=3):
    return [
        DiagGaussian.constant(tape, rng.normal(size=(rows, dim)), rng.uniform(-3, 3, size=(rows, dim)))
        for _ in range(modalities)
    ]


def test_enumerate_subsets_order():
    assert fusion.enumerate_subsets(3) == ((0,), (1,), (0, 1), (2,), (0, 2), (1, 2), (0, 1, 2))
    assert len(fusion.enumerate_subsets(4)) == 15


@pytest.mark.parametrize("method, count", [("poe", 1), ("moe", 3), ("mopoe", 7)])
def test_component_counts_and_uniform_weights(method, count):
    mix = fusion.fuse(_experts(Tape(), np.random.default_rng(0)), FusionSpec(method=FusionMethod(method)))
    assert len(mix.components) == count
    assert abs(mix.weights.sum() - 1.0) <= 1e-12
    assert np.allclose(mix.weights, 1.0 / count)


def test_mopoe_over_full_set_equals_poe():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        experts = _experts(Tape(), rng)
        restricted = fusion.fuse(experts, FusionSpec(FusionMethod.MOPOE, subsets=((0, 1, 2),)))
        poe = fusion.fuse(experts, FusionSpec(FusionMethod.POE))
        np.testing.assert_allclose(restricted.components[0].mu.value, poe.components[0].mu.value, rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            restricted.components[0].logvar.value, poe.components[0].logvar.value, rtol=0, atol=1e-12
        )


def test_mopoe_over_singletons_without_prior_equals_moe():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        experts = _experts(Tape(), rng)
        restricted = fusion.fuse(
            experts, FusionSpec(FusionMethod.MOPOE, include_prior_in_subsets=False, subsets=((0,), (1,), (2,)))
        )
        moe = fusion.fuse(experts, FusionSpec(FusionMethod.MOE, include_prior_in_subsets=False))
        for a, b, q in zip(restricted.components, moe.components, experts):
            np.testing.assert_array_equal(a.mu.value, b.mu.value)
            np.testing.assert_array_equal(a.mu.value, q.mu.value)
            np.testing.assert_array_equal(a.logvar.value, q.logvar.value)


def test_mopoe_components_follow_precision_formula():
    tape = Tape()
    experts = _experts(tape, np.random.default_rng(3), modalities=2)
    mix = fusion.fuse(experts, FusionSpec(FusionMethod.MOPOE))
    precision = [np.exp(-q.logvar.value) for q in experts]
    for subset, component in zip(mix.subsets, mix.components):
        total = 1.0 + sum(precision[i] for i in subset)
        mean = sum(experts[i].mu.value * precision[i] for i in subset) / total
        np.testing.assert_allclose(component.mu.value, mean, rtol=1e-12)
        np.testing.assert_allclose(component.logvar.value, -np.log(total), rtol=1e-12, atol=1e-14)


def test_joint_posterior_mean_is_weighted_component_mean():
    mix = fusion.fuse(_experts(Tape(), np.random.default_rng(4)), FusionSpec())
    expected = np.mean([q.mu.value for q in mix.components], axis=0)
    np.testing.assert_allclose(fusion.joint_posterior_mean(mix).value, expected, rtol=1e-12, atol=1e-14)


def test_single_component_kl_is_closed_form():
    tape = Tape()
    mix = fusion.fuse(_experts(tape, np.random.default_rng(5)), FusionSpec(FusionMethod.POE))
    np.testing.assert_array_equal(
        mix.kl_to_prior(np.zeros((1, 2, 3))).value, gauss.kl_to_std_normal(mix.components[0]).value
    )


def test_sample_uses_stratified_components():
    tape = Tape()
    experts = [
        DiagGaussian.constant(tape, np.full((4, 1), 0.0), np.zeros((4, 1))),
        DiagGaussian.constant(tape, np.full((4, 1), 10.0), np.zeros((4, 1))),
    ]
    mix = fusion.fuse(experts, FusionSpec(FusionMethod.MOE, include_prior_in_subsets=False))
    np.testing.assert_allclose(mix.sample(np.zeros((4, 1))).value.ravel(), [0.0, 10.0, 0.0, 10.0])


def test_fusion_spec_round_trip():
    spec = FusionSpec(FusionMethod.MOPOE, include_prior_in_subsets=False, subsets=((0,), (0, 1)))
    assert FusionSpec.from_dict(spec.to_dict()) == spec
    assert FusionSpec.from_dict(FusionSpec().to_dict()) == FusionSpec()


def test_fuse_validation():
    with pytest.raises(ContractError):
        fusion.fuse([], FusionSpec())
    tape = Tape()
    with pytest.raises(DimensionError):
        fusion.fuse([
            DiagGaussian.constant(tape, np.zeros((2, 2)), np.zeros((2, 2))),
            DiagGaussian.constant(tape, np.zeros((3, 2)), np.zeros((3, 2))),
        ], FusionSpec())
    with pytest.raises(ContractError):
        fusion.fuse(_experts(tape, np.random.default_rng(6), modalities=2), FusionSpec(subsets=((0, 2),)))


@pytest.mark.parametrize("method", list(FusionMethod))
def test_fuse_is_invariant_to_modality_relabeling(method):
    tape = Tape()
    experts = _experts(tape, np.random.default_rng(15), modalities=3)
    spec = FusionSpec(method)
    base = fusion.fuse(experts, spec)
    by_subset = dict(zip(base.subsets, base.components))
    for order in itertools.permutations(range(3)):
        relabeled = fusion.fuse([experts[i] for i in order], spec)
        assert len(relabeled.subsets) == len(base.subsets)
        for subset, component in zip(relabeled.subsets, relabeled.components):
            original = by_subset[tuple(sorted(order[i] for i in subset))]
            np.testing.assert_allclose(component.mu.value, original.mu.value, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(component.logvar.value, original.logvar.value, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(
            fusion.joint_posterior_mean(relabeled).value, fusion.joint_posterior_mean(base).value,
            rtol=1e-12, atol=1e-14,
        )


def test_joint_posterior_mean_matches_sample_mean():
    n = 100_000
    rng = np.random.default_rng(16)
    mus, logvars = rng.normal(size=(2, 2)), rng.uniform(-1, 1, size=(2, 2))
    tape = Tape()
    experts = [DiagGaussian.constant(tape, np.tile(m, (n, 1)), np.tile(lv, (n, 1))) for m, lv in zip(mus, logvars)]
    mix = fusion.fuse(experts, FusionSpec(FusionMethod.MOPOE))

    draws = mix.sample(rng.standard_normal((n, 2))).value
    comp_mu = np.array([q.mu.value[0] for q in mix.components])
    comp_var = np.array([np.exp(q.logvar.value[0]) for q in mix.components])
    mean = fusion.joint_posterior_mean(mix).value[0]
    var = mix.weights @ (comp_var + comp_mu ** 2) - mean ** 2
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3 * np.sqrt(var / n))
