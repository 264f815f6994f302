"""Tests for the Fock-distribution and calibration fits."""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmtomo.dynamics import RabiCalibration, prepare_named_state
from mmtomo.exceptions import ConditioningWarning, ConfigError, RankDeficientError
from mmtomo.fockspace import DensityMatrix, HilbertConfig
from mmtomo.fitting import (
    FockDistribution,
    coherent_populations,
    fit_coherent_alpha,
    fit_fock_distribution,
    fit_fock_distribution_restricted,
    fit_thermal_nbar,
    full_basis,
    one_phonon_neighborhood,
    thermal_populations,
)
from mmtomo.measurement import TimeScanData, analytic_scan, default_time_grid, sample_scan

from refdata import P00_COHERENT_056_053

CALIB2 = RabiCalibration.distinct_modes(2, 2)
CALIB3 = RabiCalibration.distinct_modes(3, 3)
CALIB1 = RabiCalibration.distinct_modes(1, 1)
TIMES2 = default_time_grid(CALIB2, num_points=40)
W_SUPPORT = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def bell_scan(shots=None, seed=0, tau=None):
    state = prepare_named_state("bell_00_11")
    return sample_scan(state, CALIB2, TIMES2, shots=shots, seed=seed, tau=tau)


def thermal_density(nbar, levels=16):
    p = thermal_populations(nbar, levels)
    p = p / p.sum()
    cfg = HilbertConfig(1, levels - 1, num_spins=0)
    return DensityMatrix(np.diag(p), cfg)


def test_noiseless_bell_fit_is_exact():
    fit = fit_fock_distribution(bell_scan(), k_max=3)
    expected = np.zeros((4, 4))
    expected[0, 0] = expected[1, 1] = 0.5
    assert_allclose(fit.populations, expected, atol=1e-8)
    assert fit.residual < 1e-10
    assert fit.basis == full_basis(3, 2)


def test_vacuum_fit():
    pops = np.zeros((3, 3))
    pops[0, 0] = 1.0
    scan = analytic_scan(pops, CALIB2, TIMES2)
    fit = fit_fock_distribution(scan, k_max=2)
    assert_allclose(fit.populations, pops, atol=1e-9)


def test_random_distribution_round_trip(rng):
    for _ in range(5):
        pops = rng.random((3, 3))
        pops /= pops.sum()
        scan = analytic_scan(pops, CALIB2, TIMES2)
        fit = fit_fock_distribution(scan, k_max=2)
        assert_allclose(fit.populations, pops, atol=1e-7)


def test_sampled_coherent_product_ground_population():
    state = prepare_named_state("coherent_product", alpha1=0.56, alpha2=0.53)
    times = default_time_grid(CALIB2, num_points=30)
    scan = sample_scan(state, CALIB2, times, shots=400, seed=3)
    fit = fit_fock_distribution(scan, k_max=3)
    sigma = fit.sigmas()[0, 0]
    assert 0.003 < sigma < 0.05
    assert abs(fit.populations[0, 0] - P00_COHERENT_056_053) < 3 * sigma


def test_restricted_w_state_thirds():
    state = prepare_named_state("w_state")
    times = default_time_grid(CALIB3, num_points=40)
    scan = sample_scan(state, CALIB3, times, shots=None)
    basis = one_phonon_neighborhood(W_SUPPORT)
    fit = fit_fock_distribution_restricted(scan, basis)
    for tup in W_SUPPORT:
        assert abs(fit.populations[tup] - 1 / 3) < 1e-8
    assert fit.populations[1, 1, 1] == 0.0
    idx = np.ravel_multi_index((1, 1, 1), fit.populations.shape)
    assert fit.covariance[idx, idx] == 0.0


def test_one_phonon_neighborhood_tuples():
    basis = one_phonon_neighborhood(W_SUPPORT)
    assert len(basis) == 10
    expected = {
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (2, 0, 0), (0, 2, 0), (0, 0, 2),
        (1, 1, 0), (1, 0, 1), (0, 1, 1),
    }
    assert set(basis) == expected


def test_restricted_matches_full_on_support():
    scan = bell_scan()
    fit_full = fit_fock_distribution(scan, k_max=2)
    fit_sub = fit_fock_distribution_restricted(scan, [(0, 0), (1, 1)], k_max=2)
    assert_allclose(fit_sub.populations[0, 0], fit_full.populations[0, 0], atol=1e-8)
    assert_allclose(fit_sub.populations[1, 1], fit_full.populations[1, 1], atol=1e-8)


def test_excluding_support_inflates_residual():
    scan = bell_scan()
    good = fit_fock_distribution_restricted(scan, [(0, 0), (1, 1)])
    bad = fit_fock_distribution_restricted(scan, [(0, 0), (0, 1), (1, 0)])
    assert good.residual < 1e-10
    assert bad.residual > 0.05


def test_all_down_only_flag():
    fit = fit_fock_distribution(bell_scan(), k_max=2, all_down_only=True)
    assert abs(fit.populations[0, 0] - 0.5) < 1e-6
    assert abs(fit.populations[1, 1] - 0.5) < 1e-6
    assert fit.metadata["all_down_only"] is True


def test_nonneg_fit():
    state = prepare_named_state("coherent_product", alpha1=0.56, alpha2=0.53)
    scan = sample_scan(state, CALIB2, TIMES2, shots=200, seed=3)
    plain = fit_fock_distribution(scan, k_max=2)
    fit = fit_fock_distribution(scan, k_max=2, nonneg=True, bootstrap_replicates=80)
    assert fit.populations.min() >= 0.0
    assert fit.sigmas()[0, 0] > 0.003
    assert abs(fit.populations[0, 0] - plain.populations[0, 0]) < 0.05


def test_simplex_constraint():
    state = prepare_named_state("coherent_product", alpha1=0.56, alpha2=0.53)
    scan = sample_scan(state, CALIB2, TIMES2, shots=200, seed=3)
    fit = fit_fock_distribution(scan, k_max=2, simplex=True)
    assert abs(fit.populations.sum() - 1.0) < 1e-6


def test_uniform_rates_all_down_is_rank_deficient():
    uni = RabiCalibration.uniform(2, 2)
    state = prepare_named_state("bell_00_11")
    scan = sample_scan(state, uni, default_time_grid(uni, num_points=40), shots=None)
    with pytest.raises(RankDeficientError, match="distinct"):
        fit_fock_distribution(scan, k_max=1, all_down_only=True)
    try:
        fit_fock_distribution(scan, k_max=1, all_down_only=True)
    except RankDeficientError as err:
        assert err.condition_number > 1e10


def test_uniform_rates_all_configs_still_solvable():
    uni = RabiCalibration.uniform(2, 2)
    state = prepare_named_state("bell_00_11")
    scan = sample_scan(state, uni, default_time_grid(uni, num_points=40), shots=None)
    fit = fit_fock_distribution(scan, k_max=1)
    assert abs(fit.populations[1, 1] - 0.5) < 1e-8
    assert fit.metadata["condition_number"] < 100


def test_short_grid_warns_about_conditioning():
    state = prepare_named_state("bell_00_11")
    times = np.linspace(1e-9, 0.3 * TIMES2.max(), 40)
    scan = sample_scan(state, CALIB2, times, shots=None)
    with pytest.warns(ConditioningWarning):
        fit = fit_fock_distribution(scan, k_max=3)
    assert fit.metadata["condition_number"] > 1e6


def test_condition_number_grows_with_k_max():
    scan = bell_scan()
    conds = [
        fit_fock_distribution(scan, k_max=k).metadata["condition_number"]
        for k in (1, 2, 3)
    ]
    assert conds[0] < conds[1] < conds[2]


def test_envelope_basis_recovers_populations():
    tau = 0.4 * TIMES2.max()
    scan = bell_scan(tau=tau)
    fit = fit_fock_distribution(scan, k_max=2)
    assert fit.metadata["envelope_tau"] == tau
    assert abs(fit.populations[0, 0] - 0.5) < 1e-8
    assert abs(fit.populations[1, 1] - 0.5) < 1e-8

    stripped = TimeScanData(scan.times, dict(scan.populations), None, CALIB2)
    biased = fit_fock_distribution(stripped, k_max=2)
    assert abs(biased.populations[0, 0] - 0.5) > 1e-3


@pytest.mark.parametrize("nbar", [0.03, 0.3])
def test_thermal_fit_noiseless(nbar):
    pops = thermal_populations(nbar, 16)
    times = default_time_grid(CALIB1, num_points=50, cycles=1.5)
    scan = analytic_scan(pops, CALIB1, times)
    est, _ = fit_thermal_nbar(scan)
    assert abs(est - nbar) < 1e-6


def test_thermal_fit_sampled():
    nbar = 0.3
    rho = thermal_density(nbar)
    times = default_time_grid(CALIB1, num_points=100, cycles=1.5)
    scan = sample_scan(rho, CALIB1, times, shots=400, seed=0)
    est, sigma = fit_thermal_nbar(scan)
    assert abs(est - nbar) < 3 * sigma
    assert abs(est - nbar) / nbar < 0.1


def test_coherent_fit_noiseless():
    times = default_time_grid(CALIB1, num_points=50, cycles=1.5)
    scan = analytic_scan(coherent_populations(0.52, 14), CALIB1, times)
    est, _ = fit_coherent_alpha(scan)
    assert abs(est - 0.52) < 1e-6
    vac = analytic_scan(coherent_populations(0.0, 3), CALIB1, times)
    est0, _ = fit_coherent_alpha(vac)
    assert est0**2 < 1e-7


def test_coherent_fit_sampled():
    cfg = HilbertConfig(1, 13, num_spins=0)
    rho = DensityMatrix(np.diag(coherent_populations(0.52, 14)), cfg, relaxed=True)
    times = default_time_grid(CALIB1, num_points=60, cycles=1.5)
    scan = sample_scan(rho, CALIB1, times, shots=400, seed=2)
    est, sigma = fit_coherent_alpha(scan)
    assert abs(est - 0.52) < 3 * sigma
    assert abs(est - 0.52) < 0.05


def test_covariance_matches_seed_scatter():
    state = prepare_named_state("bell_00_11")
    times = default_time_grid(CALIB2, num_points=20)
    values, sigmas = [], []
    for seed in range(200):
        scan = sample_scan(state, CALIB2, times, shots=150, seed=100 + seed)
        fit = fit_fock_distribution(scan, k_max=1)
        values.append(fit.populations[1, 1])
        sigmas.append(fit.sigmas()[1, 1])
    scatter = np.std(values, ddof=1)
    reported = np.mean(sigmas)
    assert abs(scatter / reported - 1.0) < 0.25


def test_fit_rejects_bad_inputs():
    scan = bell_scan()
    with pytest.raises(ConfigError):
        fit_fock_distribution(scan, k_max=-1)
    with pytest.raises(ConfigError):
        fit_fock_distribution_restricted(scan, [])
    with pytest.raises(ConfigError):
        fit_fock_distribution_restricted(scan, [(0, 0), (0, 0)])
    with pytest.raises(ConfigError):
        fit_fock_distribution_restricted(scan, [(0, 0, 0)])
    with pytest.raises(ConfigError):
        fit_fock_distribution_restricted(scan, [(0, 5)], k_max=2)
    short = TimeScanData(
        scan.times[:1],
        {c: scan.populations[c][:1] for c in scan.populations},
        None,
        CALIB2,
    )
    with pytest.raises(ConfigError, match="rows"):
        fit_fock_distribution(short, k_max=2, all_down_only=True)
    with pytest.raises(ConfigError, match="single"):
        fit_thermal_nbar(scan)


def test_distribution_soft_validation_warns():
    with pytest.warns(UserWarning, match="sum"):
        FockDistribution(np.array([0.2]), np.full((1, 1), 1e-6), k_max=0, basis=((0,),))
    with pytest.warns(UserWarning, match="sigma"):
        FockDistribution(
            np.array([1.3, -0.3]), np.zeros((2, 2)), k_max=1, basis=((0,), (1,))
        )
    with warnings.catch_warnings():
        # Exact tensors carry no covariance; a deficit in their sum is
        # expected (population beyond the retained levels) and stays quiet.
        warnings.simplefilter("error")
        FockDistribution(np.array([0.2]), np.zeros((1, 1)), k_max=0, basis=((0,),))


def test_fit_metadata_records_setup():
    scan = bell_scan(shots=300, seed=9)
    fit = fit_fock_distribution(scan, k_max=1)
    assert fit.metadata["shots"] == 300
    assert fit.metadata["nonneg"] is False
    assert fit.metadata["condition_number"] > 1.0
    assert fit.sigmas().shape == fit.populations.shape
