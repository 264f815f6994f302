"""Pulse dynamics: rotation conventions, named sequences, two-tone checks.

The blue-sideband rotations are validated against a Pade matrix
exponential of the pair Hamiltonian, and the spin-dependent
displacement against direct integration of the simultaneous two-tone
drive; both are independent numerical routes.
"""

import math

import numpy as np
import pytest

import oracles
from refdata import P00_COHERENT_056_053
from mmtomo.dynamics import (
    BSB,
    ONE_THIRD_TRANSFER_THETA,
    RSB,
    Carrier,
    PulseSequence,
    RabiCalibration,
    SpinDepDisplace,
    evolve,
    named_sequence,
    prepare_named_state,
    run_sequence,
)
from mmtomo.exceptions import ConfigError, TruncationLeakError
from mmtomo.fockspace import (
    HilbertConfig,
    PureState,
    fock_state,
    motional_pure,
    reporting_vector,
    vacuum_state,
)

CAL1 = RabiCalibration.uniform(1, 1)


def _cfg(num_modes=1, cutoff=4, guard=3):
    return HilbertConfig(num_modes=num_modes, cutoff=cutoff, num_spins=1, guard_levels=guard)


def _random_state(rng, cfg):
    """Random state supported on the reporting levels (guard band empty)."""
    vec = rng.normal(size=cfg.dim) + 1j * rng.normal(size=cfg.dim)
    tens = vec.reshape(cfg.tensor_shape)
    for j in range(cfg.num_modes):
        axis = cfg.num_spins + j
        sl = [slice(None)] * tens.ndim
        sl[axis] = slice(cfg.reporting_levels[j], None)
        tens[tuple(sl)] = 0.0
    vec = tens.reshape(-1)
    return PureState(vec / np.linalg.norm(vec), cfg)


# ------------------------------------------------------------- carrier


def test_carrier_half_pulse_reaches_plus_i():
    cfg = _cfg()
    st = evolve(vacuum_state(cfg), Carrier(theta=math.pi / 2), CAL1)
    t = st.tensor()
    assert t[0, 0] == pytest.approx(1 / math.sqrt(2))
    assert t[1, 0] == pytest.approx(1j / math.sqrt(2))


def test_carrier_pi_flips_spin():
    cfg = _cfg()
    st = evolve(vacuum_state(cfg), Carrier(theta=math.pi), CAL1)
    assert abs(st.tensor()[1, 0]) == pytest.approx(1.0)


def test_carrier_opposite_phase_undoes(rng):
    cfg = _cfg()
    st = _random_state(rng, cfg)
    fwd = evolve(st, Carrier(theta=1.1, phase=0.4), CAL1)
    back = evolve(fwd, Carrier(theta=1.1, phase=0.4 + math.pi), CAL1)
    np.testing.assert_allclose(back.amplitudes, st.amplitudes, atol=1e-12)


# ------------------------------------------------------------ sidebands


@pytest.mark.parametrize("n", [0, 1, 2, 3])
@pytest.mark.parametrize("theta", [0.3, math.pi / 2, 2.1])
def test_bsb_rung_populations(n, theta):
    cfg = _cfg(cutoff=5)
    st = evolve(fock_state(cfg, (n,)), BSB(mode=0, theta=theta), CAL1)
    t = st.tensor()
    g = math.sqrt(n + 1) * theta / 2
    assert abs(t[0, n]) ** 2 == pytest.approx(math.cos(g) ** 2, abs=1e-12)
    assert abs(t[1, n + 1]) ** 2 == pytest.approx(math.sin(g) ** 2, abs=1e-12)


def test_bsb_matches_matrix_exponential(rng):
    cfg = _cfg(cutoff=5, guard=2)
    levels = cfg.mode_levels[0]
    for theta, phase in [(0.7, 0.0), (math.pi / 2, 1.3), (2.4, -0.6)]:
        st = _random_state(rng, cfg)
        ours = evolve(st, BSB(mode=0, theta=theta, phase=phase), CAL1)
        u = oracles.bsb_pair_unitary_oracle(levels, theta / 2, phase)
        ref = u @ st.amplitudes
        np.testing.assert_allclose(ours.amplitudes, ref, atol=1e-12)


def test_bsb_phase_lands_on_up_branch():
    cfg = _cfg()
    st = evolve(vacuum_state(cfg), BSB(mode=0, theta=math.pi, phase=0.9), CAL1)
    assert st.tensor()[1, 1] == pytest.approx(np.exp(0.9j), abs=1e-12)


def test_rsb_vacuum_is_dark():
    cfg = _cfg()
    st = evolve(vacuum_state(cfg), RSB(mode=0, theta=2.2, phase=0.3), CAL1)
    np.testing.assert_allclose(st.amplitudes, vacuum_state(cfg).amplitudes, atol=1e-14)


def test_rsb_pi_pulse_phase_convention():
    # |up, n> -> e^{i phi}|down, n+1> exactly at theta = pi
    cfg = _cfg()
    st = evolve(fock_state(cfg, (0,), spins=(1,)), RSB(mode=0, theta=math.pi, phase=0.9), CAL1)
    assert st.tensor()[0, 1] == pytest.approx(np.exp(0.9j), abs=1e-12)


def test_rsb_transfer_populations():
    cfg = _cfg(cutoff=5)
    st = evolve(fock_state(cfg, (1,), spins=(1,)), RSB(mode=0, theta=1.0), CAL1)
    t = st.tensor()
    g = math.sqrt(2) * 0.5
    assert abs(t[1, 1]) ** 2 == pytest.approx(math.cos(g) ** 2, abs=1e-12)
    assert abs(t[0, 2]) ** 2 == pytest.approx(math.sin(g) ** 2, abs=1e-12)


def test_sideband_guard_band_leak_raises():
    cfg = _cfg(cutoff=1, guard=0)
    top = fock_state(cfg, (1,))  # populates the dark top rung corner
    with pytest.raises(TruncationLeakError):
        evolve(top, BSB(mode=0, theta=0.5), CAL1)


# ------------------------------------------- spin-dependent displacement


def test_displace_on_spin_eigenstate_gives_coherent():
    cfg = _cfg(cutoff=9, guard=6)
    alpha = 0.6 * np.exp(0.8j)
    plus = evolve(vacuum_state(cfg), Carrier(theta=math.pi / 2), CAL1)
    pushed = evolve(plus, SpinDepDisplace(mode=0, alpha=alpha), CAL1)
    t = pushed.tensor()
    coh = oracles.coherent_vector(alpha, cfg.mode_levels[0])
    np.testing.assert_allclose(t[0], coh / math.sqrt(2), atol=1e-9)
    np.testing.assert_allclose(t[1], 1j * coh / math.sqrt(2), atol=1e-9)


def test_two_tone_integration_matches_closed_form(rng):
    cfg = _cfg(cutoff=5, guard=12)
    calib = RabiCalibration.uniform(1, 1, spin_phase_offset=0.3)
    for _ in range(5):
        alpha = rng.uniform(0.2, 0.6) * np.exp(1j * rng.uniform(0, 2 * math.pi))
        op = SpinDepDisplace(mode=0, alpha=alpha, spin_phase=rng.uniform(0, 2 * math.pi))
        st = _random_state(rng, cfg)
        closed = evolve(st, op, calib)
        integrated = evolve(st, op, calib, integrate_two_tone=True)
        np.testing.assert_allclose(closed.amplitudes, integrated.amplitudes, atol=1e-10)


def test_displacement_leak_raises():
    cfg = _cfg(cutoff=1, guard=1)
    with pytest.raises(TruncationLeakError):
        evolve(vacuum_state(cfg), SpinDepDisplace(mode=0, alpha=2.0), CAL1)


# ------------------------------------------------------- named sequences


def test_bell_00_11_amplitudes():
    phi = 0.7
    st = motional_pure(prepare_named_state("bell_00_11", phi=phi))
    vec = reporting_vector(st).reshape(4, 4)
    assert vec[0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert vec[1, 1] == pytest.approx(np.exp(1j * phi) / math.sqrt(2), abs=1e-12)
    assert np.sum(np.abs(vec) ** 2) == pytest.approx(1.0)


def test_bell_00_11_default_is_symmetric():
    st = motional_pure(prepare_named_state("bell_00_11"))
    vec = reporting_vector(st).reshape(4, 4)
    assert vec[1, 1] == pytest.approx(vec[0, 0], abs=1e-12)


def test_bell_01_10_support_and_phase():
    phi = 1.9
    st = motional_pure(prepare_named_state("bell_01_10", phi=phi))
    vec = reporting_vector(st).reshape(4, 4)
    assert abs(vec[0, 0]) < 1e-12
    assert abs(vec[1, 1]) < 1e-12
    assert abs(vec[0, 1]) ** 2 == pytest.approx(0.5, abs=1e-12)
    assert abs(vec[1, 0]) ** 2 == pytest.approx(0.5, abs=1e-12)
    assert vec[1, 0] / vec[0, 1] == pytest.approx(np.exp(1j * phi), abs=1e-12)


def test_w_state_equal_thirds_and_phases():
    assert math.sin(ONE_THIRD_TRANSFER_THETA / 2) ** 2 == pytest.approx(1 / 3, abs=1e-15)
    phis = (0.3, 1.1, -0.4)
    st = motional_pure(prepare_named_state("w_state", phi1=phis[0], phi2=phis[1], phi3=phis[2]))
    vec = reporting_vector(st).reshape(3, 3, 3)
    pops = {idx: abs(vec[idx]) ** 2 for idx in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]}
    for p in pops.values():
        assert p == pytest.approx(1 / 3, abs=1e-12)
    assert sum(pops.values()) == pytest.approx(1.0, abs=1e-12)
    # relative phases survive the final carrier flip
    assert vec[1, 0, 0] / vec[0, 1, 0] == pytest.approx(np.exp(1j * (phis[0] - phis[1])), abs=1e-12)
    assert vec[0, 1, 0] / vec[0, 0, 1] == pytest.approx(np.exp(1j * (phis[1] - phis[2])), abs=1e-12)


def test_coherent_product_matches_oracle():
    cfg = HilbertConfig(num_modes=2, cutoff=10, num_spins=1, guard_levels=6)
    st = motional_pure(prepare_named_state("coherent_product", config=cfg, alpha1=0.56, alpha2=0.53))
    vec = reporting_vector(st)
    ref = np.kron(
        oracles.coherent_vector(0.56, 11), oracles.coherent_vector(0.53, 11)
    )
    ref = ref / np.linalg.norm(ref)
    assert abs(np.vdot(ref, vec)) == pytest.approx(1.0, abs=1e-10)
    assert abs(vec[0]) ** 2 == pytest.approx(P00_COHERENT_056_053, abs=1e-9)


def test_empty_sequence_returns_initial():
    cfg = _cfg()
    seq = PulseSequence((), cfg)
    out = run_sequence(seq, CAL1)
    np.testing.assert_array_equal(out.amplitudes, vacuum_state(cfg).amplitudes)


# ------------------------------------------------------------ validation


def test_angle_must_be_nonnegative():
    with pytest.raises(ConfigError):
        Carrier(theta=-0.1)
    with pytest.raises(ConfigError):
        BSB(mode=0, theta=-1.0)


def test_unknown_name_and_bad_params():
    with pytest.raises(ConfigError):
        named_sequence("ghz")
    with pytest.raises(ConfigError):
        named_sequence("coherent_product")  # missing alphas
    with pytest.raises(ConfigError):
        named_sequence("bell_00_11", phj=0.3)
    with pytest.raises(ConfigError):
        named_sequence("w_state", config=HilbertConfig(2, 2, num_spins=1))


def test_uncoupled_pair_rejected():
    cfg = _cfg()
    silent = RabiCalibration(np.array([[0.0]]), np.array([0.0]))
    with pytest.raises(ConfigError):
        evolve(vacuum_state(cfg), BSB(mode=0, theta=0.1), silent)
    with pytest.raises(ConfigError):
        evolve(vacuum_state(cfg), Carrier(theta=0.1), silent)


def test_target_indices_checked():
    cfg = _cfg()
    cal = RabiCalibration.uniform(2, 2)
    with pytest.raises(ConfigError):
        evolve(vacuum_state(cfg), BSB(mode=1, theta=0.1), cal)
    with pytest.raises(ConfigError):
        evolve(vacuum_state(cfg), Carrier(theta=0.1, ion=1), cal)


def test_sequence_needs_spin():
    with pytest.raises(ConfigError):
        PulseSequence((), HilbertConfig(1, 2))


def test_initial_state_config_must_match():
    seq = PulseSequence((), _cfg())
    with pytest.raises(ConfigError):
        run_sequence(seq, CAL1, initial=vacuum_state(_cfg(cutoff=5)))


def test_calibration_validation():
    with pytest.raises(ConfigError):
        RabiCalibration(np.array([[1.0, 2.0]]), np.array([1.0, 1.0]))
    with pytest.raises(ConfigError):
        RabiCalibration(np.array([[-1.0]]), np.array([1.0]))
    cal = RabiCalibration.distinct_modes(2, 3)
    rates = cal.sideband_rabi[0]
    assert len(set(rates.tolist())) == 3
    np.testing.assert_array_equal(cal.sideband_rabi[0], cal.sideband_rabi[1])
