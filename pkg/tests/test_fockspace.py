"""Fock-space algebra: basis layout, displacement operators, state helpers.

Displacement matrices are checked two independent ways: the package
exponentiates the truncated generator, the oracle evaluates the
closed-form Laguerre matrix elements of the untruncated operator.
"""

import math

import numpy as np
import pytest

import oracles
from conftest import random_density
from mmtomo import (
    DensityMatrix,
    HilbertConfig,
    ModeOperator,
    PureState,
    build_operator,
    displaced_density,
    displaced_populations,
    fidelity,
    trace_distance,
)
from mmtomo.exceptions import (
    ConfigError,
    DimensionMismatchError,
    TruncationLeakError,
)
from mmtomo.fockspace import (
    annihilation,
    displacement_matrix,
    fock_state,
    motional_density,
    motional_pure,
    pure_density,
    reporting_vector,
    vacuum_state,
)
from refdata import (
    ABS_D01_SQ_AT_052,
    P00_COHERENT_056_053,
    VACUUM_Q0_AT_056,
)


# ---------------------------------------------------------------- config


def test_scalar_cutoff_broadcasts():
    cfg = HilbertConfig(num_modes=3, cutoff=2, guard_levels=1)
    assert cfg.cutoffs == (2, 2, 2)
    assert cfg.mode_levels == (4, 4, 4)
    assert cfg.reporting_levels == (3, 3, 3)
    assert cfg.reporting_dim == 27


def test_per_mode_cutoffs():
    cfg = HilbertConfig(num_modes=2, cutoff=(1, 2), num_spins=1, guard_levels=1)
    assert cfg.mode_levels == (3, 4)
    assert cfg.tensor_shape == (2, 3, 4)
    assert cfg.dim == 24
    assert cfg.motional().num_spins == 0
    assert cfg.with_spins(2).spin_dim == 4


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_modes=0, cutoff=1),
        dict(num_modes=2, cutoff=(1,)),
        dict(num_modes=1, cutoff=0),
        dict(num_modes=1, cutoff=1, num_spins=-1),
        dict(num_modes=4, cutoff=50, guard_levels=0),  # blows the dimension cap
    ],
)
def test_config_rejects_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        HilbertConfig(**kwargs)


def test_basis_is_spin_major_then_mode_major():
    # spin index varies slowest, mode 0 slowest among the modes
    cfg = HilbertConfig(num_modes=2, cutoff=1, num_spins=1, guard_levels=0)
    st = fock_state(cfg, fock=(1, 0), spins=(1,))
    assert st.amplitudes[np.ravel_multi_index((1, 1, 0), (2, 2, 2))] == 1.0
    assert st.tensor()[1, 1, 0] == 1.0

    mot = HilbertConfig(num_modes=2, cutoff=(1, 2), guard_levels=1)
    n1 = build_operator(ModeOperator("number", mode=1), mot)
    np.testing.assert_array_equal(np.diag(n1).real, [0, 1, 2, 0, 1, 2])
    n0 = build_operator(ModeOperator("number", mode=0), mot)
    np.testing.assert_array_equal(np.diag(n0).real, [0, 0, 0, 1, 1, 1])


def test_state_validation():
    cfg = HilbertConfig(num_modes=1, cutoff=2, guard_levels=0)
    with pytest.raises(DimensionMismatchError):
        PureState(np.ones(4), cfg)
    with pytest.raises(ValueError):
        PureState(np.array([1.0, 1.0, 0.0]), cfg)
    with pytest.raises(ConfigError):
        DensityMatrix(np.eye(3) / 3, cfg.with_spins(1))
    with pytest.raises(ValueError):
        DensityMatrix(np.triu(np.ones((3, 3))), cfg)
    skew = np.diag([0.6, 0.5, -0.2])  # Hermitian but trace 0.9
    with pytest.raises(ValueError):
        DensityMatrix(skew, cfg)
    assert DensityMatrix(skew, cfg, relaxed=True).entries[0, 0] == 0.6


def test_overlap_and_diagonal_tensor():
    cfg = HilbertConfig(num_modes=2, cutoff=1, guard_levels=0)
    a = fock_state(cfg, (0, 1))
    b = fock_state(cfg, (1, 0))
    assert a.overlap(a) == pytest.approx(1.0)
    assert a.overlap(b) == 0.0
    rho = DensityMatrix(np.diag([0.1, 0.2, 0.3, 0.4]), cfg)
    np.testing.assert_allclose(rho.diagonal_tensor(), [[0.1, 0.2], [0.3, 0.4]])


# ---------------------------------------------------- displacement matrices


def test_annihilation_matrix_elements():
    a = annihilation(4)
    for n in range(1, 4):
        assert a[n - 1, n] == pytest.approx(math.sqrt(n))
    assert np.count_nonzero(a) == 3


def test_displacement_of_zero_is_identity():
    np.testing.assert_allclose(displacement_matrix(0.0, 6), np.eye(6), atol=1e-14)


@pytest.mark.parametrize("alpha", [0.52, -0.3 + 0.4j, 1.1j, 0.9 * np.exp(0.3j)])
def test_displacement_is_unitary_on_truncation(alpha):
    d = displacement_matrix(alpha, 7)
    np.testing.assert_allclose(d.conj().T @ d, np.eye(7), atol=1e-12)


def test_displacement_matches_closed_form(rng):
    """Exponentiated generator vs the Laguerre formula, interior block."""
    for _ in range(6):
        alpha = rng.normal() * 0.5 + 1j * rng.normal() * 0.5
        ours = displacement_matrix(alpha, 30)[:8, :8]
        exact = oracles.displacement_matrix_oracle(alpha, 8, 8)
        np.testing.assert_allclose(ours, exact, atol=1e-10)


def test_displacement_inverse():
    d = displacement_matrix(0.6 - 0.2j, 16)
    dinv = displacement_matrix(-0.6 + 0.2j, 16)
    np.testing.assert_allclose((dinv @ d)[:6, :6], np.eye(6), atol=1e-9)


def test_frozen_single_quantum_transfer_element():
    # |<0|D(a)|1>|^2 = a^2 e^{-a^2}
    val = abs(oracles.displaced_fock_element(0, 1, 0.52)) ** 2
    assert val == pytest.approx(ABS_D01_SQ_AT_052, abs=1e-12)
    assert abs(ABS_D01_SQ_AT_052 - 0.2062) < 5e-4
    ours = abs(displacement_matrix(0.52, 16)[0, 1]) ** 2
    assert ours == pytest.approx(ABS_D01_SQ_AT_052, abs=1e-10)


def test_build_operator_displace_and_errors():
    cfg = HilbertConfig(num_modes=2, cutoff=(2, 2), guard_levels=8)
    op = ModeOperator("displace", mode=1, alpha=0.3 + 0.1j)
    full = build_operator(op, cfg)
    block = oracles.displacement_matrix_oracle(0.3 + 0.1j, 3, 3)
    np.testing.assert_allclose(full[:3, :3], block, atol=1e-9)
    with pytest.raises(ConfigError):
        build_operator(ModeOperator("number", mode=2), cfg)
    with pytest.raises(ConfigError):
        ModeOperator("squeeze")


# ------------------------------------------------------ displaced populations


def _vacuum_rho(num_modes, cutoff, guard):
    cfg = HilbertConfig(num_modes=num_modes, cutoff=cutoff, guard_levels=guard)
    return pure_density(vacuum_state(cfg))


def test_displaced_vacuum_is_poissonian():
    rho = _vacuum_rho(1, 5, 9)
    q = displaced_populations(rho, [0.56])
    assert q[0] == pytest.approx(VACUUM_Q0_AT_056, abs=1e-9)
    assert VACUUM_Q0_AT_056 == pytest.approx(math.exp(-0.56 ** 2), abs=1e-15)
    np.testing.assert_allclose(q[:8], oracles.coherent_populations(0.56, 8), atol=1e-9)
    # populations depend on |alpha| only for the vacuum
    q_rot = displaced_populations(rho, [0.56 * np.exp(1.1j)])
    np.testing.assert_allclose(q, q_rot, atol=1e-12)


def test_displaced_two_mode_vacuum_ground_population():
    rho = _vacuum_rho(2, 3, 8)
    q = displaced_populations(rho, [0.56, 0.53])
    assert q[0, 0] == pytest.approx(P00_COHERENT_056_053, abs=1e-9)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_displacement_returns_diagonal():
    cfg = HilbertConfig(num_modes=2, cutoff=1, guard_levels=2)
    vec = np.zeros(cfg.reporting_dim, dtype=complex)
    vec[0] = 1 / math.sqrt(2)
    vec[3] = 1j / math.sqrt(2)  # (|00> + i|11>)/sqrt(2)
    rho = DensityMatrix(np.outer(vec, vec.conj()), cfg)
    q = displaced_populations(rho, [0.0, 0.0])
    expected = np.zeros(cfg.mode_levels)
    expected[0, 0] = 0.5
    expected[1, 1] = 0.5
    np.testing.assert_allclose(q, expected, atol=1e-14)


def test_displaced_populations_match_brute_force(rng):
    cfg = HilbertConfig(num_modes=2, cutoff=2, guard_levels=10)
    for _ in range(4):
        rho = DensityMatrix(random_density(rng, cfg.reporting_dim), cfg)
        alphas = rng.normal(size=2) * 0.3 + 1j * rng.normal(size=2) * 0.3
        q = displaced_populations(rho, alphas)
        ref = oracles.displaced_q_oracle(
            rho.entries, cfg.reporting_levels, alphas, (6, 6)
        )
        np.testing.assert_allclose(q[:6, :6], ref, atol=1e-8)
        assert q.sum() == pytest.approx(1.0, abs=1e-10)
        assert q.min() > -1e-10


def test_displacement_leak_is_detected():
    rho = _vacuum_rho(1, 1, 1)
    with pytest.raises(TruncationLeakError):
        displaced_populations(rho, [1.5])
    with pytest.raises(DimensionMismatchError):
        displaced_populations(rho, [0.1, 0.1])


def test_displaced_density_diagonal_matches_populations(rng):
    cfg = HilbertConfig(num_modes=2, cutoff=2, guard_levels=10)
    rho = DensityMatrix(random_density(rng, cfg.reporting_dim), cfg)
    alphas = [0.4 + 0.1j, 0.3 - 0.2j]
    moved = displaced_density(rho, alphas)
    assert moved.config is cfg
    q = displaced_populations(rho, alphas)
    sl = tuple(slice(0, r) for r in cfg.reporting_levels)
    np.testing.assert_allclose(moved.diagonal_tensor(), q[sl], atol=1e-12)
    np.testing.assert_allclose(moved.entries, moved.entries.conj().T, atol=1e-12)
    # trace falls short of one by exactly the population displaced
    # past the reporting levels
    assert np.trace(moved.entries).real == pytest.approx(q[sl].sum(), abs=1e-12)


def test_displaced_vacuum_density_has_coherent_coherences():
    rho = _vacuum_rho(1, 5, 9)
    alpha = 0.56 * np.exp(0.7j)
    moved = displaced_density(rho, [alpha])
    for m in range(4):
        for n in range(4):
            want = np.conj(oracles.displaced_fock_element(0, m, alpha))
            want *= oracles.displaced_fock_element(0, n, alpha)
            assert moved.entries[m, n] == pytest.approx(want, abs=1e-10)


def test_displaced_density_zero_alpha_preserves_state():
    cfg = HilbertConfig(num_modes=2, cutoff=1, guard_levels=2)
    vec = np.zeros(cfg.reporting_dim, dtype=complex)
    vec[0] = 1 / math.sqrt(2)
    vec[3] = 1j / math.sqrt(2)
    rho = DensityMatrix(np.outer(vec, vec.conj()), cfg)
    moved = displaced_density(rho, [0.0, 0.0])
    np.testing.assert_allclose(moved.entries, rho.entries, atol=1e-14)


# ------------------------------------------------------------ state helpers


def test_fidelity_and_trace_distance():
    cfg = HilbertConfig(num_modes=2, cutoff=1, guard_levels=0)
    vec = np.zeros(4, dtype=complex)
    vec[0] = vec[3] = 1 / math.sqrt(2)
    bell = PureState(vec, cfg)
    rho = pure_density(bell)
    assert fidelity(rho, bell) == pytest.approx(1.0)
    mixed = DensityMatrix(np.eye(4) / 4, cfg)
    assert fidelity(mixed, bell) == pytest.approx(0.25)
    assert trace_distance(rho, rho) == pytest.approx(0.0, abs=1e-12)
    other = pure_density(fock_state(cfg, (0, 1)))
    assert trace_distance(rho, other) == pytest.approx(1.0)
    small = HilbertConfig(num_modes=1, cutoff=1, guard_levels=0)
    with pytest.raises(DimensionMismatchError):
        fidelity(mixed, vacuum_state(small))


def test_motional_pure_projects_spin_down():
    cfg = HilbertConfig(num_modes=1, cutoff=2, num_spins=1, guard_levels=0)
    amp = np.zeros(cfg.dim, dtype=complex)
    amp[1] = 1.0  # |down, 1>
    st = motional_pure(PureState(amp, cfg))
    assert st.config.num_spins == 0
    assert st.amplitudes[1] == 1.0

    ent = np.zeros(cfg.dim, dtype=complex)
    ent[0] = ent[4] = 1 / math.sqrt(2)  # (|down,0> + |up,1>)/sqrt(2)
    with pytest.raises(ValueError):
        motional_pure(PureState(ent, cfg))
    rho = motional_density(PureState(ent, cfg))
    np.testing.assert_allclose(rho.entries, np.diag([0.5, 0.5, 0.0]), atol=1e-14)


def test_reporting_vector_guard_band_rules():
    cfg = HilbertConfig(num_modes=1, cutoff=1, guard_levels=2)
    top = fock_state(cfg, (3,))
    with pytest.raises(TruncationLeakError):
        reporting_vector(top)
    with pytest.raises(TruncationLeakError):
        motional_density(top)

    eps = 1e-8
    amp = np.zeros(cfg.dim, dtype=complex)
    amp[0] = math.sqrt(1 - eps)
    amp[3] = math.sqrt(eps)
    vec = reporting_vector(PureState(amp, cfg))
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-12)
