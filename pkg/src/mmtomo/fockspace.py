"""Truncated multi-mode Fock-space algebra.

States live on a product of spin-1/2 factors and d harmonic modes.  The
flattened basis index is spin-major: spin indices vary slowest (spin 0
slowest of all), then mode occupation numbers with mode 0 slowest among
the modes and the last mode fastest.  Spin index 0 means |down>, 1 means
|up>.

Each mode carries ``cutoff + guard_levels + 1`` levels while operators
act; the guard band above the reporting cutoff absorbs displacement
leakage so truncated exponentials stay honest.  Reported density
matrices are restricted to the 0..cutoff block of every mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionMismatchError, TruncationLeakError

NORM_TOL = 1e-9
LEAK_TOL = 1e-6
DIM_CAP = 4_000_000


@dataclass(frozen=True)
class HilbertConfig:
    """Dimensions of the truncated spin (x) multi-mode Fock product space."""

    num_modes: int
    cutoff: int | tuple[int, ...]
    num_spins: int = 0
    guard_levels: int = 3

    def __post_init__(self):
        if self.num_modes < 1:
            raise ConfigError(f"need at least one mode, got {self.num_modes}")
        if self.num_spins < 0 or self.guard_levels < 0:
            raise ConfigError("num_spins and guard_levels must be non-negative")
        cut = self.cutoff
        if isinstance(cut, (int, np.integer)):
            cut = (int(cut),) * self.num_modes
        else:
            cut = tuple(int(c) for c in cut)
        if len(cut) != self.num_modes:
            raise ConfigError(f"{len(cut)} cutoffs for {self.num_modes} modes")
        if any(c < 1 for c in cut):
            raise ConfigError(f"per-mode cutoff must be >= 1, got {cut}")
        object.__setattr__(self, "cutoff", cut)
        if self.dim > DIM_CAP:
            raise ConfigError(
                f"total dimension {self.dim} exceeds the configured cap {DIM_CAP}"
            )

    @property
    def cutoffs(self) -> tuple[int, ...]:
        return self.cutoff  # normalized to a tuple in __post_init__

    @property
    def mode_levels(self) -> tuple[int, ...]:
        """Levels per mode including the guard band."""
        return tuple(c + self.guard_levels + 1 for c in self.cutoffs)

    @property
    def reporting_levels(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cutoffs)

    @property
    def spin_dim(self) -> int:
        return 2 ** self.num_spins

    @property
    def motional_dim(self) -> int:
        return int(np.prod(self.mode_levels))

    @property
    def reporting_dim(self) -> int:
        return int(np.prod(self.reporting_levels))

    @property
    def dim(self) -> int:
        return self.spin_dim * self.motional_dim

    @property
    def tensor_shape(self) -> tuple[int, ...]:
        return (2,) * self.num_spins + self.mode_levels

    def motional(self) -> "HilbertConfig":
        """The same mode space with no spins."""
        return HilbertConfig(self.num_modes, self.cutoffs, 0, self.guard_levels)

    def with_spins(self, num_spins: int) -> "HilbertConfig":
        return HilbertConfig(self.num_modes, self.cutoffs, num_spins, self.guard_levels)


@dataclass
class PureState:
    """Normalized complex amplitudes over the full (guard-extended) basis."""

    amplitudes: np.ndarray
    config: HilbertConfig

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amp.size != self.config.dim:
            raise DimensionMismatchError(
                f"amplitude vector has {amp.size} entries, config dim is {self.config.dim}"
            )
        norm = np.linalg.norm(amp)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state norm {norm!r} is not 1 within {NORM_TOL}")
        self.amplitudes = amp

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.config.tensor_shape)

    def overlap(self, other: "PureState") -> complex:
        if other.config.tensor_shape != self.config.tensor_shape:
            raise DimensionMismatchError("states live on different product spaces")
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass
class DensityMatrix:
    """Motional density matrix on the reporting (sub-cutoff) product basis.

    Spins are traced out before a DensityMatrix exists; ``config`` must
    therefore carry ``num_spins == 0``.  ``relaxed=True`` skips the
    Hermiticity and unit-trace checks (raw linear reconstructions violate
    both).
    """

    entries: np.ndarray
    config: HilbertConfig
    relaxed: bool = False

    def __post_init__(self):
        if self.config.num_spins != 0:
            raise ConfigError("DensityMatrix config must have num_spins == 0")
        mat = np.asarray(self.entries, dtype=complex)
        dim = self.config.reporting_dim
        if mat.shape != (dim, dim):
            raise DimensionMismatchError(
                f"matrix shape {mat.shape} does not match reporting dim {dim}"
            )
        if not self.relaxed:
            herm_defect = np.max(np.abs(mat - mat.conj().T))
            if herm_defect > NORM_TOL:
                raise ValueError(f"Hermiticity defect {herm_defect:.3e} exceeds {NORM_TOL}")
            tr = np.trace(mat)
            if abs(tr - 1.0) > NORM_TOL:
                raise ValueError(f"trace {tr!r} is not 1 within {NORM_TOL}")
        self.entries = mat

    def diagonal_tensor(self) -> np.ndarray:
        """Fock populations P_{k1..kd} on the reporting levels."""
        return np.real(np.diag(self.entries)).reshape(self.config.reporting_levels)


@dataclass(frozen=True)
class ModeOperator:
    """One of the single-mode operators a, a-dagger, n, or D(alpha)."""

    kind: str
    mode: int = 0
    alpha: complex = 0j

    _KINDS = ("lower", "raise", "number", "displace")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r}, expected one of {self._KINDS}")


def annihilation(levels: int) -> np.ndarray:
    """Matrix of a on a ``levels``-dimensional truncation, <n-1|a|n> = sqrt(n)."""
    return np.diag(np.sqrt(np.arange(1.0, levels)), k=1)


def displacement_matrix(alpha: complex, levels: int) -> np.ndarray:
    """D(alpha) = exp(alpha a† - alpha* a) on a ``levels``-dimensional truncation.

    The generator is skew-Hermitian, so i*(alpha a† - alpha* a) is Hermitian
    and the exponential is evaluated by eigendecomposition; the result is
    exactly unitary on the truncated space.
    """
    a = annihilation(levels)
    herm = 1j * (alpha * a.conj().T - np.conj(alpha) * a)
    w, v = np.linalg.eigh(herm)
    return (v * np.exp(-1j * w)) @ v.conj().T


def _single_mode_matrix(op: ModeOperator, config: HilbertConfig) -> np.ndarray:
    rep = config.reporting_levels[op.mode]
    if op.kind == "lower":
        return annihilation(rep)
    if op.kind == "raise":
        return annihilation(rep).conj().T
    if op.kind == "number":
        return np.diag(np.arange(float(rep)))
    # displacement: exponentiate with guard headroom, then restrict
    ext = config.mode_levels[op.mode]
    return displacement_matrix(op.alpha, ext)[:rep, :rep]


def build_operator(op: ModeOperator, config: HilbertConfig) -> np.ndarray:
    """Dense matrix of ``op`` on the full reporting product space.

    Identity factors are supplied on every spin and on the other modes.
    The displacement operator is exponentiated on the guard-extended
    levels of its mode and then restricted to the reporting cutoff, so
    its sub-cutoff block is accurate even though the restriction itself
    is not exactly unitary.
    """
    if not 0 <= op.mode < config.num_modes:
        raise ConfigError(f"mode index {op.mode} out of range for {config.num_modes} modes")
    full = np.eye(config.spin_dim)
    for j in range(config.num_modes):
        if j == op.mode:
            factor = _single_mode_matrix(op, config)
        else:
            factor = np.eye(config.reporting_levels[j])
        full = np.kron(full, factor)
    return full


def _embed_reporting(entries: np.ndarray, config: HilbertConfig) -> np.ndarray:
    """Zero-pad a reporting-space motional matrix into the guard-extended space."""
    shape = config.mode_levels + config.mode_levels
    big = np.zeros(shape, dtype=complex)
    sl = tuple(slice(0, r) for r in config.reporting_levels)
    big[sl + sl] = entries.reshape(config.reporting_levels + config.reporting_levels)
    dim = config.motional_dim
    return big.reshape(dim, dim)


def displaced_populations(rho: DensityMatrix, alphas) -> np.ndarray:
    """Fock populations of the displaced state, Q_k = <k|D† rho D|k>.

    Parameters
    ----------
    rho : DensityMatrix
        Trace-1 Hermitian motional state on the reporting space.
    alphas : sequence of complex
        One displacement amplitude per mode.

    Returns
    -------
    numpy.ndarray
        Real tensor over the guard-extended levels of each mode.  The
        displacement is exactly unitary there, so the tensor sums to the
        trace of ``rho``; population found in the top guard level signals
        a truncation leak and raises.
    """
    cfg = rho.config
    disp = _displacement_product(cfg, alphas)
    big = _embed_reporting(rho.entries, cfg)
    q = np.real(np.einsum("ij,jk,ki->i", disp.conj().T, big, disp))
    q = q.reshape(cfg.mode_levels)
    interior = tuple(slice(0, n - 1) for n in cfg.mode_levels)
    leak = float(q.sum() - q[interior].sum())
    if leak > LEAK_TOL:
        raise TruncationLeakError(
            f"displaced population {leak:.2e} sits at the top guard level "
            f"(tolerance {LEAK_TOL}); raise cutoff/guard_levels or shrink |alpha|"
        )
    return q


def _displacement_product(cfg: HilbertConfig, alphas) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=complex).reshape(-1)
    if alphas.size != cfg.num_modes:
        raise DimensionMismatchError(
            f"{alphas.size} displacement amplitudes for {cfg.num_modes} modes"
        )
    disp = np.eye(1)
    for j, alpha in enumerate(alphas):
        disp = np.kron(disp, displacement_matrix(alpha, cfg.mode_levels[j]))
    return disp


def displaced_density(rho: DensityMatrix, alphas) -> DensityMatrix:
    """The state in the displaced frame, D† rho D, on rho's own config.

    Shares the displacement convention of `displaced_populations`: the
    diagonal of the result equals that function's output restricted to
    the reporting levels.  Population pushed beyond the reporting space
    is dropped (the trace records the deficit), so the result is
    returned relaxed; population reaching the top guard level raises.
    """
    cfg = rho.config
    disp = _displacement_product(cfg, alphas)
    big = _embed_reporting(rho.entries, cfg)
    moved = disp.conj().T @ big @ disp
    pops = np.real(np.diag(moved)).reshape(cfg.mode_levels)
    interior = tuple(slice(0, n - 1) for n in cfg.mode_levels)
    leak = float(pops.sum() - pops[interior].sum())
    if leak > LEAK_TOL:
        raise TruncationLeakError(
            f"displaced population {leak:.2e} sits at the top guard level "
            f"(tolerance {LEAK_TOL}); raise cutoff/guard_levels or shrink |alpha|"
        )
    sl = tuple(slice(0, r) for r in cfg.reporting_levels)
    small = moved.reshape(cfg.mode_levels + cfg.mode_levels)[sl + sl]
    dim = cfg.reporting_dim
    return DensityMatrix(small.reshape(dim, dim), cfg, relaxed=True)


def fidelity(rho: DensityMatrix, target: PureState) -> float:
    """Overlap <psi|rho|psi> of a density matrix with a pure target."""
    psi = reporting_vector(target)
    if psi.size != rho.entries.shape[0]:
        raise DimensionMismatchError(
            f"target dimension {psi.size} does not match rho dimension {rho.entries.shape[0]}"
        )
    val = complex(psi.conj() @ rho.entries @ psi)
    if not rho.relaxed and abs(val.imag) > 1e-9:
        raise ValueError(f"fidelity came out complex ({val!r}) for a Hermitian rho")
    return val.real


def trace_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    """Half the sum of absolute eigenvalues of (a - b)."""
    if a.entries.shape != b.entries.shape:
        raise DimensionMismatchError("density matrices live on different spaces")
    w = np.linalg.eigvalsh(a.entries - b.entries)
    return 0.5 * float(np.sum(np.abs(w)))


def vacuum_state(config: HilbertConfig) -> PureState:
    """All spins down, all modes in |0>."""
    amp = np.zeros(config.dim, dtype=complex)
    amp[0] = 1.0
    return PureState(amp, config)


def fock_state(config: HilbertConfig, fock, spins=None) -> PureState:
    """Product basis state |spins>|k1..kd> (spins default to all down)."""
    spins = (0,) * config.num_spins if spins is None else tuple(spins)
    fock = tuple(int(k) for k in fock)
    if len(spins) != config.num_spins or len(fock) != config.num_modes:
        raise DimensionMismatchError("spin or mode label count does not match config")
    if any(k >= lv for k, lv in zip(fock, config.mode_levels)):
        raise ConfigError(f"occupation {fock} outside levels {config.mode_levels}")
    idx = np.ravel_multi_index(spins + fock, config.tensor_shape)
    amp = np.zeros(config.dim, dtype=complex)
    amp[idx] = 1.0
    return PureState(amp, config)


def reporting_vector(state: PureState, renormalize: bool = True) -> np.ndarray:
    """Motional amplitudes restricted to the reporting levels.

    Requires a spinless state; population stranded in the guard band
    beyond LEAK_TOL raises rather than being silently dropped.
    """
    if state.config.num_spins != 0:
        raise ConfigError("reporting_vector needs a spinless state; use motional_pure first")
    tens = state.tensor()
    sl = tuple(slice(0, r) for r in state.config.reporting_levels)
    vec = tens[sl].reshape(-1)
    lost = 1.0 - float(np.sum(np.abs(vec) ** 2))
    if lost > LEAK_TOL:
        raise TruncationLeakError(
            f"{lost:.2e} of the population lies above the reporting cutoff"
        )
    if renormalize and lost > 0:
        vec = vec / np.linalg.norm(vec)
    return vec


def motional_pure(state: PureState, tol: float = NORM_TOL) -> PureState:
    """Project onto all spins |down> and drop the spin factors.

    The preparation sequences all end with every spin in |down>, so the
    projection should cost nothing; anything beyond ``tol`` raises.
    """
    cfg = state.config
    if cfg.num_spins == 0:
        return state
    tens = state.tensor()
    down = tens[(0,) * cfg.num_spins]
    lost = 1.0 - float(np.sum(np.abs(down) ** 2))
    if lost > tol:
        raise ValueError(
            f"spins are not in |down> (residual population {lost:.3e}); "
            "trace them out with motional_density instead"
        )
    vec = down.reshape(-1)
    vec = vec / np.linalg.norm(vec)
    return PureState(vec, cfg.motional())


def motional_density(state: PureState, renormalize: bool = True) -> DensityMatrix:
    """Trace out the spins and restrict the modes to the reporting levels."""
    cfg = state.config
    t = state.amplitudes.reshape(cfg.spin_dim, cfg.motional_dim)
    rho = np.einsum("sm,sn->mn", t, t.conj())
    shape = cfg.mode_levels + cfg.mode_levels
    sl = tuple(slice(0, r) for r in cfg.reporting_levels)
    rho = rho.reshape(shape)[sl + sl].reshape(cfg.reporting_dim, cfg.reporting_dim)
    tr = float(np.real(np.trace(rho)))
    if 1.0 - tr > LEAK_TOL:
        raise TruncationLeakError(
            f"{1.0 - tr:.2e} of the population lies above the reporting cutoff"
        )
    if renormalize:
        rho = rho / tr
    return DensityMatrix(rho, cfg.motional())


def pure_density(state: PureState) -> DensityMatrix:
    """Density matrix |psi><psi| of a (spinless or spin-down) pure state."""
    vec = reporting_vector(motional_pure(state))
    return DensityMatrix(np.outer(vec, vec.conj()), state.config.motional())
