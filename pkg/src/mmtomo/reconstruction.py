"""Density-matrix reconstruction from displaced Fock-state distributions.

Displacing every mode around a circle of fixed magnitude and measuring
the joint Fock distribution at each grid setting turns the off-diagonal
structure of the motional density matrix into Fourier components over
the grid phases: a d-dimensional DFT isolates, for each integer offset
tuple l, the combination sum_n prod_j gamma(k_j, n_j, l_j) * rho_{n,n+l}.
Each offset's gamma system is inverted by least squares, the assembled
matrix is hermitized, and a clipped eigendecomposition produces the
closest positive semi-definite unit-trace state.  Everything before the
projection stage is linear in the measured populations, so data
covariances propagate exactly through the same maps.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ConditioningWarning,
    ConfigError,
    DimensionMismatchError,
    NumericalError,
    RankDeficientError,
)
from .fitting import CONDITION_WARN_THRESHOLD, FockDistribution, full_basis
from .fockspace import (
    LEAK_TOL,
    NORM_TOL,
    DensityMatrix,
    HilbertConfig,
    PureState,
    displaced_populations,
    motional_pure,
)

PINV_CUTOFF = 1e-10
LOG_DOMAIN_THRESHOLD = 20


@dataclass(frozen=True)
class DisplacementGrid:
    """Circular grid of displacement settings for an n_max reconstruction.

    Mode j is displaced by alpha = |alpha_j| * exp(i(pi*p/N + phi_j))
    with N = n_max + 1 and integer phase index p in -N..N-1, so there
    are 2N phases per mode and (2N)^d settings in total; that is exactly
    enough to separate coherence offsets up to |l_j| = n_max without
    aliasing.  phase_offsets holds the constant per-mode reference angle
    phi_j; dft_transform divides it back out, so reconstructions do not
    depend on it.
    """

    magnitudes: tuple[float, ...]
    n_max: int
    phase_offsets: tuple[float, ...] | None = None

    def __post_init__(self):
        mags = np.atleast_1d(np.asarray(self.magnitudes, dtype=float))
        if mags.ndim != 1 or mags.size == 0:
            raise ConfigError("magnitudes must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(mags)) or mags.min() < 0:
            raise ConfigError(f"magnitudes must be finite and >= 0, got {mags.tolist()}")
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in mags))
        if int(self.n_max) != self.n_max or self.n_max < 0:
            raise ConfigError(f"n_max must be a non-negative integer, got {self.n_max!r}")
        object.__setattr__(self, "n_max", int(self.n_max))
        if self.phase_offsets is None:
            offs = np.zeros(mags.size)
        else:
            offs = np.atleast_1d(np.asarray(self.phase_offsets, dtype=float))
        if offs.shape != (mags.size,):
            raise DimensionMismatchError(
                f"{offs.size} phase offsets for {mags.size} modes"
            )
        if not np.all(np.isfinite(offs)):
            raise ConfigError("phase offsets must be finite")
        object.__setattr__(self, "phase_offsets", tuple(float(x) for x in offs))

    @property
    def num_modes(self) -> int:
        return len(self.magnitudes)

    @property
    def N(self) -> int:
        """Half the number of phases per mode (N = n_max + 1)."""
        return self.n_max + 1

    @property
    def num_settings(self) -> int:
        return (2 * self.N) ** self.num_modes

    def points(self) -> tuple[tuple[int, ...], ...]:
        """All phase-index tuples, last mode varying fastest."""
        return tuple(itertools.product(range(-self.N, self.N), repeat=self.num_modes))

    def alphas(self, point) -> tuple[complex, ...]:
        """Complex displacement amplitudes at one phase-index tuple."""
        point = tuple(int(p) for p in point)
        if len(point) != self.num_modes:
            raise DimensionMismatchError(
                f"phase index {point} has {len(point)} entries for {self.num_modes} modes"
            )
        if any(p < -self.N or p >= self.N for p in point):
            raise ConfigError(f"phase indices {point} outside -N..N-1 with N={self.N}")
        return tuple(
            mag * complex(np.exp(1j * (math.pi * p / self.N + off)))
            for mag, p, off in zip(self.magnitudes, point, self.phase_offsets)
        )


@dataclass(frozen=True)
class QDataset:
    """Displaced Fock distributions covering a complete displacement grid.

    ``distributions`` maps every grid phase-index tuple to the
    FockDistribution measured (or computed) at that setting.  All
    settings must be present, share one k_max, and match the grid's
    mode count.
    """

    distributions: dict
    grid: DisplacementGrid

    def __post_init__(self):
        table = {
            tuple(int(x) for x in key): dist
            for key, dist in dict(self.distributions).items()
        }
        object.__setattr__(self, "distributions", table)
        wanted = self.grid.points()
        missing = [p for p in wanted if p not in table]
        if missing:
            listing = ", ".join(str(p) for p in missing)
            raise ConfigError(
                f"dataset misses {len(missing)} of {len(wanted)} grid settings: {listing}"
            )
        extras = sorted(set(table) - set(wanted))
        if extras:
            listing = ", ".join(str(p) for p in extras)
            raise ConfigError(f"dataset has settings outside the grid: {listing}")
        kmaxes = {dist.k_max for dist in table.values()}
        if len(kmaxes) != 1:
            raise ConfigError(f"inconsistent k_max across settings: {sorted(kmaxes)}")
        for p, dist in table.items():
            if dist.num_modes != self.grid.num_modes:
                raise DimensionMismatchError(
                    f"distribution at {p} covers {dist.num_modes} modes, "
                    f"grid has {self.grid.num_modes}"
                )

    @property
    def k_max(self) -> int:
        return next(iter(self.distributions.values())).k_max

    @property
    def num_modes(self) -> int:
        return self.grid.num_modes


def exact_qdataset(rho: DensityMatrix, grid: DisplacementGrid, k_max: int) -> QDataset:
    """Noise-free displaced distributions of a known state.

    Every grid setting gets the exact populations ``<k|D' rho D|k>`` up
    to k_max per mode with zero covariance.  The state must retain at
    least k_max + 2 levels per mode so the reported populations sit
    clear of the truncation guard.
    """
    if k_max < 0:
        raise ConfigError(f"k_max must be >= 0, got {k_max}")
    cfg = rho.config
    if cfg.num_modes != grid.num_modes:
        raise DimensionMismatchError(
            f"state has {cfg.num_modes} modes, grid has {grid.num_modes}"
        )
    if min(cfg.mode_levels) < k_max + 2:
        raise ConfigError(
            f"state keeps only {min(cfg.mode_levels)} levels on its smallest mode; "
            f"populations up to k_max={k_max} need at least {k_max + 2} "
            "(raise cutoff or guard_levels)"
        )
    d = grid.num_modes
    basis = full_basis(k_max, d)
    size = (k_max + 1) ** d
    sl = tuple(slice(0, k_max + 1) for _ in range(d))
    table = {}
    for p in grid.points():
        q = displaced_populations(rho, grid.alphas(p))
        table[p] = FockDistribution(
            q[sl].copy(),
            np.zeros((size, size)),
            k_max=k_max,
            basis=basis,
            metadata={"exact": True, "grid_point": p},
        )
    return QDataset(table, grid)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def gamma_coefficient(k: int, n: int, l: int, alpha_abs: float) -> float:
    """Coupling between rho_{n,n+l} and the displaced population of level k.

    For a real displacement magnitude a this equals
    <n|D(a)|k> <n+l|D(a)|k>, evaluated here from the closed-form double
    sum with prefactor e^{-a^2} a^{2k} / k! (not from displacement
    matrix elements, so the two routes stay independent checks of each
    other).  Indices above LOG_DOMAIN_THRESHOLD switch to signed
    log-domain accumulation to dodge factorial overflow.
    """
    k = int(k)
    n = int(n)
    l = int(l)
    m = n + l
    if k < 0 or n < 0:
        raise ConfigError(f"Fock indices must be >= 0, got k={k}, n={n}")
    if m < 0:
        raise ConfigError(f"n + l = {m} must be >= 0")
    a = float(alpha_abs)
    if not math.isfinite(a) or a <= 0.0:
        raise ConfigError(
            f"displacement magnitude {a!r} must be > 0 for invertibility"
        )
    if max(k, n, m) <= LOG_DOMAIN_THRESHOLD:
        pref = math.exp(-a * a) * a ** (2 * k) / math.factorial(k)
        root = math.sqrt(math.factorial(n) * math.factorial(m))
        total = 0.0
        for j in range(min(k, n) + 1):
            for jp in range(min(k, m) + 1):
                term = math.comb(k, j) * math.comb(k, jp)
                term *= a ** (n + m - 2 * j - 2 * jp)
                term /= math.factorial(n - j) * math.factorial(m - jp)
                total += term if (j + jp) % 2 == 0 else -term
        return pref * root * total
    log_a = math.log(a)
    log_pref = -a * a + 2 * k * log_a - math.lgamma(k + 1)
    log_root = 0.5 * (math.lgamma(n + 1) + math.lgamma(m + 1))
    logs = []
    signs = []
    for j in range(min(k, n) + 1):
        for jp in range(min(k, m) + 1):
            lg = _log_comb(k, j) + _log_comb(k, jp)
            lg += (n + m - 2 * j - 2 * jp) * log_a
            lg -= math.lgamma(n - j + 1) + math.lgamma(m - jp + 1)
            logs.append(lg)
            signs.append(1.0 if (j + jp) % 2 == 0 else -1.0)
    peak = max(logs)
    acc = sum(s * math.exp(lg - peak) for s, lg in zip(signs, logs))
    if acc == 0.0:
        return 0.0
    return math.copysign(math.exp(log_pref + log_root + peak + math.log(abs(acc))), acc)


def _offset_vector(grid: DisplacementGrid, l) -> tuple[int, ...]:
    """Validate a coherence-offset tuple (column minus row index per mode)."""
    l = tuple(int(x) for x in np.atleast_1d(np.asarray(l, dtype=int)))
    if len(l) != grid.num_modes:
        raise DimensionMismatchError(
            f"offset tuple {l} has {len(l)} entries for {grid.num_modes} modes"
        )
    if any(abs(x) > grid.n_max for x in l):
        raise ConfigError(f"offsets {l} exceed the grid's n_max={grid.n_max}")
    return l


def _dft_coefficients(grid: DisplacementGrid, l: tuple[int, ...]) -> np.ndarray:
    """Per-setting DFT weights for offset l, aligned with grid.points().

    Includes the compensation for the per-mode phase offsets: a constant
    reference angle phi_j rotates the offset-l component by
    e^{i l_j phi_j}, which is divided back out here.
    """
    pts = np.asarray(grid.points(), dtype=float)
    lvec = np.asarray(l, dtype=float)
    phases = pts @ (lvec * math.pi / grid.N)
    offset = float(np.dot(lvec, grid.phase_offsets))
    return np.exp(-1j * (phases + offset)) / grid.num_settings


def dft_transform(qdata: QDataset, l) -> np.ndarray:
    """Fourier component of the displaced distributions at offset l.

    Returns the complex tensor
    Q^(l)_k = (2N)^{-d} sum_p Q_k(alpha_p) exp(-i pi sum_j l_j p_j / N)
    over the Fock indices k, corrected for the grid's phase offsets.
    """
    l = _offset_vector(qdata.grid, l)
    coeffs = _dft_coefficients(qdata.grid, l)
    points = qdata.grid.points()
    out = np.zeros(qdata.distributions[points[0]].populations.shape, dtype=complex)
    for c, p in zip(coeffs, points):
        out += c * qdata.distributions[p].populations
    return out


def _mode_n_range(l_j: int, n_max: int) -> range:
    """Row occupations n with both n and n + l_j inside 0..n_max."""
    return range(max(0, -l_j), n_max - max(0, l_j) + 1)


def _gamma_matrix(grid: DisplacementGrid, l, n_max: int, k_max: int) -> np.ndarray:
    """Gamma system for offset l: rows are k-tuples, columns n-tuples."""
    full = np.eye(1)
    for j in range(grid.num_modes):
        ns = _mode_n_range(l[j], n_max)
        block = np.empty((k_max + 1, len(ns)))
        for ki in range(k_max + 1):
            for col, nj in enumerate(ns):
                block[ki, col] = gamma_coefficient(ki, nj, l[j], grid.magnitudes[j])
        full = np.kron(full, block)
    return full


def _gamma_pinv(grid: DisplacementGrid, l, n_max: int, k_max: int):
    """Pseudo-inverse of the offset-l gamma system and its condition number."""
    g = _gamma_matrix(grid, l, n_max, k_max)
    if g.shape[0] < g.shape[1]:
        raise ConfigError(
            f"{g.shape[0]} measured Fock levels cannot determine {g.shape[1]} "
            f"unknowns at offsets {tuple(l)}; raise k_max"
        )
    u, s, vt = np.linalg.svd(g, full_matrices=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    if not math.isfinite(cond) or s[-1] <= s[0] * PINV_CUTOFF:
        raise RankDeficientError(
            f"gamma system at offsets {tuple(l)} is rank deficient "
            f"(condition number {cond:.3e}); use larger |alpha| or k_max",
            condition_number=cond,
        )
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"gamma system at offsets {tuple(l)} has condition number {cond:.3e}; "
            "element uncertainties will be strongly amplified",
            ConditioningWarning,
            stacklevel=3,
        )
    pinv = (vt.T / s) @ u.T
    return pinv, cond


def _element_indices(l, n_max: int, num_modes: int):
    """Flat (row, col) positions receiving the offset-l solution vector.

    The component for occupation tuple n lands at row n and column
    n + l, both raveled in C order over the (n_max+1)^d basis; the
    enumeration order matches the gamma matrix columns.
    """
    dims = (n_max + 1,) * num_modes
    rows = []
    cols = []
    for n in itertools.product(*(_mode_n_range(l[j], n_max) for j in range(num_modes))):
        m = tuple(nj + lj for nj, lj in zip(n, l))
        rows.append(np.ravel_multi_index(n, dims))
        cols.append(np.ravel_multi_index(m, dims))
    return np.asarray(rows), np.asarray(cols)


def invert_gamma(qdft: dict, grid: DisplacementGrid, n_max: int, k_max: int) -> np.ndarray:
    """Solve every offset's gamma system and assemble the raw matrix.

    ``qdft`` maps each coherence-offset tuple (all |l_j| <= n_max) to
    its Fourier tensor.  Conjugate-related elements come from l and -l
    independently; hermitize() merges them afterwards.  The trace is
    left as reconstructed, not renormalized.

    Returns the (n_max+1)^d square complex matrix.  Covariance
    propagation lives in reconstruct(), which reuses the same linear
    maps on the full pipeline.
    """
    if n_max > grid.n_max:
        raise ConfigError(
            f"n_max={n_max} exceeds the grid's n_max={grid.n_max}; "
            "higher coherences alias on this grid"
        )
    if k_max < n_max:
        raise ConfigError(f"k_max={k_max} must be >= n_max={n_max} to close the system")
    d = grid.num_modes
    table = {
        tuple(int(x) for x in key): np.asarray(val, dtype=complex)
        for key, val in dict(qdft).items()
    }
    wanted = tuple(itertools.product(range(-n_max, n_max + 1), repeat=d))
    missing = [l for l in wanted if l not in table]
    if missing:
        listing = ", ".join(str(l) for l in missing)
        raise ConfigError(f"missing Fourier components for offsets: {listing}")
    kshape = (k_max + 1,) * d
    dim = (n_max + 1) ** d
    rho = np.zeros((dim, dim), dtype=complex)
    for l in wanted:
        q = table[l]
        if q.shape != kshape:
            raise DimensionMismatchError(
                f"component at offsets {l} has shape {q.shape}, expected {kshape}"
            )
        pinv, _ = _gamma_pinv(grid, l, n_max, k_max)
        rows, cols = _element_indices(l, n_max, d)
        rho[rows, cols] = pinv @ q.reshape(-1)
    return rho


def hermitize(matrix) -> np.ndarray:
    """Average a square matrix with its conjugate transpose; idempotent."""
    m = np.asarray(matrix, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"need a square matrix, got shape {m.shape}")
    return (m + m.conj().T) / 2.0


def project_psd(rho_raw, config: HilbertConfig | None = None) -> DensityMatrix:
    """Closest positive semi-definite unit-trace state (clip and renormalize).

    Clipping negative eigenvalues to zero gives the Frobenius-nearest
    PSD matrix; the subsequent trace renormalization is the documented
    choice for restoring a unit trace.  The input must already be
    Hermitian.  Without an explicit config the result lives on a
    single-mode space of matching dimension.
    """
    m = np.asarray(rho_raw, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"need a square matrix, got shape {m.shape}")
    defect = float(np.max(np.abs(m - m.conj().T)))
    if defect > NORM_TOL:
        raise ConfigError(
            f"input to project_psd must be Hermitian (defect {defect:.3e}); "
            "call hermitize first"
        )
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    total = float(np.sum(w))
    if total <= 0.0:
        raise NumericalError("no positive eigenvalue mass left after clipping")
    w /= total
    out = (v * w) @ v.conj().T
    out = (out + out.conj().T) / 2.0
    if config is None:
        config = HilbertConfig(
            num_modes=1, cutoff=m.shape[0] - 1, num_spins=0, guard_levels=0
        )
    elif config.reporting_dim != m.shape[0]:
        raise DimensionMismatchError(
            f"config reporting dim {config.reporting_dim} does not match "
            f"matrix dimension {m.shape[0]}"
        )
    return DensityMatrix(out, config)


@dataclass
class ReconstructedState:
    """Output bundle of reconstruct().

    ``covariance`` covers the stacked vector
    [Re vec(rho_raw); Im vec(rho_raw)] with vec in C order, so it is a
    2*D^2 square matrix for a D-dimensional reconstruction;
    sigma_real()/sigma_imag() unpack the elementwise standard
    deviations.  ``fidelity`` is evaluated on rho_raw against the
    declared target (None when no target was given). ``diagnostics``
    carries min_eigenvalue and trace of rho_raw plus the trace distance
    and fidelity after projection.
    """

    rho_raw: np.ndarray
    rho_psd: DensityMatrix
    covariance: np.ndarray
    fidelity: float | None
    diagnostics: dict
    metadata: dict = field(default_factory=dict)

    def sigma_real(self) -> np.ndarray:
        dim = self.rho_raw.shape[0]
        var = np.clip(np.diag(self.covariance)[: dim * dim], 0.0, None)
        return np.sqrt(var).reshape(dim, dim)

    def sigma_imag(self) -> np.ndarray:
        dim = self.rho_raw.shape[0]
        var = np.clip(np.diag(self.covariance)[dim * dim :], 0.0, None)
        return np.sqrt(var).reshape(dim, dim)


def _transpose_permutation(dim: int) -> np.ndarray:
    """Index permutation realizing vec(B^T) = vec(B)[perm]."""
    return np.arange(dim * dim).reshape(dim, dim).T.reshape(-1)


def _propagate_covariance(qdata: QDataset, offsets, n_max: int, k_max: int, dim: int):
    """Covariance of [Re vec; Im vec] of the hermitized raw matrix.

    Builds, for every grid setting, the complex sensitivity of the raw
    element vector to that setting's populations (DFT coefficient times
    gamma pseudo-inverse row), converts hermitization into the
    equivalent real-linear map, and accumulates setting covariances,
    which are independent across the grid.
    """
    grid = qdata.grid
    d = grid.num_modes
    ksize = (k_max + 1) ** d
    per_offset = []
    conds = {}
    for l in offsets:
        pinv, cond = _gamma_pinv(grid, l, n_max, k_max)
        rows, cols = _element_indices(l, n_max, d)
        per_offset.append((rows * dim + cols, pinv, _dft_coefficients(grid, l)))
        conds[l] = cond
    perm = _transpose_permutation(dim)
    cov = np.zeros((2 * dim * dim, 2 * dim * dim))
    for gi, p in enumerate(grid.points()):
        sens = np.zeros((dim * dim, ksize), dtype=complex)
        for flat, pinv, coeffs in per_offset:
            sens[flat, :] = coeffs[gi] * pinv
        top = 0.5 * (sens.real + sens.real[perm])
        bottom = 0.5 * (sens.imag - sens.imag[perm])
        real_map = np.vstack([top, bottom])
        cov += real_map @ qdata.distributions[p].covariance @ real_map.T
    return cov, conds


def _target_vector(target: PureState, n_max: int, num_modes: int) -> np.ndarray:
    """Target amplitudes on the reconstruction basis, C-order flattened."""
    if target.config.num_spins != 0:
        target = motional_pure(target)
    if target.config.num_modes != num_modes:
        raise DimensionMismatchError(
            f"target has {target.config.num_modes} modes, "
            f"reconstruction has {num_modes}"
        )
    if any(lv < n_max + 1 for lv in target.config.mode_levels):
        raise DimensionMismatchError(
            f"target keeps fewer than {n_max + 1} levels on some mode"
        )
    sl = tuple(slice(0, n_max + 1) for _ in range(num_modes))
    vec = target.tensor()[sl].reshape(-1)
    lost = 1.0 - float(np.sum(np.abs(vec) ** 2))
    if lost > LEAK_TOL:
        raise ConfigError(
            f"{lost:.2e} of the target lies above n_max={n_max}; fidelity "
            "against it is not defined on the reconstruction space"
        )
    return vec


def reconstruct(qdata: QDataset, target: PureState | None = None) -> ReconstructedState:
    """Full chain: DFT, gamma inversion, hermitize, PSD projection.

    The grid's n_max fixes the reconstruction space; the dataset's k_max
    must be at least that large.  Covariances attached to the input
    distributions propagate through the DFT, the inversion, and the
    hermitization (all linear); the projection stage is nonlinear and is
    reported through diagnostics only.
    """
    grid = qdata.grid
    d = grid.num_modes
    n_max = grid.n_max
    k_max = qdata.k_max
    if k_max < n_max:
        raise ConfigError(f"k_max={k_max} must be >= n_max={n_max} to close the system")
    offsets = tuple(itertools.product(range(-n_max, n_max + 1), repeat=d))
    qdft = {l: dft_transform(qdata, l) for l in offsets}
    rho_raw = hermitize(invert_gamma(qdft, grid, n_max, k_max))

    dim = (n_max + 1) ** d
    cov, conds = _propagate_covariance(qdata, offsets, n_max, k_max, dim)

    cfg = HilbertConfig(num_modes=d, cutoff=n_max, num_spins=0, guard_levels=0)
    rho_psd = project_psd(rho_raw, cfg)

    fid = None
    fid_psd = None
    if target is not None:
        psi = _target_vector(target, n_max, d)
        fid = float(np.real(psi.conj() @ rho_raw @ psi))
        fid_psd = float(np.real(psi.conj() @ rho_psd.entries @ psi))
    gap = np.linalg.eigvalsh(rho_raw - rho_psd.entries)
    diagnostics = {
        "min_eigenvalue": float(np.min(np.linalg.eigvalsh(rho_raw))),
        "trace": float(np.real(np.trace(rho_raw))),
        "trace_distance": 0.5 * float(np.sum(np.abs(gap))),
        "fidelity_psd": fid_psd,
    }
    metadata = {
        "n_max": n_max,
        "k_max": k_max,
        "magnitudes": grid.magnitudes,
        "phase_offsets": grid.phase_offsets,
        "num_settings": grid.num_settings,
        "condition_numbers": conds,
        "condition_number": max(conds.values()),
        "pinv_cutoff": PINV_CUTOFF,
    }
    return ReconstructedState(rho_raw, rho_psd, cov, fid, diagnostics, metadata)
