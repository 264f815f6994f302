"""Fock-distribution and calibration fits on sideband time-scan data.

The readout curves are linear in the Fock populations:

    P_s(t) = sum_k P_k prod_j f_{s_j}(k_j, t)

so the distribution fit is a weighted linear least-squares problem over
whichever basis of Fock tuples the caller selects.  All 2^d spin
configurations enter one joint system by default; a flag restricts the
data to the all-down row for the classic single-curve fit.  Thermal and
coherent calibrations are one-parameter nonlinear fits of the same
curve family.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, nnls

from .exceptions import (
    ConditioningWarning,
    ConfigError,
    FitConvergenceError,
    RankDeficientError,
)
from .measurement import TimeScanData, all_spin_configs

CONDITION_WARN_THRESHOLD = 1e6
RANK_TOL_HINT = (
    "the design matrix is rank deficient; identical sideband rates on "
    "different modes make Fock tuples indistinguishable - choose distinct "
    "rates per mode, or reduce k_max"
)


@dataclass
class FockDistribution:
    """Fitted multi-mode Fock populations with parameter covariance.

    ``populations`` is the full (k_max+1)^d tensor (zero outside the
    fitted basis); ``covariance`` is over the flattened full index, with
    zero rows/columns for entries that were not fitted; ``basis`` lists
    the fitted tuples.  ``residual`` is the weighted rms residual (a
    per-point z-score rms when binomial weights were used).
    """

    populations: np.ndarray
    covariance: np.ndarray
    k_max: int
    basis: tuple[tuple[int, ...], ...]
    residual: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.populations, dtype=float)
        d = p.ndim
        expected = (self.k_max + 1,) * d
        if p.shape != expected:
            raise ConfigError(f"population tensor shape {p.shape}, expected {expected}")
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (p.size, p.size):
            raise ConfigError(
                f"covariance shape {cov.shape} does not match {p.size} flattened entries"
            )
        self.populations = p
        self.covariance = cov
        self._soft_validate()

    def _soft_validate(self):
        flat = self.populations.reshape(-1)
        sig = np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
        if np.any(flat < -3.0 * sig - 1e-7):
            worst = float(np.min(flat + 3.0 * sig))
            warnings.warn(
                f"population {worst:.3g} below -3 sigma of its uncertainty",
                UserWarning,
                stacklevel=3,
            )
        if not np.any(self.covariance):
            # No uncertainty model (exact tensors, e.g. displaced-state
            # distributions): their sum legitimately falls below one.
            return
        total = float(flat.sum())
        ssum = float(np.sqrt(max(0.0, np.sum(self.covariance))))
        if not (1 - 3 * ssum - 1e-6 <= total <= 1 + 3 * ssum + 1e-6):
            warnings.warn(
                f"populations sum to {total:.4f}, outside 1 +- 3 sigma ({ssum:.4f})",
                UserWarning,
                stacklevel=3,
            )

    @property
    def num_modes(self) -> int:
        return self.populations.ndim

    def sigmas(self) -> np.ndarray:
        """Per-entry standard errors, same shape as ``populations``."""
        sig = np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
        return sig.reshape(self.populations.shape)


def full_basis(k_max: int, num_modes: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.product(range(k_max + 1), repeat=num_modes))


def one_phonon_neighborhood(
    occupied: tuple[tuple[int, ...], ...]
) -> tuple[tuple[int, ...], ...]:
    """All Fock tuples at most one phonon away from the given set.

    For each listed tuple this includes the tuple itself and every
    single-mode step up or down (clipped at zero).  Used to restrict a
    fit to the neighborhood of a known support, e.g. the three
    single-excitation components of a three-mode W state.
    """
    seen: dict[tuple[int, ...], None] = {}
    for base in occupied:
        base = tuple(int(k) for k in base)
        candidates = [base]
        for j in range(len(base)):
            for step in (-1, 1):
                moved = list(base)
                moved[j] += step
                if moved[j] >= 0:
                    candidates.append(tuple(moved))
        for cand in candidates:
            seen.setdefault(cand, None)
    return tuple(seen)


def _mode_rates(scan: TimeScanData) -> np.ndarray:
    d = scan.num_ions
    return np.array([scan.calibration.sideband(j, j) for j in range(d)])


def _design_matrix(
    times: np.ndarray,
    rates: np.ndarray,
    basis: tuple[tuple[int, ...], ...],
    configs: tuple[str, ...],
    tau: float | None,
) -> np.ndarray:
    """Stacked model matrix, rows ordered (config, then time)."""
    d = rates.size
    k_top = max(max(b) for b in basis) if basis else 0
    cos2 = []
    for j in range(d):
        g = np.sqrt(np.arange(1.0, k_top + 2))[:, None] * rates[j] * times[None, :]
        cos2.append(np.cos(g) ** 2)
    env = None if tau is None else np.exp(-times / tau)
    rows = []
    for cfg_label in configs:
        cols = []
        for b in basis:
            col = np.ones_like(times)
            for j in range(d):
                f = cos2[j][b[j]]
                col = col * (f if cfg_label[j] == "d" else 1.0 - f)
            if env is not None:
                col = 2.0 ** (-d) * (1.0 - env) + env * col
            cols.append(col)
        rows.append(np.stack(cols, axis=1))
    return np.concatenate(rows, axis=0)


def _binomial_weights(p: np.ndarray, shots: int) -> np.ndarray:
    """Inverse binomial variances, p(1-p) floored at 1/(4*shots).

    The floor keeps saturated points at a finite weight.  Callers pass
    model-predicted probabilities, not the raw data: weighting by the
    observed fractions correlates weight with noise and biases curves
    that ride near 0 or 1.
    """
    p = np.clip(p, 0.0, 1.0)
    var = np.maximum(p * (1.0 - p), 0.25 / shots) / shots
    return 1.0 / var


def _require_full_rank(x: np.ndarray, context: str):
    n = x.shape[1]
    if n == 0:
        raise ConfigError("empty fit basis")
    rank = int(np.linalg.matrix_rank(x))
    if rank < n:
        cond = float(np.linalg.cond(x))
        raise RankDeficientError(
            f"{context}: rank {rank} < {n} parameters (condition number {cond:.3g}); "
            + RANK_TOL_HINT,
            condition_number=cond,
        )


def _conditioning_report(xw: np.ndarray, context: str) -> float:
    cond = float(np.linalg.cond(xw))
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"{context}: condition number {cond:.3g} exceeds "
            f"{CONDITION_WARN_THRESHOLD:.0e}; estimates may be overfit",
            ConditioningWarning,
            stacklevel=4,
        )
    return cond


def _solve_wls(
    xw: np.ndarray,
    yw: np.ndarray,
    nonneg: bool,
) -> np.ndarray:
    if nonneg:
        sol, _ = nnls(xw, yw)
        return sol
    sol, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    return sol


def _weighted_system(
    x: np.ndarray, y: np.ndarray, sw: np.ndarray, simplex: bool
) -> tuple[np.ndarray, np.ndarray]:
    xw = x * sw[:, None]
    yw = y * sw
    if simplex:
        lam = 1e6 * float(np.max(sw))
        xw = np.vstack([xw, np.full((1, x.shape[1]), lam)])
        yw = np.append(yw, lam)
    return xw, yw


def _estimate(
    x: np.ndarray,
    y: np.ndarray,
    shots: int | None,
    nonneg: bool,
    simplex: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Reweighted least squares; returns (solution, final sqrt-weights).

    Sampled data gets two reweighting passes with variances taken from
    the fitted model rather than the raw fractions.
    """
    sw = np.ones_like(y)
    xw, yw = _weighted_system(x, y, sw, simplex)
    sol = _solve_wls(xw, yw, nonneg)
    if shots is not None:
        for _ in range(2):
            sw = np.sqrt(_binomial_weights(x @ sol, shots))
            xw, yw = _weighted_system(x, y, sw, simplex)
            sol = _solve_wls(xw, yw, nonneg)
    return sol, sw


def _bootstrap_covariance(
    scan: TimeScanData,
    x_design: np.ndarray,
    configs: tuple[str, ...],
    simplex: bool,
    replicates: int,
    seed: int,
) -> np.ndarray:
    """Parametric bootstrap for the non-negative solver.

    Redraws every time point from a multinomial around the observed
    config probabilities, refits, and returns the empirical covariance.
    """
    shots = scan.shots
    n_t = scan.times.size
    obs = np.stack([scan.populations[c] for c in configs])
    obs = np.clip(obs, 0.0, None)
    missing = 1.0 - obs.sum(axis=0)
    estimates = np.zeros((replicates, x_design.shape[1]))
    for r in range(replicates):
        rng = np.random.default_rng([seed, 77001, r])
        fake = np.zeros_like(obs)
        for i in range(n_t):
            p = np.append(obs[:, i], max(0.0, missing[i]))
            p = p / p.sum()
            draw = rng.multinomial(shots, p)[: obs.shape[0]]
            fake[:, i] = draw / shots
        estimates[r], _ = _estimate(x_design, fake.reshape(-1), shots, True, simplex)
    return np.cov(estimates, rowvar=False).reshape(
        x_design.shape[1], x_design.shape[1]
    )


def _fit_linear(
    scan: TimeScanData,
    basis: tuple[tuple[int, ...], ...],
    k_max: int,
    all_down_only: bool,
    nonneg: bool,
    simplex: bool,
    envelope_tau: float | None,
    bootstrap_replicates: int,
    seed: int,
) -> FockDistribution:
    d = scan.num_ions
    for b in basis:
        if len(b) != d:
            raise ConfigError(f"basis tuple {b} has {len(b)} modes, scan has {d}")
        if min(b) < 0 or max(b) > k_max:
            raise ConfigError(f"basis tuple {b} outside 0..k_max={k_max}")
    if len(set(basis)) != len(basis):
        raise ConfigError("fit basis contains duplicate tuples")
    configs = ("d" * d,) if all_down_only else all_spin_configs(d)
    n_rows = len(configs) * scan.times.size
    if n_rows < len(basis):
        raise ConfigError(
            f"{n_rows} data rows cannot determine {len(basis)} parameters; "
            "extend the time grid or shrink the basis"
        )
    tau = envelope_tau if envelope_tau is not None else scan.tau
    rates = _mode_rates(scan)
    x = _design_matrix(scan.times, rates, basis, configs, tau)
    context = f"Fock fit with {len(basis)} parameters"
    _require_full_rank(x, context)
    y = np.concatenate([scan.populations[c] for c in configs])
    sol, sw = _estimate(x, y, scan.shots, nonneg, simplex)
    cond = _conditioning_report(x * sw[:, None], context)
    resid = float(np.sqrt(np.mean((sw * (y - x @ sol)) ** 2)))
    if nonneg:
        if scan.shots is None:
            cov_basis = np.zeros((len(basis), len(basis)))
        else:
            cov_basis = _bootstrap_covariance(
                scan, x, configs, simplex, bootstrap_replicates, seed
            )
    else:
        xw, _ = _weighted_system(x, y, sw, simplex)
        cov_basis = np.linalg.inv(xw.T @ xw)
    size = (k_max + 1) ** d
    flat_idx = [int(np.ravel_multi_index(b, (k_max + 1,) * d)) for b in basis]
    populations = np.zeros(size)
    populations[flat_idx] = sol
    covariance = np.zeros((size, size))
    covariance[np.ix_(flat_idx, flat_idx)] = cov_basis
    return FockDistribution(
        populations.reshape((k_max + 1,) * d),
        covariance,
        k_max,
        tuple(basis),
        residual=resid,
        metadata={
            "condition_number": cond,
            "all_down_only": all_down_only,
            "nonneg": nonneg,
            "simplex": simplex,
            "envelope_tau": tau,
            "shots": scan.shots,
            "label": scan.label,
            "pseudo_covariance": scan.shots is None and not nonneg,
        },
    )


def fit_fock_distribution(
    scan: TimeScanData,
    k_max: int,
    all_down_only: bool = False,
    nonneg: bool = False,
    simplex: bool = False,
    envelope_tau: float | None = None,
    bootstrap_replicates: int = 200,
    seed: int = 0,
) -> FockDistribution:
    """Weighted linear fit of all Fock tuples up to k_max per mode.

    Weights are inverse binomial variances evaluated on the fitted
    model (two reweighting passes), with p(1-p) floored at 1/(4*shots)
    so saturated points keep a finite weight; exact scans get unit
    weights and a covariance that is only a conditioning report.
    ``nonneg`` switches to a non-negative solver with a
    parametric-bootstrap covariance; ``simplex`` adds a heavily
    weighted sum-to-one row.  If the scan carries a decoherence time
    (or one is passed here), the basis curves are enveloped to match.
    """
    if k_max < 0:
        raise ConfigError("k_max must be >= 0")
    basis = full_basis(k_max, scan.num_ions)
    return _fit_linear(
        scan, basis, k_max, all_down_only, nonneg, simplex, envelope_tau,
        bootstrap_replicates, seed,
    )


def fit_fock_distribution_restricted(
    scan: TimeScanData,
    basis_subset,
    k_max: int | None = None,
    **options,
) -> FockDistribution:
    """Same solver on a caller-chosen subset of Fock tuples.

    ``k_max`` defaults to the largest occupation in the subset; entries
    outside the subset are reported as exactly zero with zero variance.
    """
    basis = tuple(tuple(int(k) for k in b) for b in basis_subset)
    if not basis:
        raise ConfigError("basis subset is empty")
    if k_max is None:
        k_max = max(max(b) for b in basis)
    return _fit_linear(
        scan,
        basis,
        k_max,
        options.pop("all_down_only", False),
        options.pop("nonneg", False),
        options.pop("simplex", False),
        options.pop("envelope_tau", None),
        options.pop("bootstrap_replicates", 200),
        options.pop("seed", 0),
    )


def _single_mode_curve(scan: TimeScanData) -> tuple[np.ndarray, np.ndarray, float]:
    if scan.num_ions != 1:
        raise ConfigError("calibration fits need a single-ion, single-mode scan")
    omega = scan.calibration.sideband(0, 0)
    return scan.times, scan.populations["d"], omega


def thermal_populations(nbar: float, levels: int) -> np.ndarray:
    """p_n = nbar^n / (1+nbar)^(n+1) on the first ``levels`` levels."""
    if nbar < 0:
        raise ConfigError("mean occupation must be >= 0")
    if nbar == 0:
        p = np.zeros(levels)
        p[0] = 1.0
        return p
    n = np.arange(levels)
    return np.exp(n * math.log(nbar) - (n + 1) * math.log1p(nbar))


def _poisson_populations(mean: float, levels: int) -> np.ndarray:
    if mean < 0:
        raise ConfigError("Poisson mean must be >= 0")
    if mean == 0:
        p = np.zeros(levels)
        p[0] = 1.0
        return p
    n = np.arange(levels)
    logfact = np.cumsum(np.concatenate([[0.0], np.log(np.arange(1.0, levels))]))
    return np.exp(-mean + n * math.log(mean) - logfact)


def coherent_populations(alpha_abs: float, levels: int) -> np.ndarray:
    """Poisson populations e^{-|a|^2} |a|^(2n) / n! on ``levels`` levels."""
    return _poisson_populations(float(alpha_abs) ** 2, levels)


def _curve_from_populations(p: np.ndarray, omega: float, times: np.ndarray) -> np.ndarray:
    g = np.sqrt(np.arange(1.0, p.size + 1))[:, None] * omega * times[None, :]
    return p @ np.cos(g) ** 2


def _scalar_curve_fit(
    scan: TimeScanData,
    population_law,
    x0: float,
    tail_tol: float,
    max_levels: int,
) -> tuple[float, float]:
    times, y, omega = _single_mode_curve(scan)

    def levels_for(param: float) -> int:
        p = population_law(param, max_levels)
        above = np.nonzero(p >= tail_tol)[0]
        return int(above[-1]) + 1 if above.size else 1

    def model_curve(param: float) -> np.ndarray:
        p = population_law(param, levels_for(param))
        return _curve_from_populations(p, omega, times)

    def solve(sw: np.ndarray, start: float):
        residuals = lambda vec: sw * (model_curve(vec[0]) - y)
        result = least_squares(
            residuals,
            x0=[start],
            bounds=([0.0], [np.inf]),
            xtol=1e-14,
            ftol=1e-14,
            gtol=1e-14,
        )
        if not result.success:
            raise FitConvergenceError(f"calibration fit failed: {result.message}")
        return result

    sw = np.ones_like(y)
    result = solve(sw, x0)
    if scan.shots is not None:
        for _ in range(2):
            sw = np.sqrt(_binomial_weights(model_curve(result.x[0]), scan.shots))
            result = solve(sw, float(result.x[0]))
    jtj = float(np.sum(np.asarray(result.jac) ** 2))
    if jtj <= 0 or not np.isfinite(jtj):
        raise FitConvergenceError("calibration fit has a singular Jacobian")
    sigma = 1.0 / math.sqrt(jtj)
    return float(result.x[0]), sigma


def fit_thermal_nbar(
    scan: TimeScanData, max_levels: int = 80, tail_tol: float = 1e-6
) -> tuple[float, float]:
    """Fit the all-down curve with a thermal distribution; returns (nbar, sigma).

    The thermal sum is truncated where p_n drops below ``tail_tol``.
    """
    return _scalar_curve_fit(scan, thermal_populations, 0.3, tail_tol, max_levels)


def fit_coherent_alpha(
    scan: TimeScanData, max_levels: int = 80, tail_tol: float = 1e-9
) -> tuple[float, float]:
    """Fit the all-down curve with a Poisson distribution; returns (|alpha|, sigma).

    The phase of alpha is not observable here.  Internally the fit runs
    over the Poisson mean |alpha|^2, which stays well-conditioned near
    the vacuum where the curve is flat in |alpha| itself; the estimate
    and its error convert back through the square root.
    """
    mean, sig_mean = _scalar_curve_fit(
        scan, _poisson_populations, 0.25, tail_tol, max_levels
    )
    alpha = math.sqrt(mean)
    sigma = sig_mean / (2 * alpha) if alpha > 0 else math.sqrt(sig_mean)
    return alpha, sigma
