"""Joint spin-state time scans under simultaneous per-mode sideband drives.

Readout drives ion j on mode j (one blue-sideband tone per pair, all
tones applied together for a common duration).  Because the pairs are
disjoint, the joint evolution factorizes exactly, and the joint spin
populations depend only on the diagonal Fock populations of the
prepared state:

    P_s(t) = sum_k P_k  prod_j f_{s_j}(k_j, t),
    f_down = cos^2(sqrt(k_j + 1) Omega_j t),   f_up = sin^2(...).

`analytic_scan` evaluates that closed form; `sample_scan` runs the full
unitary evolution and draws multinomial shots, which agrees with the
closed form for every input state (pure or mixed), not only diagonal
ones.  Sideband phases drop out of the populations and are fixed to 0.

Spin configurations are strings over {'d', 'u'}, one letter per ion,
e.g. 'dd', 'du', 'ud', 'uu' for two ions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BSB, RabiCalibration, evolve
from .exceptions import ConfigError, DimensionMismatchError
from .fockspace import (
    DensityMatrix,
    HilbertConfig,
    PureState,
    motional_pure,
)

ANALYTIC_SUM_TOL = 1e-9


def all_spin_configs(num_ions: int) -> tuple[str, ...]:
    """All 2^d joint spin labels, 'd...d' first, last ion fastest."""
    return tuple("".join(c) for c in itertools.product("du", repeat=num_ions))


@dataclass
class TimeScanData:
    """Joint spin populations on a common time grid.

    ``shots`` is the number of experiments averaged per time point;
    ``None`` marks exact (infinite-shot) curves.  ``tau`` records a
    decoherence envelope if one was applied.
    """

    times: np.ndarray
    populations: dict[str, np.ndarray]
    shots: int | None
    calibration: RabiCalibration
    label: str = ""
    seed: int | None = None
    tau: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        if self.times.size == 0:
            raise ConfigError("time grid is empty")
        if not self.populations:
            raise ConfigError("no spin configurations present")
        d = len(next(iter(self.populations)))
        expected = set(all_spin_configs(d))
        if set(self.populations) != expected:
            raise ConfigError(
                f"need every spin configuration of {d} ions, got {sorted(self.populations)}"
            )
        pops = {}
        for key, arr in self.populations.items():
            arr = np.asarray(arr, dtype=float).reshape(-1)
            if arr.size != self.times.size:
                raise DimensionMismatchError(
                    f"config {key!r} has {arr.size} points, time grid has {self.times.size}"
                )
            pops[key] = arr
        self.populations = pops
        total = sum(pops.values())
        if self.shots is None:
            if np.max(np.abs(total - total[0])) > ANALYTIC_SUM_TOL:
                raise ConfigError("analytic populations must sum to a constant")
            if total[0] > 1 + ANALYTIC_SUM_TOL or total[0] < -ANALYTIC_SUM_TOL:
                raise ConfigError(f"population sum {total[0]!r} outside [0, 1]")
        else:
            if self.shots < 1:
                raise ConfigError("shots must be >= 1")
            tol = 3.0 / math.sqrt(self.shots)
            if np.max(np.abs(total - 1.0)) > tol:
                raise ConfigError("sampled populations do not sum to 1 within noise")

    @property
    def num_ions(self) -> int:
        return len(next(iter(self.populations)))

    def config_matrix(self) -> np.ndarray:
        """Populations stacked in `all_spin_configs` order, shape (2^d, T)."""
        return np.stack([self.populations[c] for c in all_spin_configs(self.num_ions)])


def default_time_grid(
    calib: RabiCalibration, num_points: int = 60, cycles: float = 1.0
) -> np.ndarray:
    """Uniform grid covering `cycles` periods of the slowest readout pair."""
    rates = np.diag(calib.sideband_rabi)
    rates = rates[rates > 0]
    if rates.size == 0:
        raise ConfigError("no driven (ion, mode) pairs on the diagonal")
    t_max = cycles * 2 * math.pi / float(np.min(rates))
    return np.linspace(0.0, t_max, num_points)


def _readout_rates(calib: RabiCalibration, num_modes: int) -> np.ndarray:
    if calib.num_ions < num_modes or calib.num_modes < num_modes:
        raise ConfigError(
            f"readout needs an ion per mode: calibration table {calib.sideband_rabi.shape} "
            f"too small for {num_modes} modes"
        )
    return np.array([calib.sideband(j, j) for j in range(num_modes)])


def analytic_scan(
    populations,
    calib: RabiCalibration,
    times,
    label: str = "",
) -> TimeScanData:
    """Closed-form joint spin curves for given Fock populations.

    ``populations`` is a real tensor P_{k1..kd} (one axis per mode), or
    any object carrying one in a ``populations`` attribute.  The total
    may be below 1 (e.g. a truncated distribution); the curves then sum
    to that total.
    """
    p = getattr(populations, "populations", populations)
    p = np.asarray(p, dtype=float)
    if p.ndim < 1:
        raise ConfigError("populations tensor must have one axis per mode")
    if np.min(p) < -1e-9:
        raise ConfigError(f"negative population {np.min(p)!r}")
    if p.sum() > 1 + 1e-9:
        raise ConfigError(f"populations sum to {p.sum()!r} > 1")
    times = np.asarray(times, dtype=float).reshape(-1)
    d = p.ndim
    rates = _readout_rates(calib, d)
    # factors[j][s] has shape (levels_j, T)
    factors = []
    for j in range(d):
        g = np.sqrt(np.arange(1.0, p.shape[j] + 1))[:, None] * rates[j] * times[None, :]
        c2 = np.cos(g) ** 2
        factors.append({"d": c2, "u": 1.0 - c2})
    out = {}
    letters = "abcdefgh"
    for cfg_label in all_spin_configs(d):
        terms = [factors[j][cfg_label[j]] for j in range(d)]
        spec = (
            ",".join(letters[j] + "t" for j in range(d))
            + ","
            + letters[:d]
            + "->t"
        )
        out[cfg_label] = np.einsum(spec, *terms, p)
    return TimeScanData(times, out, None, calib, label=label)


def _motional_pieces(state) -> tuple[list[float], list[np.ndarray], HilbertConfig]:
    """Decompose a state into weighted pure motional vectors on the
    guard-extended space."""
    if isinstance(state, PureState):
        mot = motional_pure(state)
        return [1.0], [mot.amplitudes], mot.config
    if isinstance(state, DensityMatrix):
        cfg = state.config
        w, v = np.linalg.eigh(state.entries)
        weights, vectors = [], []
        shape = cfg.reporting_levels
        sl = tuple(slice(0, r) for r in shape)
        for i in range(w.size):
            if w[i] <= 1e-12:
                continue
            big = np.zeros(cfg.mode_levels, dtype=complex)
            big[sl] = v[:, i].reshape(shape)
            weights.append(float(w[i]))
            vectors.append(big.reshape(-1))
        if not weights:
            raise ConfigError("density matrix has no positive eigenvalues")
        return weights, vectors, cfg
    raise ConfigError(f"cannot scan a {type(state).__name__}")


def scan_probabilities(state, calib: RabiCalibration, times) -> dict[str, np.ndarray]:
    """Exact joint spin probabilities from full unitary readout evolution."""
    times = np.asarray(times, dtype=float).reshape(-1)
    weights, vectors, mot_cfg = _motional_pieces(state)
    d = mot_cfg.num_modes
    rates = _readout_rates(calib, d)
    cfg = mot_cfg.with_spins(d)
    spin_block = (0,) * d
    configs = all_spin_configs(d)
    totals = {c: np.zeros(times.size) for c in configs}
    for weight, vec in zip(weights, vectors):
        start = np.zeros(cfg.tensor_shape, dtype=complex)
        start[spin_block] = vec.reshape(mot_cfg.mode_levels)
        start = PureState(start.reshape(-1), cfg)
        for it, t in enumerate(times):
            st = start
            for j in range(d):
                st = evolve(st, BSB(mode=j, theta=2.0 * rates[j] * t, ion=j), calib)
            amp2 = np.abs(st.tensor()) ** 2
            probs = amp2.reshape((2,) * d + (-1,)).sum(axis=-1)
            for idx, c in enumerate(configs):
                totals[c][it] += weight * probs.reshape(-1)[idx]
    return totals


def _decohere_probs(probs: dict[str, np.ndarray], times, tau: float) -> dict[str, np.ndarray]:
    d = len(next(iter(probs)))
    mean = 2.0 ** (-d)
    env = np.exp(-np.asarray(times, dtype=float) / tau)
    return {c: mean + (p - mean) * env for c, p in probs.items()}


def _readout_flips(probs: dict[str, np.ndarray], error: float) -> dict[str, np.ndarray]:
    d = len(next(iter(probs)))
    configs = all_spin_configs(d)
    stack = np.stack([probs[c] for c in configs]).reshape((2,) * d + (-1,))
    m = np.array([[1 - error, error], [error, 1 - error]])
    for axis in range(d):
        stack = np.tensordot(m, np.moveaxis(stack, axis, 0), axes=(1, 0))
        stack = np.moveaxis(stack, 0, axis)
    flat = stack.reshape(len(configs), -1)
    return {c: flat[i] for i, c in enumerate(configs)}


def sample_scan(
    state,
    calib: RabiCalibration,
    times,
    shots: int | None,
    seed: int = 0,
    tau: float | None = None,
    readout_error: float = 0.0,
    label: str = "",
) -> TimeScanData:
    """Simulate a finite-shot readout scan of a prepared state.

    ``shots=None`` returns the exact probabilities (infinite-shot
    limit).  Each time point draws from an independent RNG stream
    ``default_rng([seed, point_index])``, so datasets are deterministic
    and the points can be evaluated in any order.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if shots is not None and shots < 1:
        raise ConfigError("shots must be >= 1 (or None for exact curves)")
    if not 0.0 <= readout_error < 0.5:
        raise ConfigError("readout_error must lie in [0, 0.5)")
    if tau is not None and tau <= 0:
        raise ConfigError("decoherence time must be positive")
    probs = scan_probabilities(state, calib, times)
    if tau is not None:
        probs = _decohere_probs(probs, times, tau)
    if readout_error > 0:
        probs = _readout_flips(probs, readout_error)
    if shots is None:
        return TimeScanData(times, probs, None, calib, label=label, tau=tau)
    configs = all_spin_configs(len(next(iter(probs))))
    mat = np.stack([probs[c] for c in configs])
    sampled = np.zeros_like(mat)
    for i in range(times.size):
        p = np.clip(mat[:, i], 0.0, None)
        p = p / p.sum()
        rng = np.random.default_rng([seed, i])
        sampled[:, i] = rng.multinomial(shots, p) / shots
    pops = {c: sampled[k] for k, c in enumerate(configs)}
    return TimeScanData(
        times, pops, shots, calib, label=label, seed=seed, tau=tau
    )


def apply_decoherence(scan: TimeScanData, tau: float) -> TimeScanData:
    """Damp each curve's deviation from its infinite-time mean by e^{-t/tau}.

    The infinite-time mean of every joint-spin curve is 2^{-d} (each
    squared-cosine factor averages to 1/2), so the envelope preserves
    the per-time population sum.  This is a phenomenological model and
    is off unless requested.
    """
    if not tau > 0:
        raise ConfigError("decoherence time must be positive")
    pops = _decohere_probs(scan.populations, scan.times, tau)
    return TimeScanData(
        scan.times,
        pops,
        scan.shots,
        scan.calibration,
        label=scan.label,
        seed=scan.seed,
        tau=tau,
        metadata=dict(scan.metadata),
    )
