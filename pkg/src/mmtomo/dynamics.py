"""Pulse-level spin-boson dynamics and named preparation sequences.

Phase and angle conventions, fixed once for the whole package:

- Rotation angles theta are Bloch angles: a sideband pulse of angle
  theta rotates the n-th rung |down,n> <-> |up,n+1> by the amplitude
  angle g = sqrt(n+1)*theta/2, so theta = pi fully transfers the n = 0
  rung and theta = pi/2 splits it evenly.
- Blue sideband of phase phi: |down,n> -> cos(g)|down,n>
  + e^{i phi} sin(g)|up,n+1>.
- Red sideband of phase phi: |up,n> -> cos(g)|up,n>
  + e^{i phi} sin(g)|down,n+1>.  The control phase is defined so a pi
  pulse imprints exactly e^{i phi} on the added phonon; a two-pulse
  blue-then-red Bell sequence therefore lands on
  (|00> + e^{i(phi1+phi2)}|11>)/sqrt(2).
- Carrier R_C(theta, phi) rotates the spin about the equatorial axis at
  azimuth phi, signed so R_C(pi/2, 0)|down> is the +1 eigenstate of
  S(0) = i(sigma_+ - sigma_-).
- SpinDepDisplace applies D(alpha) on the +1 branch of
  S(phi_s) = i(sigma_+ e^{i phi_s} - sigma_- e^{-i phi_s}) and
  D(-alpha) on the -1 branch.  Realized as a simultaneous blue/red
  two-tone drive of duration t and motional phase phi_m, the applied
  amplitude is alpha = Omega*t*e^{i(phi_m - pi/2)}; the fixed -pi/2
  reference is part of the package's displacement-phase convention and
  is cross-checked by the integration path in `evolve`.

A hardware-style constant error on the spin phase of the two-tone drive
can be injected through ``RabiCalibration.spin_phase_offset``; the
drive then acts along S(phi_s - offset).  Everything else treats the
requested phases as exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, TruncationLeakError
from .fockspace import (
    LEAK_TOL,
    HilbertConfig,
    PureState,
    annihilation,
    displacement_matrix,
    vacuum_state,
)

# Bloch angle whose sideband pulse moves exactly 1/3 of the population
# up a rung: sin^2(theta/2) = 1/3.  Used as the first splitting pulse
# of the three-mode W sequence.
ONE_THIRD_TRANSFER_THETA = 2.0 * math.asin(1.0 / math.sqrt(3.0))


@dataclass(frozen=True)
class RabiCalibration:
    """Coupling rates of each (ion, mode) pair and each carrier.

    ``sideband_rabi[i, j]`` is the sideband Rabi frequency of ion i on
    mode j in rad/s; zero encodes "ion i does not couple to mode j" and
    driving such a pair is a configuration error.  ``spin_phase_offset``
    models a constant hardware offset on the spin phase of two-tone
    displacement drives (ideal hardware: 0).
    """

    sideband_rabi: np.ndarray
    carrier_rabi: np.ndarray
    spin_phase_offset: float = 0.0

    def __post_init__(self):
        sb = np.atleast_2d(np.asarray(self.sideband_rabi, dtype=float))
        car = np.atleast_1d(np.asarray(self.carrier_rabi, dtype=float))
        if sb.ndim != 2 or car.ndim != 1:
            raise ConfigError("sideband_rabi must be 2-D (ions x modes), carrier_rabi 1-D")
        if sb.shape[0] != car.size:
            raise ConfigError(
                f"{sb.shape[0]} ion rows in sideband_rabi but {car.size} carrier rates"
            )
        if not (np.all(np.isfinite(sb)) and np.all(np.isfinite(car))):
            raise ConfigError("Rabi frequencies must be finite")
        if np.any(sb < 0) or np.any(car < 0):
            raise ConfigError("Rabi frequencies must be non-negative")
        sb = sb.copy()
        car = car.copy()
        sb.setflags(write=False)
        car.setflags(write=False)
        object.__setattr__(self, "sideband_rabi", sb)
        object.__setattr__(self, "carrier_rabi", car)

    @property
    def num_ions(self) -> int:
        return self.sideband_rabi.shape[0]

    @property
    def num_modes(self) -> int:
        return self.sideband_rabi.shape[1]

    def sideband(self, ion: int, mode: int) -> float:
        if not (0 <= ion < self.num_ions and 0 <= mode < self.num_modes):
            raise ConfigError(
                f"(ion {ion}, mode {mode}) outside calibration table "
                f"{self.sideband_rabi.shape}"
            )
        rate = float(self.sideband_rabi[ion, mode])
        if rate == 0.0:
            raise ConfigError(f"ion {ion} does not couple to mode {mode} (rate 0)")
        return rate

    def carrier(self, ion: int) -> float:
        if not 0 <= ion < self.num_ions:
            raise ConfigError(f"ion {ion} outside calibration table")
        rate = float(self.carrier_rabi[ion])
        if rate == 0.0:
            raise ConfigError(f"ion {ion} has no carrier drive (rate 0)")
        return rate

    @classmethod
    def uniform(
        cls,
        num_ions: int,
        num_modes: int,
        sideband_rate: float = 2 * math.pi * 20e3,
        carrier_rate: float = 2 * math.pi * 100e3,
        spin_phase_offset: float = 0.0,
    ) -> "RabiCalibration":
        return cls(
            np.full((num_ions, num_modes), sideband_rate),
            np.full(num_ions, carrier_rate),
            spin_phase_offset,
        )

    @classmethod
    def distinct_modes(
        cls,
        num_ions: int,
        num_modes: int,
        base_rate: float = 2 * math.pi * 14e3,
        step_rate: float = 2 * math.pi * 3e3,
        carrier_rate: float = 2 * math.pi * 100e3,
        spin_phase_offset: float = 0.0,
    ) -> "RabiCalibration":
        """Per-mode staggered rates; distinct rates keep the joint
        time-scan fit full rank."""
        row = base_rate + step_rate * np.arange(num_modes)
        return cls(
            np.tile(row, (num_ions, 1)),
            np.full(num_ions, carrier_rate),
            spin_phase_offset,
        )


@dataclass(frozen=True)
class Carrier:
    """Spin rotation R_C(theta, phase) on one ion; motion untouched."""

    theta: float
    phase: float = 0.0
    ion: int = 0

    def __post_init__(self):
        if self.theta < 0:
            raise ConfigError(f"rotation angle must be >= 0, got {self.theta}")


@dataclass(frozen=True)
class BSB:
    """Blue-sideband pulse on one (ion, mode) pair: |down,n> <-> |up,n+1>."""

    mode: int
    theta: float
    phase: float = 0.0
    ion: int = 0

    def __post_init__(self):
        if self.theta < 0:
            raise ConfigError(f"rotation angle must be >= 0, got {self.theta}")


@dataclass(frozen=True)
class RSB:
    """Red-sideband pulse on one (ion, mode) pair: |up,n> <-> |down,n+1>."""

    mode: int
    theta: float
    phase: float = 0.0
    ion: int = 0

    def __post_init__(self):
        if self.theta < 0:
            raise ConfigError(f"rotation angle must be >= 0, got {self.theta}")


@dataclass(frozen=True)
class SpinDepDisplace:
    """Displace one mode by +-alpha conditioned on the S(spin_phase) eigenbasis."""

    mode: int
    alpha: complex
    spin_phase: float = 0.0
    ion: int = 0


PulseOp = Carrier | BSB | RSB | SpinDepDisplace


@dataclass(frozen=True)
class PulseSequence:
    """Ordered pulses on a spin-carrying product space.

    The initial state defaults to all spins down, all modes in vacuum.
    """

    ops: tuple[PulseOp, ...]
    config: HilbertConfig
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.config.num_spins < 1:
            raise ConfigError("pulse sequences need at least one spin in the config")


def _check_targets(cfg: HilbertConfig, ion: int, mode: int | None):
    if not 0 <= ion < cfg.num_spins:
        raise ConfigError(f"ion index {ion} out of range for {cfg.num_spins} spins")
    if mode is not None and not 0 <= mode < cfg.num_modes:
        raise ConfigError(f"mode index {mode} out of range for {cfg.num_modes} modes")


def _rung_angles(levels: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    g = np.sqrt(np.arange(1.0, levels)) * (theta / 2.0)
    return np.cos(g), np.sin(g)


def _with_front(shape_len, arr):
    """Reshape a 1-D coefficient array to broadcast over trailing axes."""
    return arr.reshape(arr.shape + (1,) * shape_len)


def _apply_carrier(tensor, ion_axis, theta, phase):
    t = np.moveaxis(tensor, ion_axis, 0)
    c = math.cos(theta / 2.0)
    s = math.sin(theta / 2.0)
    down = c * t[0] + 1j * np.exp(-1j * phase) * s * t[1]
    up = 1j * np.exp(1j * phase) * s * t[0] + c * t[1]
    out = np.stack([down, up])
    return np.moveaxis(out, 0, ion_axis)


def _apply_sideband(tensor, ion_axis, mode_axis, theta, phase, kind):
    t = np.moveaxis(tensor, (ion_axis, mode_axis), (0, 1))
    levels = t.shape[1]
    down, up = t[0], t[1]
    # the top rung's partner level lies outside the truncation; refuse
    # to evolve if that dark corner is populated
    dark = down[levels - 1] if kind == "bsb" else up[levels - 1]
    if float(np.sum(np.abs(dark) ** 2)) > LEAK_TOL:
        raise TruncationLeakError(
            "sideband drive reaches the top of the guard band; "
            "raise cutoff or guard_levels"
        )
    c, s = _rung_angles(levels, theta)
    c = _with_front(down.ndim - 1, c)
    s = _with_front(down.ndim - 1, s)
    ep = np.exp(1j * phase)
    new = t.copy()
    if kind == "bsb":
        lo, hi = down[: levels - 1], up[1:]
        new[0][: levels - 1] = c * lo - np.conj(ep) * s * hi
        new[1][1:] = ep * s * lo + c * hi
    else:
        lo, hi = up[: levels - 1], down[1:]
        new[1][: levels - 1] = c * lo - np.conj(ep) * s * hi
        new[0][1:] = ep * s * lo + c * hi
    return np.moveaxis(new, (0, 1), (ion_axis, mode_axis))


def _check_mode_top(tensor, mode_axis):
    top = np.take(tensor, -1, axis=mode_axis)
    pop = float(np.sum(np.abs(top) ** 2))
    if pop > LEAK_TOL:
        raise TruncationLeakError(
            f"displacement leaves {pop:.2e} population at the top guard level"
        )


def _apply_spin_dep_displace(tensor, ion_axis, mode_axis, alpha, phi_eff):
    t = np.moveaxis(tensor, (ion_axis, mode_axis), (0, 1))
    levels = t.shape[1]
    # project onto the S(phi_eff) eigenbasis: |+-> = (|down> +- i e^{i phi}|up>)/sqrt(2)
    ie = 1j * np.exp(-1j * phi_eff)
    plus = (t[0] - ie * t[1]) / math.sqrt(2.0)
    minus = (t[0] + ie * t[1]) / math.sqrt(2.0)
    dp = displacement_matrix(alpha, levels)
    dm = displacement_matrix(-alpha, levels)
    plus = np.tensordot(dp, plus, axes=(1, 0))
    minus = np.tensordot(dm, minus, axes=(1, 0))
    iep = 1j * np.exp(1j * phi_eff)
    out = np.stack(
        [(plus + minus) / math.sqrt(2.0), iep * (plus - minus) / math.sqrt(2.0)]
    )
    out = np.moveaxis(out, (0, 1), (ion_axis, mode_axis))
    _check_mode_top(out, mode_axis)
    return out


def _integrate_two_tone(tensor, ion_axis, mode_axis, alpha, phi_eff):
    """Cross-validation path: integrate the simultaneous blue/red drive.

    Builds the two-tone pair Hamiltonian (unit Rabi rate) with
    phi_b = phi_eff + phi_m and phi_r = phi_eff - phi_m, where
    phi_m = arg(alpha) + pi/2, and evolves for t = |alpha|.
    """
    t = np.moveaxis(tensor, (ion_axis, mode_axis), (0, 1))
    levels = t.shape[1]
    phi_m = np.angle(alpha) + math.pi / 2.0
    phi_b = phi_eff + phi_m
    phi_r = phi_eff - phi_m
    a = annihilation(levels)
    sp = np.array([[0.0, 0.0], [1.0, 0.0]])  # sigma_+ in the (down, up) basis
    sm = sp.T
    h = 1j * (
        np.exp(1j * phi_b) * np.kron(sp, a.conj().T)
        - np.exp(-1j * phi_b) * np.kron(sm, a)
        + np.exp(1j * phi_r) * np.kron(sp, a)
        - np.exp(-1j * phi_r) * np.kron(sm, a.conj().T)
    )
    w, v = np.linalg.eigh(h)
    u = (v * np.exp(-1j * w * abs(alpha))) @ v.conj().T
    rest = t.shape[2:]
    flat = t.reshape(2 * levels, -1)
    out = (u @ flat).reshape((2, levels) + rest)
    out = np.moveaxis(out, (0, 1), (ion_axis, mode_axis))
    _check_mode_top(out, mode_axis)
    return out


def evolve(
    state: PureState,
    op: PulseOp,
    calib: RabiCalibration,
    integrate_two_tone: bool = False,
) -> PureState:
    """Apply one pulse to a pure state and return the result.

    ``integrate_two_tone=True`` replaces the closed-form
    SpinDepDisplace action with direct integration of the simultaneous
    blue/red drive; the two agree to numerical precision and the flag
    exists to prove it.
    """
    cfg = state.config
    tensor = state.tensor().copy()
    ion_axis = op.ion
    if isinstance(op, Carrier):
        _check_targets(cfg, op.ion, None)
        calib.carrier(op.ion)
        tensor = _apply_carrier(tensor, ion_axis, op.theta, op.phase)
    elif isinstance(op, (BSB, RSB)):
        _check_targets(cfg, op.ion, op.mode)
        calib.sideband(op.ion, op.mode)
        mode_axis = cfg.num_spins + op.mode
        kind = "bsb" if isinstance(op, BSB) else "rsb"
        tensor = _apply_sideband(tensor, ion_axis, mode_axis, op.theta, op.phase, kind)
    elif isinstance(op, SpinDepDisplace):
        _check_targets(cfg, op.ion, op.mode)
        calib.sideband(op.ion, op.mode)
        mode_axis = cfg.num_spins + op.mode
        phi_eff = op.spin_phase - calib.spin_phase_offset
        apply = _integrate_two_tone if integrate_two_tone else _apply_spin_dep_displace
        tensor = apply(tensor, ion_axis, mode_axis, complex(op.alpha), phi_eff)
    else:
        raise ConfigError(f"unknown pulse op {op!r}")
    return PureState(tensor.reshape(-1), cfg)


def run_sequence(
    seq: PulseSequence,
    calib: RabiCalibration,
    initial: PureState | None = None,
) -> PureState:
    """Fold `evolve` over a pulse list, starting from all-down vacuum."""
    state = vacuum_state(seq.config) if initial is None else initial
    if state.config != seq.config:
        raise ConfigError("initial state config does not match the sequence config")
    for op in seq.ops:
        state = evolve(state, op, calib)
    return state


def _bell_00_11_ops(phi: float) -> tuple[PulseOp, ...]:
    return (BSB(mode=0, theta=math.pi / 2, phase=phi), RSB(mode=1, theta=math.pi))


def _bell_01_10_ops(phi: float) -> tuple[PulseOp, ...]:
    return (
        BSB(mode=0, theta=math.pi / 2, phase=phi),
        BSB(mode=1, theta=math.pi),
        Carrier(theta=math.pi),
    )


def _coherent_product_ops(alpha1: complex, alpha2: complex) -> tuple[PulseOp, ...]:
    return (
        Carrier(theta=math.pi / 2, phase=0.0),
        SpinDepDisplace(mode=0, alpha=alpha1),
        SpinDepDisplace(mode=1, alpha=alpha2),
        Carrier(theta=math.pi / 2, phase=math.pi),  # undoes the first rotation
    )


def _w_state_ops(phi1: float, phi2: float, phi3: float) -> tuple[PulseOp, ...]:
    return (
        BSB(mode=0, theta=ONE_THIRD_TRANSFER_THETA, phase=phi1),
        BSB(mode=1, theta=math.pi / 2, phase=phi2),
        BSB(mode=2, theta=math.pi, phase=phi3),
        Carrier(theta=math.pi),
    )


_NAMED_STATES = {
    # name: (num_modes, default cutoff, ops builder)
    "bell_00_11": (2, 3, _bell_00_11_ops),
    "bell_01_10": (2, 3, _bell_01_10_ops),
    "coherent_product": (2, 7, _coherent_product_ops),
    "w_state": (3, 2, _w_state_ops),
}


def named_sequence(
    name: str, config: HilbertConfig | None = None, **params
) -> PulseSequence:
    """Build one of the canned preparation sequences.

    bell_00_11(phi=0): (|00> + e^{i phi}|11>)/sqrt(2)
    bell_01_10(phi=0): (|01> + e^{i phi}|10>)/sqrt(2)
    coherent_product(alpha1, alpha2): |alpha1>|alpha2>
    w_state(phi1=0, phi2=0, phi3=0):
        (e^{i phi1}|100> + e^{i phi2}|010> + e^{i phi3}|001>)/sqrt(3)

    All sequences drive a single ion (index 0) and end with every spin
    back in |down>.
    """
    if name not in _NAMED_STATES:
        raise ConfigError(
            f"unknown state name {name!r}; known: {sorted(_NAMED_STATES)}"
        )
    num_modes, default_cutoff, builder = _NAMED_STATES[name]
    if config is None:
        config = HilbertConfig(num_modes=num_modes, cutoff=default_cutoff, num_spins=1)
    if config.num_modes != num_modes:
        raise ConfigError(f"{name} needs {num_modes} modes, config has {config.num_modes}")
    if config.num_spins < 1:
        raise ConfigError("preparation needs a spin in the config")
    if name == "bell_00_11" or name == "bell_01_10":
        ops = builder(float(params.pop("phi", 0.0)))
    elif name == "coherent_product":
        try:
            alpha1 = params.pop("alpha1")
            alpha2 = params.pop("alpha2")
        except KeyError as exc:
            raise ConfigError("coherent_product needs alpha1 and alpha2") from exc
        ops = builder(complex(alpha1), complex(alpha2))
    else:
        ops = builder(
            float(params.pop("phi1", 0.0)),
            float(params.pop("phi2", 0.0)),
            float(params.pop("phi3", 0.0)),
        )
    if params:
        raise ConfigError(f"unknown parameters for {name}: {sorted(params)}")
    return PulseSequence(ops, config, label=name)


def prepare_named_state(
    name: str,
    calib: RabiCalibration | None = None,
    config: HilbertConfig | None = None,
    **params,
) -> PureState:
    """Run a named preparation sequence from vacuum; spins end in |down>."""
    seq = named_sequence(name, config, **params)
    if calib is None:
        calib = RabiCalibration.uniform(seq.config.num_spins, seq.config.num_modes)
    return run_sequence(seq, calib)
