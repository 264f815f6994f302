"""Pipeline orchestration: configuration files, dataset schemas, and plot data.

Every structured artifact is JSON with a ``"schema": "mmtomo/1"`` field
and a ``"kind"`` tag; complex numbers are ``{"re": x, "im": y}``
objects.  Each command also mirrors its result as CSV for plotting.
Commands are deterministic given (config, seed): re-runs write
byte-identical files.

Subcommands:

* ``simulate``    prepare a state and write a sampled time scan
* ``fit``         fit Fock populations from one or more scan files
* ``reconstruct`` build (or load) a displaced-population manifest and
                  invert it to a density matrix
* ``verify``      run the two-sideband parity phase scan
* ``calibrate``   recover a spin-phase offset from a push-phase scan

Exit codes: 0 success, 2 configuration or schema error, 3 numerical
failure.  ``MMTOMO_THREADS`` caps BLAS parallelism (0 = automatic); it
is applied before the numerics load when the ``mmtomo`` script starts.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (
    BSB,
    RSB,
    Carrier,
    PulseSequence,
    RabiCalibration,
    SpinDepDisplace,
    named_sequence,
    prepare_named_state,
    run_sequence,
)
from .exceptions import ConfigError, NumericalError
from .fitting import (
    FockDistribution,
    fit_fock_distribution,
    fit_fock_distribution_restricted,
)
from .fockspace import DensityMatrix, HilbertConfig, displaced_density, motional_density
from .measurement import (
    TimeScanData,
    all_spin_configs,
    default_time_grid,
    sample_scan,
)
from .reconstruction import (
    DisplacementGrid,
    QDataset,
    ReconstructedState,
    exact_qdataset,
    reconstruct,
)
from .verification import (
    PhaseScanResult,
    SpinPhaseCalibration,
    calibrate_spin_phase,
    parity_phase_scan,
)

__all__ = [
    "SCHEMA_VERSION",
    "PipelineConfig",
    "load_config",
    "main",
    "scan_to_dict",
    "scan_from_dict",
    "distribution_to_dict",
    "distribution_from_dict",
    "qmanifest_to_dict",
    "qmanifest_from_dict",
    "reconstruction_to_dict",
    "reconstruction_from_dict",
    "phase_scan_to_dict",
    "phase_scan_from_dict",
    "spin_calibration_to_dict",
    "spin_calibration_from_dict",
]

SCHEMA_VERSION = "mmtomo/1"


# ---------------------------------------------------------------------------
# JSON primitives

def _complex_out(z: complex) -> dict:
    z = complex(z)
    return {"re": float(z.real), "im": float(z.imag)}


def _complex_in(obj) -> complex:
    if not (isinstance(obj, dict) and set(obj) == {"re", "im"}):
        raise ConfigError(f"complex values must be {{'re', 'im'}} objects, got {obj!r}")
    return complex(float(obj["re"]), float(obj["im"]))


def _cmatrix_out(matrix: np.ndarray) -> list:
    return [[_complex_out(z) for z in row] for row in np.asarray(matrix, dtype=complex)]


def _cmatrix_in(rows) -> np.ndarray:
    return np.array([[_complex_in(z) for z in row] for row in rows], dtype=complex)


def _json_safe(obj):
    """Recursively convert numpy and tuple values to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.complexfloating, complex)):
        return _complex_out(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _require_mapping(obj, context: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object, got {type(obj).__name__}")
    return obj


def _check_keys(d: dict, allowed, context: str):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {unknown}")


def _require(d: dict, keys, context: str):
    missing = sorted(set(keys) - set(d))
    if missing:
        raise ConfigError(f"{context} is missing required keys: {missing}")


def _check_header(d: dict, kind: str, context: str):
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"{context} must declare schema {SCHEMA_VERSION!r}, got {d.get('schema')!r}"
        )
    if d.get("kind") != kind:
        raise ConfigError(f"{context} has kind {d.get('kind')!r}, expected {kind!r}")


# ---------------------------------------------------------------------------
# Artifact encoders / decoders

def _calibration_out(calib: RabiCalibration) -> dict:
    return {
        "sideband_rabi": np.asarray(calib.sideband_rabi, dtype=float).tolist(),
        "carrier_rabi": np.asarray(calib.carrier_rabi, dtype=float).tolist(),
        "spin_phase_offset": float(calib.spin_phase_offset),
    }


def _calibration_in(d) -> RabiCalibration:
    d = _require_mapping(d, "calibration table")
    _check_keys(d, ["sideband_rabi", "carrier_rabi", "spin_phase_offset"], "calibration table")
    return RabiCalibration(
        np.asarray(d["sideband_rabi"], dtype=float),
        np.asarray(d["carrier_rabi"], dtype=float),
        float(d.get("spin_phase_offset", 0.0)),
    )


def scan_to_dict(scan: TimeScanData) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "time_scan",
        "label": scan.label,
        "times": scan.times.tolist(),
        "populations": {k: v.tolist() for k, v in sorted(scan.populations.items())},
        "shots": None if scan.shots is None else int(scan.shots),
        "seed": None if scan.seed is None else int(scan.seed),
        "tau": None if scan.tau is None else float(scan.tau),
        "calibration": _calibration_out(scan.calibration),
        "metadata": _json_safe(scan.metadata),
    }


def scan_from_dict(d: dict) -> TimeScanData:
    d = _require_mapping(d, "scan file")
    _check_header(d, "time_scan", "scan file")
    _check_keys(
        d,
        ["schema", "kind", "label", "times", "populations", "shots", "seed", "tau",
         "calibration", "metadata"],
        "scan file",
    )
    if "calibration" not in d:
        raise ConfigError("scan file has no calibration table")
    _require(d, ["times", "populations"], "scan file")
    pops = _require_mapping(d.get("populations"), "scan populations")
    return TimeScanData(
        times=np.asarray(d["times"], dtype=float),
        populations={str(k): np.asarray(v, dtype=float) for k, v in pops.items()},
        shots=None if d.get("shots") is None else int(d["shots"]),
        calibration=_calibration_in(d["calibration"]),
        label=str(d.get("label", "")),
        seed=None if d.get("seed") is None else int(d["seed"]),
        tau=None if d.get("tau") is None else float(d["tau"]),
        metadata=dict(d.get("metadata", {})),
    )


def distribution_to_dict(dist: FockDistribution) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "fock_distribution",
        "k_max": int(dist.k_max),
        "num_modes": int(dist.num_modes),
        "populations": dist.populations.tolist(),
        "covariance": dist.covariance.tolist(),
        "basis": [list(b) for b in dist.basis],
        "residual": float(dist.residual),
        "metadata": _json_safe(dist.metadata),
    }


def distribution_from_dict(d: dict) -> FockDistribution:
    d = _require_mapping(d, "distribution file")
    _check_header(d, "fock_distribution", "distribution file")
    _check_keys(
        d,
        ["schema", "kind", "k_max", "num_modes", "populations", "covariance", "basis",
         "residual", "metadata"],
        "distribution file",
    )
    _require(d, ["k_max", "populations", "covariance", "basis"], "distribution file")
    pops = np.asarray(d["populations"], dtype=float)
    if pops.ndim != int(d.get("num_modes", pops.ndim)):
        raise ConfigError(
            f"population tensor has {pops.ndim} axes, file claims {d['num_modes']} modes"
        )
    return FockDistribution(
        populations=pops,
        covariance=np.asarray(d["covariance"], dtype=float),
        k_max=int(d["k_max"]),
        basis=tuple(tuple(int(k) for k in b) for b in d["basis"]),
        residual=float(d.get("residual", 0.0)),
        metadata=dict(d.get("metadata", {})),
    )


def qmanifest_to_dict(qdata: QDataset) -> dict:
    grid = qdata.grid
    points = []
    for point in sorted(qdata.distributions):
        points.append(
            {
                "point": list(point),
                "distribution": distribution_to_dict(qdata.distributions[point]),
            }
        )
    return {
        "schema": SCHEMA_VERSION,
        "kind": "q_manifest",
        "grid": {
            "magnitudes": np.asarray(grid.magnitudes, dtype=float).tolist(),
            "n_max": int(grid.n_max),
            "phase_offsets": np.asarray(grid.phase_offsets, dtype=float).tolist(),
        },
        "points": points,
    }


def qmanifest_from_dict(d: dict) -> QDataset:
    d = _require_mapping(d, "q manifest")
    _check_header(d, "q_manifest", "q manifest")
    _check_keys(d, ["schema", "kind", "grid", "points"], "q manifest")
    _require(d, ["grid", "points"], "q manifest")
    gspec = _require_mapping(d.get("grid"), "q manifest grid")
    _check_keys(gspec, ["magnitudes", "n_max", "phase_offsets"], "q manifest grid")
    _require(gspec, ["magnitudes", "n_max"], "q manifest grid")
    grid = DisplacementGrid(
        magnitudes=tuple(float(m) for m in gspec["magnitudes"]),
        n_max=int(gspec["n_max"]),
        phase_offsets=None
        if gspec.get("phase_offsets") is None
        else tuple(float(p) for p in gspec["phase_offsets"]),
    )
    distributions = {}
    for entry in d.get("points", []):
        entry = _require_mapping(entry, "q manifest point")
        _check_keys(entry, ["point", "distribution"], "q manifest point")
        _require(entry, ["point", "distribution"], "q manifest point")
        point = tuple(int(p) for p in entry["point"])
        distributions[point] = distribution_from_dict(entry["distribution"])
    return QDataset(distributions, grid)


def _condition_numbers_out(metadata: dict) -> dict:
    out = dict(metadata)
    conds = out.get("condition_numbers")
    if isinstance(conds, dict):
        out["condition_numbers"] = [
            {"offset": list(l), "condition": float(c)} for l, c in sorted(conds.items())
        ]
    return out


def _condition_numbers_in(metadata: dict) -> dict:
    out = dict(metadata)
    conds = out.get("condition_numbers")
    if isinstance(conds, list):
        out["condition_numbers"] = {
            tuple(int(i) for i in item["offset"]): float(item["condition"])
            for item in conds
        }
    return out


def reconstruction_to_dict(result: ReconstructedState) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "reconstruction",
        "rho_raw": _cmatrix_out(result.rho_raw),
        "rho_psd": _cmatrix_out(result.rho_psd.entries),
        "covariance": np.asarray(result.covariance, dtype=float).tolist(),
        "fidelity": None if result.fidelity is None else float(result.fidelity),
        "diagnostics": _json_safe(result.diagnostics),
        "metadata": _json_safe(_condition_numbers_out(result.metadata)),
    }


def reconstruction_from_dict(d: dict) -> ReconstructedState:
    d = _require_mapping(d, "reconstruction file")
    _check_header(d, "reconstruction", "reconstruction file")
    _check_keys(
        d,
        ["schema", "kind", "rho_raw", "rho_psd", "covariance", "fidelity",
         "diagnostics", "metadata"],
        "reconstruction file",
    )
    _require(d, ["rho_raw", "rho_psd", "covariance"], "reconstruction file")
    metadata = _condition_numbers_in(dict(d.get("metadata", {})))
    psd_entries = _cmatrix_in(d["rho_psd"])
    if "n_max" in metadata and "magnitudes" in metadata:
        psd_config = HilbertConfig(
            num_modes=len(metadata["magnitudes"]),
            cutoff=int(metadata["n_max"]),
            num_spins=0,
            guard_levels=0,
        )
    else:
        psd_config = HilbertConfig(
            num_modes=1, cutoff=psd_entries.shape[0] - 1, num_spins=0, guard_levels=0
        )
    return ReconstructedState(
        rho_raw=_cmatrix_in(d["rho_raw"]),
        rho_psd=DensityMatrix(psd_entries, psd_config),
        covariance=np.asarray(d["covariance"], dtype=float),
        fidelity=None if d.get("fidelity") is None else float(d["fidelity"]),
        diagnostics=dict(d.get("diagnostics", {})),
        metadata=metadata,
    )


def phase_scan_to_dict(result: PhaseScanResult) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "phase_scan",
        "pair": list(result.pair),
        "phi1": np.asarray(result.phi1, dtype=float).tolist(),
        "phi2": np.asarray(result.phi2, dtype=float).tolist(),
        "p_down": np.asarray(result.p_down, dtype=float).tolist(),
        "offset": float(result.offset),
        "amplitude": float(result.amplitude),
        "amplitude_sigma": float(result.amplitude_sigma),
        "phase": float(result.phase),
        "residual": float(result.residual),
        "shots": None if result.shots is None else int(result.shots),
        "metadata": _json_safe(result.metadata),
    }


def phase_scan_from_dict(d: dict) -> PhaseScanResult:
    d = _require_mapping(d, "phase scan file")
    _check_header(d, "phase_scan", "phase scan file")
    _check_keys(
        d,
        ["schema", "kind", "pair", "phi1", "phi2", "p_down", "offset", "amplitude",
         "amplitude_sigma", "phase", "residual", "shots", "metadata"],
        "phase scan file",
    )
    _require(
        d,
        ["pair", "phi1", "phi2", "p_down", "offset", "amplitude", "amplitude_sigma",
         "phase", "residual"],
        "phase scan file",
    )
    return PhaseScanResult(
        pair=tuple(int(i) for i in d["pair"]),
        phi1=np.asarray(d["phi1"], dtype=float),
        phi2=np.asarray(d["phi2"], dtype=float),
        p_down=np.asarray(d["p_down"], dtype=float),
        offset=float(d["offset"]),
        amplitude=float(d["amplitude"]),
        amplitude_sigma=float(d["amplitude_sigma"]),
        phase=float(d["phase"]),
        residual=float(d["residual"]),
        shots=None if d.get("shots") is None else int(d["shots"]),
        metadata=dict(d.get("metadata", {})),
    )


def spin_calibration_to_dict(result: SpinPhaseCalibration) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "spin_calibration",
        "phi_b": np.asarray(result.phi_b, dtype=float).tolist(),
        "p_down": np.asarray(result.p_down, dtype=float).tolist(),
        "estimate": float(result.estimate),
        "contrast": float(result.contrast),
        "shots": None if result.shots is None else int(result.shots),
        "metadata": _json_safe(result.metadata),
    }


def spin_calibration_from_dict(d: dict) -> SpinPhaseCalibration:
    d = _require_mapping(d, "calibration scan file")
    _check_header(d, "spin_calibration", "calibration scan file")
    _check_keys(
        d,
        ["schema", "kind", "phi_b", "p_down", "estimate", "contrast", "shots", "metadata"],
        "calibration scan file",
    )
    _require(d, ["phi_b", "p_down", "estimate", "contrast"], "calibration scan file")
    return SpinPhaseCalibration(
        phi_b=np.asarray(d["phi_b"], dtype=float),
        p_down=np.asarray(d["p_down"], dtype=float),
        estimate=float(d["estimate"]),
        contrast=float(d["contrast"]),
        shots=None if d.get("shots") is None else int(d["shots"]),
        metadata=dict(d.get("metadata", {})),
    )


# ---------------------------------------------------------------------------
# File IO

def _write_json(path: Path, payload: dict) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return _require_mapping(data, str(path))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def _scan_csv(path: Path, scan: TimeScanData) -> Path:
    configs = all_spin_configs(scan.num_ions)
    header = ["time"] + [f"p_{c}" for c in configs]
    rows = []
    for i, t in enumerate(scan.times):
        rows.append([float(t)] + [float(scan.populations[c][i]) for c in configs])
    return _write_csv(path, header, rows)


def _distribution_csv(path: Path, dist: FockDistribution) -> Path:
    d = dist.num_modes
    header = [f"k_{j}" for j in range(d)] + ["population", "sigma"]
    sig = dist.sigmas()
    rows = []
    for idx in np.ndindex(dist.populations.shape):
        rows.append(list(idx) + [float(dist.populations[idx]), float(sig[idx])])
    return _write_csv(path, header, rows)


def _elements_csv(path: Path, result: ReconstructedState) -> Path:
    n_max = int(result.metadata["n_max"])
    num_modes = len(result.metadata["magnitudes"])
    shape = (n_max + 1,) * num_modes
    labels = ["-".join(str(k) for k in idx) for idx in np.ndindex(shape)]
    sig_re = result.sigma_real()
    sig_im = result.sigma_imag()
    psd = result.rho_psd.entries
    header = ["bra", "ket", "real", "imag", "sigma_real", "sigma_imag",
              "real_psd", "imag_psd"]
    rows = []
    dim = len(labels)
    for r in range(dim):
        for c in range(dim):
            rows.append(
                [
                    labels[r],
                    labels[c],
                    float(result.rho_raw[r, c].real),
                    float(result.rho_raw[r, c].imag),
                    float(sig_re[r, c]),
                    float(sig_im[r, c]),
                    float(psd[r, c].real),
                    float(psd[r, c].imag),
                ]
            )
    return _write_csv(path, header, rows)


def _phase_scan_csv(path: Path, result: PhaseScanResult) -> Path:
    rows = []
    for a, f1 in enumerate(result.phi1):
        for b, f2 in enumerate(result.phi2):
            rows.append([float(f1), float(f2), float(result.p_down[a, b])])
    return _write_csv(path, ["phi1", "phi2", "p_down"], rows)


def _spin_calibration_csv(path: Path, result: SpinPhaseCalibration) -> Path:
    rows = [[float(b), float(p)] for b, p in zip(result.phi_b, result.p_down)]
    return _write_csv(path, ["phi_b", "p_down"], rows)


# ---------------------------------------------------------------------------
# Pipeline configuration

@dataclass(frozen=True)
class PipelineConfig:
    """Parsed experiment configuration; sections beyond the name are optional."""

    experiment: str
    hilbert: HilbertConfig | None
    calibration_spec: dict | None
    state_spec: dict | None
    scan_spec: dict
    fit_spec: dict
    recon_spec: dict | None
    verify_spec: dict
    calibrate_spec: dict
    out_dir: Path
    out_format: str


_TOP_KEYS = [
    "schema", "experiment", "hilbert", "calibration", "state", "scan", "fit",
    "reconstruction", "verify", "calibrate", "output",
]


def load_config(path) -> PipelineConfig:
    """Parse and validate a pipeline configuration file."""
    raw = _load_json(path)
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"config must declare schema {SCHEMA_VERSION!r}, got {raw.get('schema')!r}"
        )
    _check_keys(raw, _TOP_KEYS, "config")
    experiment = raw.get("experiment")
    if not isinstance(experiment, str) or not experiment:
        raise ConfigError("config needs a non-empty experiment name")
    if not all(ch.isalnum() or ch in "_-" for ch in experiment):
        raise ConfigError(
            f"experiment name {experiment!r} may only use letters, digits, '_' and '-'"
        )

    hilbert = None
    if "hilbert" in raw:
        spec = _require_mapping(raw["hilbert"], "hilbert section")
        _check_keys(spec, ["num_modes", "cutoff", "num_spins", "guard_levels"], "hilbert section")
        if "num_modes" not in spec or "cutoff" not in spec:
            raise ConfigError("hilbert section needs num_modes and cutoff")
        hilbert = HilbertConfig(**spec)

    calibration_spec = None
    if "calibration" in raw:
        calibration_spec = _require_mapping(raw["calibration"], "calibration section")

    state_spec = None
    if "state" in raw:
        state_spec = _require_mapping(raw["state"], "state section")

    scan_spec = _require_mapping(raw.get("scan", {}), "scan section")
    _check_keys(
        scan_spec,
        ["times", "num_points", "cycles", "shots", "seed", "tau", "readout_error"],
        "scan section",
    )
    if "times" in scan_spec and ("num_points" in scan_spec or "cycles" in scan_spec):
        raise ConfigError("scan section: give either an explicit times list or num_points/cycles")

    fit_spec = _require_mapping(raw.get("fit", {}), "fit section")
    _check_keys(
        fit_spec,
        ["k_max", "nonneg", "simplex", "all_down_only", "basis", "envelope_tau",
         "bootstrap_replicates", "seed"],
        "fit section",
    )

    recon_spec = None
    if "reconstruction" in raw:
        recon_spec = _require_mapping(raw["reconstruction"], "reconstruction section")
        _check_keys(
            recon_spec,
            ["n_max", "k_max", "magnitudes", "phase_offsets", "shots", "seed",
             "num_points", "cycles", "target"],
            "reconstruction section",
        )
        for key in ("n_max", "k_max", "magnitudes"):
            if key not in recon_spec:
                raise ConfigError(f"reconstruction section needs {key}")
        if int(recon_spec["k_max"]) < int(recon_spec["n_max"]):
            raise ConfigError(
                f"reconstruction needs k_max >= n_max, got k_max={recon_spec['k_max']} "
                f"and n_max={recon_spec['n_max']}"
            )

    verify_spec = _require_mapping(raw.get("verify", {}), "verify section")
    _check_keys(verify_spec, ["pair", "phi1_points", "phi2_points", "shots", "seed"], "verify section")

    calibrate_spec = _require_mapping(raw.get("calibrate", {}), "calibrate section")
    _check_keys(calibrate_spec, ["offset", "points", "shots", "seed", "alpha"], "calibrate section")

    output = _require_mapping(raw.get("output", {}), "output section")
    _check_keys(output, ["dir", "format"], "output section")
    out_format = str(output.get("format", "both"))
    if out_format not in ("json", "csv", "both"):
        raise ConfigError(f"output format must be json, csv or both, got {out_format!r}")

    return PipelineConfig(
        experiment=experiment,
        hilbert=hilbert,
        calibration_spec=calibration_spec,
        state_spec=state_spec,
        scan_spec=scan_spec,
        fit_spec=fit_spec,
        recon_spec=recon_spec,
        verify_spec=verify_spec,
        calibrate_spec=calibrate_spec,
        out_dir=Path(str(output.get("dir", "out"))),
        out_format=out_format,
    )


def _maybe_complex(value):
    if isinstance(value, dict):
        return _complex_in(value)
    return value


def _build_calibration(spec: dict | None, num_ions: int, num_modes: int) -> RabiCalibration:
    if spec is None:
        return RabiCalibration.distinct_modes(num_ions, num_modes)
    kind = str(spec.get("kind", "uniform"))
    rest = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "uniform":
        _check_keys(rest, ["sideband_rate", "carrier_rate", "spin_phase_offset"], "calibration")
        return RabiCalibration.uniform(num_ions, num_modes, **rest)
    if kind == "distinct_modes":
        _check_keys(
            rest, ["base_rate", "step_rate", "carrier_rate", "spin_phase_offset"], "calibration"
        )
        return RabiCalibration.distinct_modes(num_ions, num_modes, **rest)
    if kind == "explicit":
        _check_keys(rest, ["sideband_rabi", "carrier_rabi", "spin_phase_offset"], "calibration")
        if "sideband_rabi" not in rest or "carrier_rabi" not in rest:
            raise ConfigError("explicit calibration needs sideband_rabi and carrier_rabi")
        return RabiCalibration(
            np.asarray(rest["sideband_rabi"], dtype=float),
            np.asarray(rest["carrier_rabi"], dtype=float),
            float(rest.get("spin_phase_offset", 0.0)),
        )
    raise ConfigError(f"unknown calibration kind {kind!r}")


_OP_BUILDERS = {
    "carrier": (Carrier, ["theta", "phase", "ion"]),
    "bsb": (BSB, ["mode", "theta", "phase", "ion"]),
    "rsb": (RSB, ["mode", "theta", "phase", "ion"]),
    "displace": (SpinDepDisplace, ["mode", "alpha", "spin_phase", "ion"]),
}


def _build_op(spec):
    spec = _require_mapping(spec, "pulse op")
    name = spec.get("op")
    if name not in _OP_BUILDERS:
        raise ConfigError(f"unknown pulse op {name!r}; known: {sorted(_OP_BUILDERS)}")
    cls, fields = _OP_BUILDERS[name]
    _check_keys(spec, ["op"] + fields, f"{name} op")
    kwargs = {k: _maybe_complex(v) for k, v in spec.items() if k != "op"}
    return cls(**kwargs)


def _build_state(cfg: PipelineConfig):
    """Prepare the configured state; returns (state, calibration)."""
    spec = cfg.state_spec
    if spec is None:
        raise ConfigError("config has no state section")
    if "named" in spec:
        _check_keys(spec, ["named", "params"], "state section")
        params = {
            k: _maybe_complex(v)
            for k, v in _require_mapping(spec.get("params", {}), "state params").items()
        }
        seq = named_sequence(str(spec["named"]), cfg.hilbert, **params)
    elif "ops" in spec:
        _check_keys(spec, ["ops", "label"], "state section")
        if cfg.hilbert is None:
            raise ConfigError("explicit pulse sequences need a hilbert section")
        ops = tuple(_build_op(o) for o in spec["ops"])
        seq = PulseSequence(ops, cfg.hilbert, label=str(spec.get("label", "custom")))
    else:
        raise ConfigError("state section needs either 'named' or 'ops'")
    num_modes = seq.config.num_modes
    calib = _build_calibration(
        cfg.calibration_spec, max(seq.config.num_spins, num_modes), num_modes
    )
    return run_sequence(seq, calib), calib


def _resolve_seed(spec: dict, override: int | None, default: int = 0) -> int:
    if override is not None:
        return int(override)
    return int(spec.get("seed", default))


def _scan_times(spec: dict, calib: RabiCalibration) -> np.ndarray:
    if "times" in spec:
        return np.asarray(spec["times"], dtype=float)
    return default_time_grid(
        calib, int(spec.get("num_points", 60)), float(spec.get("cycles", 1.0))
    )


# ---------------------------------------------------------------------------
# Commands

def cmd_simulate(cfg: PipelineConfig, out_dir: Path, fmt: str, seed: int | None) -> list[Path]:
    state, calib = _build_state(cfg)
    spec = cfg.scan_spec
    times = _scan_times(spec, calib)
    scan = sample_scan(
        state,
        calib,
        times,
        shots=None if spec.get("shots") is None else int(spec["shots"]),
        seed=_resolve_seed(spec, seed),
        tau=None if spec.get("tau") is None else float(spec["tau"]),
        readout_error=float(spec.get("readout_error", 0.0)),
        label=cfg.experiment,
    )
    written = []
    if fmt in ("json", "both"):
        written.append(_write_json(out_dir / f"{cfg.experiment}_scan.json", scan_to_dict(scan)))
    if fmt in ("csv", "both"):
        written.append(_scan_csv(out_dir / f"{cfg.experiment}_scan.csv", scan))
    return written


def _merge_scans(scans: list[TimeScanData]) -> TimeScanData:
    if len(scans) == 1:
        return scans[0]
    first = scans[0]
    for other in scans[1:]:
        if set(other.populations) != set(first.populations):
            raise ConfigError("scan files cover different spin configurations")
        if other.shots != first.shots:
            raise ConfigError("scan files disagree on shots")
        if other.tau != first.tau:
            raise ConfigError("scan files disagree on the decoherence time")
        same_calib = (
            np.array_equal(other.calibration.sideband_rabi, first.calibration.sideband_rabi)
            and np.array_equal(other.calibration.carrier_rabi, first.calibration.carrier_rabi)
            and other.calibration.spin_phase_offset == first.calibration.spin_phase_offset
        )
        if not same_calib:
            raise ConfigError("scan files disagree on the calibration table")
    times = np.concatenate([s.times for s in scans])
    pops = {
        key: np.concatenate([s.populations[key] for s in scans])
        for key in first.populations
    }
    return TimeScanData(
        times=times,
        populations=pops,
        shots=first.shots,
        calibration=first.calibration,
        label="+".join(s.label for s in scans if s.label),
        tau=first.tau,
        metadata={"merged_from": len(scans)},
    )


def cmd_fit(cfg: PipelineConfig, scan_paths, out_dir: Path, fmt: str, seed: int | None) -> list[Path]:
    if not scan_paths:
        raise ConfigError("fit needs at least one --scan file")
    scan = _merge_scans([scan_from_dict(_load_json(p)) for p in scan_paths])
    spec = cfg.fit_spec
    if "k_max" not in spec:
        raise ConfigError("fit section needs k_max")
    options = {
        "all_down_only": bool(spec.get("all_down_only", False)),
        "nonneg": bool(spec.get("nonneg", False)),
        "simplex": bool(spec.get("simplex", False)),
        "envelope_tau": None if spec.get("envelope_tau") is None else float(spec["envelope_tau"]),
        "bootstrap_replicates": int(spec.get("bootstrap_replicates", 200)),
        "seed": _resolve_seed(spec, seed),
    }
    if spec.get("basis") is not None:
        dist = fit_fock_distribution_restricted(
            scan, spec["basis"], k_max=int(spec["k_max"]), **options
        )
    else:
        dist = fit_fock_distribution(scan, int(spec["k_max"]), **options)
    written = []
    if fmt in ("json", "both"):
        written.append(
            _write_json(out_dir / f"{cfg.experiment}_distribution.json", distribution_to_dict(dist))
        )
    if fmt in ("csv", "both"):
        written.append(_distribution_csv(out_dir / f"{cfg.experiment}_distribution.csv", dist))
    return written


def _simulate_qdataset(cfg: PipelineConfig, grid: DisplacementGrid, seed: int | None) -> QDataset:
    spec = cfg.recon_spec
    state, calib = _build_state(cfg)
    rho = motional_density(state)
    k_max = int(spec["k_max"])
    if spec.get("shots") is None:
        return exact_qdataset(rho, grid, k_max)
    shots = int(spec["shots"])
    base_seed = _resolve_seed(spec, seed)
    times = default_time_grid(
        calib, int(spec.get("num_points", 24)), float(spec.get("cycles", 1.0))
    )
    distributions = {}
    for index, point in enumerate(grid.points()):
        displaced = displaced_density(rho, grid.alphas(point))
        scan = sample_scan(
            displaced, calib, times, shots=shots, seed=base_seed * 100003 + index
        )
        distributions[point] = fit_fock_distribution(scan, k_max)
    return QDataset(distributions, grid)


def _build_target(spec):
    if spec is None:
        return None
    spec = _require_mapping(spec, "reconstruction target")
    _check_keys(spec, ["named", "params"], "reconstruction target")
    if "named" not in spec:
        raise ConfigError("reconstruction target needs a named state")
    params = {
        k: _maybe_complex(v)
        for k, v in _require_mapping(spec.get("params", {}), "target params").items()
    }
    return prepare_named_state(str(spec["named"]), **params)


def cmd_reconstruct(
    cfg: PipelineConfig, manifest_path, out_dir: Path, fmt: str, seed: int | None
) -> list[Path]:
    spec = cfg.recon_spec
    if spec is None:
        raise ConfigError("config has no reconstruction section")
    written = []
    if manifest_path is not None:
        qdata = qmanifest_from_dict(_load_json(manifest_path))
    else:
        grid = DisplacementGrid(
            magnitudes=tuple(float(m) for m in spec["magnitudes"]),
            n_max=int(spec["n_max"]),
            phase_offsets=None
            if spec.get("phase_offsets") is None
            else tuple(float(p) for p in spec["phase_offsets"]),
        )
        qdata = _simulate_qdataset(cfg, grid, seed)
        if fmt in ("json", "both"):
            written.append(
                _write_json(out_dir / f"{cfg.experiment}_qdata.json", qmanifest_to_dict(qdata))
            )
    target = _build_target(spec.get("target"))
    result = reconstruct(qdata, target=target)
    if fmt in ("json", "both"):
        written.append(
            _write_json(
                out_dir / f"{cfg.experiment}_reconstruction.json",
                reconstruction_to_dict(result),
            )
        )
    if fmt in ("csv", "both"):
        written.append(_elements_csv(out_dir / f"{cfg.experiment}_elements.csv", result))
    if result.fidelity is not None:
        print(f"fidelity (raw) = {result.fidelity:.6f}")
    print(f"trace distance raw->psd = {result.diagnostics['trace_distance']:.6f}")
    return written


def cmd_verify(cfg: PipelineConfig, out_dir: Path, fmt: str, seed: int | None) -> list[Path]:
    state, _ = _build_state(cfg)
    spec = cfg.verify_spec
    pair = tuple(int(i) for i in spec.get("pair", (0, 1)))

    def grid_of(count_key):
        points = int(spec.get(count_key, 8))
        if points < 1:
            raise ConfigError(f"{count_key} must be >= 1")
        return np.linspace(0.0, 2.0 * math.pi, points, endpoint=False)

    result = parity_phase_scan(
        state,
        pair,
        phi1=grid_of("phi1_points"),
        phi2=grid_of("phi2_points"),
        shots=None if spec.get("shots") is None else int(spec["shots"]),
        seed=_resolve_seed(spec, seed),
    )
    written = []
    if fmt in ("json", "both"):
        written.append(
            _write_json(out_dir / f"{cfg.experiment}_parity.json", phase_scan_to_dict(result))
        )
    if fmt in ("csv", "both"):
        written.append(_phase_scan_csv(out_dir / f"{cfg.experiment}_parity.csv", result))
    print(
        f"pair {result.pair}: amplitude = {result.amplitude:.6f}"
        f" +- {result.amplitude_sigma:.6f}"
    )
    return written


def cmd_calibrate(cfg: PipelineConfig, out_dir: Path, fmt: str, seed: int | None) -> list[Path]:
    spec = cfg.calibrate_spec
    if "offset" not in spec:
        raise ConfigError("calibrate section needs the injected offset (radians)")
    points = int(spec.get("points", 72))
    if points < 4:
        raise ConfigError("calibrate section needs at least 4 scan points")
    result = calibrate_spin_phase(
        float(spec["offset"]),
        phi_b=np.linspace(0.0, 2.0 * math.pi, points, endpoint=False),
        shots=None if spec.get("shots") is None else int(spec["shots"]),
        seed=_resolve_seed(spec, seed),
        alpha=float(spec.get("alpha", 1.2)),
    )
    written = []
    if fmt in ("json", "both"):
        written.append(
            _write_json(
                out_dir / f"{cfg.experiment}_calibration.json",
                spin_calibration_to_dict(result),
            )
        )
    if fmt in ("csv", "both"):
        written.append(
            _spin_calibration_csv(out_dir / f"{cfg.experiment}_calibration.csv", result)
        )
    print(f"estimated spin phase = {result.estimate:.6f} rad")
    return written


# ---------------------------------------------------------------------------
# Entry point

def _validate_thread_cap():
    raw = os.environ.get("MMTOMO_THREADS")
    if raw is None:
        return
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MMTOMO_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"MMTOMO_THREADS must be >= 0, got {value}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, default=None, help="override every section seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument(
        "--format", choices=["json", "csv", "both"], default=None,
        help="which mirrors to write (default: config output.format)",
    )
    parser = argparse.ArgumentParser(
        prog="mmtomo",
        description="Simulation, fitting, and tomography pipeline for multi-mode "
        "trapped-ion motional states.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a sampled readout time scan")
    fit = sub.add_parser("fit", parents=[common], help="fit Fock populations from scan files")
    fit.add_argument(
        "--scan", action="append", default=[], help="scan JSON file (repeatable)"
    )
    rec = sub.add_parser("reconstruct", parents=[common], help="invert displaced populations")
    rec.add_argument(
        "--manifest", default=None, help="existing Q manifest JSON (skips simulation)"
    )
    sub.add_parser("verify", parents=[common], help="run the parity phase scan")
    sub.add_parser("calibrate", parents=[common], help="recover a spin-phase offset")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _validate_thread_cap()
        cfg = load_config(args.config)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be in [0, 2^64), got {args.seed}")
        out_dir = Path(args.out) if args.out is not None else cfg.out_dir
        fmt = args.format if args.format is not None else cfg.out_format
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            written = cmd_simulate(cfg, out_dir, fmt, args.seed)
        elif args.command == "fit":
            written = cmd_fit(cfg, args.scan, out_dir, fmt, args.seed)
        elif args.command == "reconstruct":
            written = cmd_reconstruct(cfg, args.manifest, out_dir, fmt, args.seed)
        elif args.command == "verify":
            written = cmd_verify(cfg, out_dir, fmt, args.seed)
        else:
            written = cmd_calibrate(cfg, out_dir, fmt, args.seed)
        for path in written:
            print(f"wrote {path}")
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
