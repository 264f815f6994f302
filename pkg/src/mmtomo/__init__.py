"""Multi-mode motional Fock-state analysis and density-matrix tomography
for trapped-ion spin-boson systems.

The toolkit simulates sideband pulse sequences on a truncated spin (x)
multi-mode Fock space, generates joint-spin time-scan data, fits
Fock-state distributions by weighted least squares on the cos^2 Rabi
basis, and reconstructs multi-mode density matrices from displaced
populations via a discrete Fourier transform over a circular
displacement grid.
"""

import os as _os

# Cap BLAS parallelism before the numerics load (0 or unset = automatic).
# Effective when this package is imported first, e.g. by the CLI script.
_threads = _os.environ.get("MMTOMO_THREADS")
if _threads is not None:
    try:
        _count = int(_threads)
    except ValueError:
        _count = 0
    if _count > 0:
        for _var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            _os.environ.setdefault(_var, str(_count))
    del _count
del _threads, _os

__version__ = "0.1.0"

from .exceptions import (
    CalibrationError,
    ConditioningWarning,
    ConfigError,
    DimensionMismatchError,
    FitConvergenceError,
    NumericalError,
    RankDeficientError,
    TruncationLeakError,
)
from .fockspace import (
    DensityMatrix,
    HilbertConfig,
    ModeOperator,
    PureState,
    build_operator,
    displaced_density,
    displaced_populations,
    fidelity,
    fock_state,
    motional_density,
    motional_pure,
    pure_density,
    reporting_vector,
    trace_distance,
    vacuum_state,
)
from .dynamics import (
    BSB,
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
from .measurement import (
    TimeScanData,
    all_spin_configs,
    analytic_scan,
    apply_decoherence,
    default_time_grid,
    sample_scan,
    scan_probabilities,
)
from .fitting import (
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
from .reconstruction import (
    DisplacementGrid,
    QDataset,
    ReconstructedState,
    dft_transform,
    exact_qdataset,
    gamma_coefficient,
    hermitize,
    invert_gamma,
    project_psd,
    reconstruct,
)
from .verification import (
    PhaseScanResult,
    SpinPhaseCalibration,
    calibrate_spin_phase,
    parity_phase_scan,
)

__all__ = [
    "BSB",
    "CalibrationError",
    "Carrier",
    "ConditioningWarning",
    "ConfigError",
    "DensityMatrix",
    "DimensionMismatchError",
    "DisplacementGrid",
    "FitConvergenceError",
    "FockDistribution",
    "HilbertConfig",
    "ModeOperator",
    "NumericalError",
    "PhaseScanResult",
    "PulseSequence",
    "PureState",
    "QDataset",
    "RSB",
    "RabiCalibration",
    "RankDeficientError",
    "ReconstructedState",
    "SpinDepDisplace",
    "SpinPhaseCalibration",
    "TimeScanData",
    "TruncationLeakError",
    "all_spin_configs",
    "analytic_scan",
    "apply_decoherence",
    "build_operator",
    "calibrate_spin_phase",
    "coherent_populations",
    "default_time_grid",
    "dft_transform",
    "displaced_density",
    "displaced_populations",
    "evolve",
    "exact_qdataset",
    "fidelity",
    "fit_coherent_alpha",
    "fit_fock_distribution",
    "fit_fock_distribution_restricted",
    "fit_thermal_nbar",
    "fock_state",
    "full_basis",
    "gamma_coefficient",
    "hermitize",
    "invert_gamma",
    "motional_density",
    "motional_pure",
    "named_sequence",
    "one_phonon_neighborhood",
    "parity_phase_scan",
    "prepare_named_state",
    "project_psd",
    "pure_density",
    "reconstruct",
    "reporting_vector",
    "run_sequence",
    "sample_scan",
    "scan_probabilities",
    "thermal_populations",
    "trace_distance",
    "vacuum_state",
    "__version__",
]
