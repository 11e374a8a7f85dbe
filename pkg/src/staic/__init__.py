"""Spatio-temporal adaptive infimal convolution (STAIC) restoration of image sequences.

The restored sequence ``g`` is split as ``(g - v) + v``: a 2D Hessian penalty
acts on ``g - v`` frame by frame, while a 3D spatio-temporal Hessian penalty
acts on ``v``. Static structure is therefore smoothed along time and moving
structure is left to the spatial term. The problem is solved by ADMM with
exact per-frequency linear solves under periodic boundaries.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DivergenceError, FormatError, SizeError,
                     StaicError)
from .tensor import (PairStack, Stack, VectorStack, export_csv_frames, import_csv_frames,
                     read_stack, read_vector_stack, write_stack)
from .operators import Filter3, OperatorBank, apply_bank, adjoint_bank, staic_bank
from .prox import (prox_bound, prox_data, prox_group, prox_spatial, prox_temporal,
                   solve_w)
from .solver import (AdmmConfig, RestorationResult, SolverConfig, kkt_report,
                     restore_staic, staic_objective)
from .baselines import BaselineConfig, restore_cst, restore_ictv, restore_tv2_3d
from .harness import (ExperimentSpec, NoiseSpec, PhantomSpec, PsfSpec, corrupt,
                      make_phantom, make_psf, run_experiment, snr_db, ssim_mean)

__all__ = [
    "__version__",
    "StaicError", "FormatError", "SizeError", "DataError", "ConfigError", "DivergenceError",
    "Stack", "VectorStack", "PairStack", "read_stack", "read_vector_stack", "write_stack",
    "import_csv_frames", "export_csv_frames",
    "Filter3", "OperatorBank", "apply_bank", "adjoint_bank", "staic_bank",
    "prox_data", "prox_bound", "prox_group", "prox_temporal", "prox_spatial", "solve_w",
    "AdmmConfig", "SolverConfig", "RestorationResult", "restore_staic", "staic_objective",
    "kkt_report",
    "BaselineConfig", "restore_tv2_3d", "restore_cst", "restore_ictv",
    "PsfSpec", "NoiseSpec", "PhantomSpec", "ExperimentSpec", "make_psf", "corrupt",
    "make_phantom", "snr_db", "ssim_mean", "run_experiment",
]
