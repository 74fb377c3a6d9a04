"""Simulated compressive scanning acquisition and BPFA dictionary-learning reconstruction."""

from .acquisition import NoiseKind, NoiseSpec, Observation, acquire, constrained_dose_series
from .bpfa import (
    BatchSchedule,
    BpfaHyperparams,
    BpfaState,
    Mode,
    NumericalError,
    inpaint,
    init_state,
    reconstruct_patches,
    run_inference,
)
from .imaging import (
    Image,
    Mask,
    PatchGrid,
    PatchSet,
    drift_matched_psnr,
    extract_patches,
    psnr,
    reassemble,
)
from .phantom import lattice_phantom
from .sampling import (
    DoseBudget,
    LineHopParams,
    SamplingPlan,
    Scheme,
    constrained_dwell,
    linehop_plan,
    plan_metrics,
    raster_plan,
    uds_plan,
)

__version__ = "0.1.0"
