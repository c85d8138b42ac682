"""Retraction-free compressed distributed optimization on Stiefel manifolds."""

from .baselines import Baseline, BaselineKind, run_baseline
from .blocks import BlockPoint
from .compressors import CompressorSpec, Kind, SeedPolicy, compress, decompress
from .engine import RunResult, initial_point, run_blockwise, run_ef_landing
from .manifold import MeritParams, SafeRegionParams, landing_direction, make_merit_params, safe_step_size
from .problems import PcaProblem, gen_pca_data
from .schedules import ScheduleParams, schedule_deterministic, schedule_stochastic

__version__ = "0.1.0"

__all__ = [
    "Baseline",
    "BaselineKind",
    "BlockPoint",
    "CompressorSpec",
    "Kind",
    "MeritParams",
    "PcaProblem",
    "RunResult",
    "SafeRegionParams",
    "ScheduleParams",
    "SeedPolicy",
    "compress",
    "decompress",
    "gen_pca_data",
    "initial_point",
    "landing_direction",
    "make_merit_params",
    "run_baseline",
    "run_blockwise",
    "run_ef_landing",
    "safe_step_size",
    "schedule_deterministic",
    "schedule_stochastic",
]
