"""Gradient waveform design along a fixed k-space trajectory by descent on
the arc-length speed profile."""

from .geometry import (ArcCurve, CepiParams, HardwareLimits, ParamCurve, RosetteParams,
                       SpiralParams, arclength_reparam, gen_trajectory, speed_limit)
from .losses import Atf, BandSet, BarrierConfig, LossWeights, assemble_loss, leaky_log_barrier
from .pipeline import Waveform, backward_design_pass, forward_design_pass
from .pns import PLACEHOLDER_MODEL, PnsModel, pns_barrier, pns_response
from .solver import (DesignSpec, SolverConfig, derate_baseline, frequency_capped_speed, init_xi,
                     run_design, time_optimal_speed)
from .analysis import (fit_atf, kspace_fidelity, power_spectrum, psf_simulate,
                       verify_limits)

__all__ = [
    "ArcCurve", "Atf", "BandSet", "BarrierConfig", "CepiParams", "DesignSpec", "HardwareLimits",
    "LossWeights", "PLACEHOLDER_MODEL", "ParamCurve", "PnsModel", "RosetteParams", "SolverConfig",
    "SpiralParams", "Waveform", "arclength_reparam", "assemble_loss", "backward_design_pass",
    "derate_baseline", "fit_atf", "forward_design_pass", "frequency_capped_speed", "gen_trajectory",
    "init_xi", "kspace_fidelity", "leaky_log_barrier", "pns_barrier", "pns_response", "power_spectrum",
    "psf_simulate", "run_design", "speed_limit", "time_optimal_speed", "verify_limits",
]
