"""Energy-aware feedback-subcarrier allocation for uplink IoT cells."""

from .core import (CellConfig, CellState, FitConstants, FIT_DEFAULT, FIT_K36, PRESETS, cycle_energy,
                   initial_state, load_config, preset, required_ul_snr_db, step, transmit_power)
from .mdp import (action_space_size, baseline_policies, enumerate_actions, estimate_lifespan, run_episode,
                  shaped_rewards)

__all__ = [
    "CellConfig", "CellState", "FitConstants", "FIT_DEFAULT", "FIT_K36", "PRESETS", "cycle_energy",
    "initial_state", "load_config", "preset", "required_ul_snr_db", "step", "transmit_power",
    "action_space_size", "baseline_policies", "enumerate_actions", "estimate_lifespan", "run_episode",
    "shaped_rewards",
]
__version__ = "0.1.0"
