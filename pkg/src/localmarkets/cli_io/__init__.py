"""Data schemas, synthetic generation, serialization, and the CLI."""

from .formats import (
    economy_from_dict,
    economy_to_dict,
    load_city_panel,
    load_economy,
    save_city_panel,
    save_economy,
    load_state,
    save_state,
    state_to_dict,
    state_from_dict,
)
from .synth import (
    SyntheticSpec,
    MU_DEFAULTS,
    generate_synthetic_economy,
    generate_marriage_panel,
    generate_estimation_inputs,
    simulate_micro,
    panel_from_micro,
    panel_from_state,
)

__all__ = [
    "economy_from_dict",
    "economy_to_dict",
    "load_city_panel",
    "load_economy",
    "save_city_panel",
    "save_economy",
    "load_state",
    "save_state",
    "state_to_dict",
    "state_from_dict",
    "SyntheticSpec",
    "MU_DEFAULTS",
    "generate_synthetic_economy",
    "generate_marriage_panel",
    "generate_estimation_inputs",
    "simulate_micro",
    "panel_from_micro",
    "panel_from_state",
]
