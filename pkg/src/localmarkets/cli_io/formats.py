"""File formats: economies and states as JSON, panels as CSV.

JSON numbers are written from Python floats, whose repr round-trips
binary64 exactly, so write-then-read is lossless.  Panel CSV headers are
checked strictly: missing or unknown columns are errors, not warnings.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pandas as pd

from ..core import (
    CityPrimitives,
    EconomyPrimitives,
    EquilibriumState,
    HousingElasticityParams,
    PreferenceParams,
)
from ..estimation import (
    CORE_COLUMNS,
    INDUSTRY_COLUMNS,
    NATIONAL_COLUMNS,
    CityPanel,
    Estimates,
    PanelValidationError,
)

__all__ = [
    "economy_to_dict",
    "economy_from_dict",
    "save_economy",
    "load_economy",
    "state_to_dict",
    "state_from_dict",
    "save_state",
    "load_state",
    "state_to_frame",
    "save_city_panel",
    "load_city_panel",
    "estimates_to_dict",
]

PANEL_CORE_FILE = "city_panel.csv"
PANEL_INDUSTRY_FILE = "industry.csv"
PANEL_NATIONAL_FILE = "national_wages.csv"


def economy_to_dict(econ: EconomyPrimitives) -> dict:
    return {
        "period_label": econ.period_label,
        "tech_rho": econ.tech_rho,
        "national_population": [float(x) for x in econ.national_population],
        "housing": {
            "psi0": econ.housing.psi0,
            "psi1": econ.housing.psi1,
            "psi2": econ.housing.psi2,
        },
        "prefs": {
            "sigma_eps": econ.prefs.sigma_eps,
            "sigma_nu": econ.prefs.sigma_nu,
            "eta": econ.prefs.eta,
            "zeta": econ.prefs.zeta,
            "chi": econ.prefs.chi,
            "mu": [[float(v) for v in row] for row in econ.prefs.mu],
            "phi": [float(v) for v in econ.prefs.phi],
            "delta": [float(v) for v in econ.prefs.delta],
        },
        "cities": [
            {
                "city_id": c.city_id,
                "productivity": c.productivity,
                "skill_share": c.skill_share,
                "construction_cost": c.construction_cost,
                "land_unavail": c.land_unavail,
                "land_reg": c.land_reg,
                "amenity_obs": c.amenity_obs,
                "amenity_unobs": [float(v) for v in c.amenity_unobs],
                "interest_rate": c.interest_rate,
            }
            for c in econ.cities
        ],
    }


def economy_from_dict(d: dict) -> EconomyPrimitives:
    return EconomyPrimitives(
        cities=tuple(
            CityPrimitives(
                city_id=c["city_id"],
                productivity=c["productivity"],
                skill_share=c["skill_share"],
                construction_cost=c["construction_cost"],
                land_unavail=c["land_unavail"],
                land_reg=c["land_reg"],
                amenity_obs=c["amenity_obs"],
                amenity_unobs=np.array(c["amenity_unobs"], dtype=float),
                interest_rate=c["interest_rate"],
            )
            for c in d["cities"]
        ),
        national_population=np.array(d["national_population"], dtype=float),
        tech_rho=d["tech_rho"],
        housing=HousingElasticityParams(**d["housing"]),
        prefs=PreferenceParams(
            sigma_eps=d["prefs"]["sigma_eps"],
            sigma_nu=d["prefs"]["sigma_nu"],
            eta=d["prefs"]["eta"],
            zeta=d["prefs"]["zeta"],
            chi=d["prefs"]["chi"],
            mu=np.array(d["prefs"]["mu"], dtype=float),
            phi=np.array(d["prefs"]["phi"], dtype=float),
            delta=np.array(d["prefs"]["delta"], dtype=float),
        ),
        period_label=d.get("period_label", ""),
    )


def save_economy(econ: EconomyPrimitives, path):
    with open(path, "w") as fh:
        json.dump(economy_to_dict(econ), fh, indent=1)
        fh.write("\n")


def load_economy(path) -> EconomyPrimitives:
    with open(path) as fh:
        return economy_from_dict(json.load(fh))


_STATE_ARRAYS = [
    "wage_H", "wage_L", "rent", "transfers", "populations", "couples",
    "singles", "choice_probs", "eff_labor", "housing_qty", "location_probs",
    "inclusive_value", "marital_surplus",
]


def state_to_dict(state: EquilibriumState) -> dict:
    out = {"city_ids": list(state.city_ids), "period_label": state.period_label}
    for name in _STATE_ARRAYS:
        arr = getattr(state, name)
        out[name] = np.where(np.isnan(arr), None, arr).tolist() if np.isnan(
            arr
        ).any() else arr.tolist()
    return out


def state_from_dict(d: dict) -> EquilibriumState:
    kwargs = {"city_ids": tuple(d["city_ids"]), "period_label": d.get("period_label", "")}
    for name in _STATE_ARRAYS:
        arr = np.array(
            [[np.nan if v is None else v for v in row] if isinstance(row, list) else
             (np.nan if row is None else row) for row in d[name]],
            dtype=float,
        )
        kwargs[name] = arr
    return EquilibriumState(**kwargs)


def save_state(state: EquilibriumState, path):
    with open(path, "w") as fh:
        json.dump(state_to_dict(state), fh)
        fh.write("\n")


def load_state(path) -> EquilibriumState:
    with open(path) as fh:
        return state_from_dict(json.load(fh))


def state_to_frame(state: EquilibriumState) -> pd.DataFrame:
    """Per-city flat view of a state for CSV export."""
    from ..core import COUPLE_TYPES, PERSON_TYPES

    rows = []
    for i, cid in enumerate(state.city_ids):
        rec = {
            "city_id": cid,
            "period": state.period_label,
            "wage_H": state.wage_H[i],
            "wage_L": state.wage_L[i],
            "rent": state.rent[i],
            "housing_qty": state.housing_qty[i],
            "eff_labor_H": state.eff_labor[i, 0],
            "eff_labor_L": state.eff_labor[i, 1],
        }
        for c, ct in enumerate(COUPLE_TYPES):
            rec[f"transfer_{ct.name}"] = state.transfers[i, c]
            rec[f"couples_{ct.name}"] = state.couples[i, c]
        for k, pt in enumerate(PERSON_TYPES):
            rec[f"pop_{pt.name}"] = state.populations[i, k]
            rec[f"singles_{pt.name}"] = state.singles[i, k]
            rec[f"location_prob_{pt.name}"] = state.location_probs[i, k]
            rec[f"surplus_{pt.name}"] = state.marital_surplus[i, k]
            rec[f"inclusive_{pt.name}"] = state.inclusive_value[i, k]
        rows.append(rec)
    return pd.DataFrame(rows)


def _check_columns(df: pd.DataFrame, expected: list[str], name: str):
    got = list(df.columns)
    missing = [c for c in expected if c not in got]
    unknown = [c for c in got if c not in expected]
    if missing or unknown:
        parts = []
        if missing:
            parts.append(f"missing columns {missing}")
        if unknown:
            parts.append(f"unknown columns {unknown}")
        raise PanelValidationError(f"{name}: " + "; ".join(parts))


def save_city_panel(panel: CityPanel, directory):
    """Write the panel's CSV files into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    panel.core[CORE_COLUMNS].to_csv(directory / PANEL_CORE_FILE, index=False)
    if panel.industry is not None:
        panel.industry[INDUSTRY_COLUMNS].to_csv(
            directory / PANEL_INDUSTRY_FILE, index=False
        )
    if panel.national_wages is not None:
        panel.national_wages[NATIONAL_COLUMNS].to_csv(
            directory / PANEL_NATIONAL_FILE, index=False
        )


def load_city_panel(path, base_period: str | None = None) -> CityPanel:
    """Load a panel from a directory of CSV files (or the core CSV path).

    Headers are matched exactly; unknown or missing columns, negative
    counts, infeasible marriage cells, and a missing base period are all
    errors.
    """
    path = Path(path)
    if path.is_dir():
        core_path = path / PANEL_CORE_FILE
        industry_path = path / PANEL_INDUSTRY_FILE
        national_path = path / PANEL_NATIONAL_FILE
    else:
        core_path = path
        industry_path = path.parent / PANEL_INDUSTRY_FILE
        national_path = path.parent / PANEL_NATIONAL_FILE
    if not core_path.exists():
        raise FileNotFoundError(f"no city panel at {core_path}")
    core = pd.read_csv(core_path, dtype={"city_id": str, "period": str})
    _check_columns(core, CORE_COLUMNS, core_path.name)
    industry = None
    national = None
    if industry_path.exists():
        industry = pd.read_csv(industry_path, dtype={"city_id": str, "period": str,
                                                     "industry_id": str})
        _check_columns(industry, INDUSTRY_COLUMNS, industry_path.name)
    if national_path.exists():
        national = pd.read_csv(national_path, dtype={"period": str, "industry_id": str})
        _check_columns(national, NATIONAL_COLUMNS, national_path.name)
    return CityPanel(
        core=core, industry=industry, national_wages=national, base_period=base_period
    )


def estimates_to_dict(est: Estimates) -> dict:
    d = est.summary()
    d["gamma_bartik"] = [float(v) for v in est.labor.gamma]
    d["first_stage_F_labor"] = [float(v) for v in est.labor.first_stage_F]
    d["first_stage_F_housing"] = [float(v) for v in est.housing.first_stage_F]
    d["first_stage_F_location"] = [float(v) for v in est.location.first_stage_F]
    d["reference_city"] = est.location.reference_city
    d["marriage_objective"] = est.marriage.objective
    d["marriage_normalization_active"] = est.marriage.normalization_active
    d["marriage_flat_direction"] = {
        "detected": est.marriage.flat_direction.detected,
        "n_flat": est.marriage.flat_direction.n_flat,
        "description": est.marriage.flat_direction.description,
    }
    d["mu"] = {t: [[float(v) for v in row] for row in arr]
               for t, arr in est.marriage.mu.items()}
    d["mu_se"] = {t: [[float(v) for v in row] for row in arr]
                  for t, arr in est.marriage.mu_se.items()}
    d["calibration"] = est.calibration.to_dict(orient="records")
    return d
