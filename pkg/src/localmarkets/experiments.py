"""Declarative counterfactual engine.

A scenario names a base and a target economy, a set of toggles saying
which conditions evolve to their target values, a matching mode, and an
equilibrium mode.  Partial mode rebuilds a state at explicitly frozen
blocks (the base state's values unless toggled); full mode re-solves the
whole fixed point on hybrid primitives.  Outcomes bundle the state with
the standard metric reports and provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    HUSBAND_OF,
    SKILL_IDX,
    WIFE_OF,
    EconomyPrimitives,
    EquilibriumState,
    MatchingTable,
    PreferenceParams,
)
from .cli_io.formats import economy_to_dict
from .labor_housing import skill_wages
from .marriage import nonpecuniary_core
from .metrics import (
    assortativeness_report,
    college_marital_gap,
    college_welfare_gap,
    inequality_report,
)
from .spatial_eq import SolverOptions, solve_equilibrium, solve_partial, verify_equilibrium

__all__ = [
    "TOGGLES",
    "ScenarioSpec",
    "ScenarioOutcome",
    "ScenarioError",
    "run_scenario",
    "random_matching",
    "no_marriage_scenario",
    "scale_assortativeness",
    "adjust_education_level",
    "scale_college_premium",
    "welfare_decomposition",
    "scenario_catalog",
    "college_share_quartile_gap",
]

TOGGLES = frozenset({
    "wages",
    "rents",
    "nonpecuniary_mu",
    "education_distribution",
    "location_choices",
    "college_premium",
    "national_education_level",
    "city_wage_differentials",
    "amenities",
    "transfers_resolve",
})

# toggles that need a solved target state in partial mode
_NEEDS_TARGET_STATE = {
    "wages", "rents", "education_distribution", "location_choices",
    "college_premium", "national_education_level", "city_wage_differentials",
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """What changes between the base and the counterfactual world."""

    name: str
    base: EconomyPrimitives
    target: EconomyPrimitives | None = None
    toggles: frozenset = frozenset()
    matching_mode: str = "assortative"
    mu_core_scale: float = 1.0
    marriage_feasible: bool = True
    equilibrium_mode: str = "partial"

    def __post_init__(self):
        object.__setattr__(self, "toggles", frozenset(self.toggles))
        unknown = self.toggles - TOGGLES
        if unknown:
            raise ScenarioError(f"unknown toggles: {sorted(unknown)}")
        if self.matching_mode not in ("assortative", "random"):
            raise ScenarioError(f"bad matching_mode {self.matching_mode!r}")
        if self.equilibrium_mode not in ("partial", "full"):
            raise ScenarioError(f"bad equilibrium_mode {self.equilibrium_mode!r}")
        if self.equilibrium_mode == "full" and self.toggles and \
                "transfers_resolve" not in self.toggles:
            raise ScenarioError(
                "full mode always re-clears marriage markets; add "
                "'transfers_resolve' to the toggle set"
            )
        if "location_choices" in self.toggles and self.equilibrium_mode == "full":
            raise ScenarioError("location_choices is a partial-mode toggle")
        if self.toggles & _NEEDS_TARGET_STATE or "nonpecuniary_mu" in self.toggles \
                or "amenities" in self.toggles:
            if self.target is None:
                raise ScenarioError(f"scenario {self.name!r} needs a target economy")
        if self.mu_core_scale < 0:
            raise ScenarioError("mu_core_scale must be >= 0")

    def digest(self) -> str:
        body = {
            "name": self.name,
            "toggles": sorted(self.toggles),
            "matching_mode": self.matching_mode,
            "mu_core_scale": self.mu_core_scale,
            "marriage_feasible": self.marriage_feasible,
            "equilibrium_mode": self.equilibrium_mode,
            "base": economy_to_dict(self.base),
            "target": economy_to_dict(self.target) if self.target else None,
        }
        return hashlib.sha256(
            json.dumps(body, sort_keys=True).encode()
        ).hexdigest()


@dataclass
class ScenarioOutcome:
    spec_name: str
    state: EquilibriumState
    base_state: EquilibriumState
    prefs: PreferenceParams  # effective preferences of the scenario
    metrics: dict
    provenance: dict


def _solved(econ, opts, cache):
    key = id(econ)
    if key not in cache:
        cache[key] = solve_equilibrium(econ, opts)
    return cache[key]


def run_scenario(
    spec: ScenarioSpec,
    opts: SolverOptions | None = None,
    base_state: EquilibriumState | None = None,
    target_state: EquilibriumState | None = None,
) -> ScenarioOutcome:
    """Execute one scenario and compute its outcome metrics.

    Pre-solved base/target states may be supplied to avoid repeated
    solves; they must correspond to the spec's economies.
    """
    opts = opts or SolverOptions()
    cache: dict = {}
    if base_state is None:
        base_state = _solved(spec.base, opts, cache)
    needs_target = bool(spec.toggles & _NEEDS_TARGET_STATE)
    if needs_target and target_state is None:
        target_state = _solved(spec.target, opts, cache)

    prefs = _effective_prefs(spec)
    identity = (
        not spec.toggles
        and spec.matching_mode == "assortative"
        and spec.mu_core_scale == 1.0
        and spec.marriage_feasible
        and spec.equilibrium_mode == "partial"
    )
    residuals: dict | str
    if identity:
        # no toggles: the scenario is the solved base, bit for bit
        state = base_state
        econ_eff = replace(spec.base, prefs=prefs)
        residuals = verify_equilibrium(econ_eff, state)
    elif not spec.marriage_feasible:
        econ_eff = _hybrid_economy(spec, prefs, base_state, target_state)
        state = no_marriage_scenario(econ_eff, opts)
        residuals = verify_equilibrium(econ_eff, state)
    elif spec.equilibrium_mode == "full":
        econ_eff = _hybrid_economy(spec, prefs, base_state, target_state)
        state = solve_equilibrium(econ_eff, opts)
        residuals = verify_equilibrium(econ_eff, state)
    else:
        econ_eff = replace(spec.base, prefs=prefs)
        state = _partial_state(spec, prefs, base_state, target_state, opts)
        residuals = "partial state: frozen blocks are not re-cleared"

    if spec.matching_mode == "random":
        state = random_matching(state)
        residuals = "random matching applied: matching table is counterfactual"

    metrics = _outcome_metrics(spec, state, prefs)
    provenance = {
        "spec_hash": spec.digest(),
        "toggles": sorted(spec.toggles),
        "matching_mode": spec.matching_mode,
        "equilibrium_mode": spec.equilibrium_mode,
        "mu_core_scale": spec.mu_core_scale,
        "marriage_feasible": spec.marriage_feasible,
        "residuals": residuals,
    }
    return ScenarioOutcome(
        spec_name=spec.name,
        state=state,
        base_state=base_state,
        prefs=prefs,
        metrics=metrics,
        provenance=provenance,
    )


def _effective_prefs(spec: ScenarioSpec) -> PreferenceParams:
    prefs = spec.target.prefs if "nonpecuniary_mu" in spec.toggles else spec.base.prefs
    if spec.mu_core_scale != 1.0:
        prefs = replace(prefs, mu=_scaled_mu(prefs.mu, spec.mu_core_scale))
    if not spec.marriage_feasible:
        # marriage carries an arbitrarily large penalty: the option's
        # probability underflows to exactly zero and surpluses vanish
        prefs = replace(prefs, mu=prefs.mu - 1e9)
    return prefs


def _hybrid_economy(spec: ScenarioSpec, prefs: PreferenceParams) -> EconomyPrimitives:
    """Primitives with toggled fields taken from the target."""
    base, target = spec.base, spec.target
    cities = []
    for i, c in enumerate(base.cities):
        kw = {}
        if target is not None:
            tc = target.cities[i]
            if "wages" in spec.toggles:
                kw["productivity"] = tc.productivity
                kw["skill_share"] = tc.skill_share
            if "rents" in spec.toggles:
                kw["construction_cost"] = tc.construction_cost
                kw["interest_rate"] = tc.interest_rate
            if "amenities" in spec.toggles:
                kw["amenity_obs"] = tc.amenity_obs
                kw["amenity_unobs"] = tc.amenity_unobs
        cities.append(replace(c, **kw) if kw else c)
    nat = base.national_population
    if target is not None and "education_distribution" in spec.toggles:
        nat = target.national_population
    econ = replace(
        spec.base,
        cities=tuple(cities),
        national_population=nat,
        prefs=prefs,
    )
    if "college_premium" in spec.toggles:
        econ = scale_college_premium(econ, _premium_shift(spec))
    return econ


def _premium_shift(spec: ScenarioSpec) -> float:
    """Target change of the national mean log skill-price gap, computed
    from the two economies' primitives at their own equilibria."""
    opts = SolverOptions()
    b = solve_equilibrium(spec.base, opts)
    t = solve_equilibrium(spec.target, opts)
    return _national_premium(t) - _national_premium(b)


def _national_premium(state: EquilibriumState) -> float:
    w = state.populations.sum(axis=1)
    gap = np.log(state.wage_H / state.wage_L)
    return float((gap * w).sum() / w.sum())


def _partial_state(spec, prefs, base_state, target_state, opts):
    frozen: dict = {}
    # populations
    if "education_distribution" in spec.toggles:
        populations = target_state.populations.copy()
    elif "location_choices" in spec.toggles:
        populations = target_state.location_probs * spec.base.national_population[None, :]
    elif "national_education_level" in spec.toggles:
        populations = adjust_education_level(
            base_state.populations, spec.target.national_population
        )
    else:
        populations = base_state.populations.copy()
    frozen["populations"] = populations

    # wages
    if "college_premium" in spec.toggles:
        shift = _national_premium(target_state) - _national_premium(base_state)
        frozen["wages"] = _premium_scaled_wages(spec.base, base_state, shift)
    elif "city_wage_differentials" in spec.toggles:
        frozen["wages"] = _differential_wages(base_state, target_state)
    elif "wages" in spec.toggles:
        frozen["wages"] = np.stack(
            [target_state.wage_H, target_state.wage_L], axis=1
        )
    else:
        frozen["wages"] = np.stack([base_state.wage_H, base_state.wage_L], axis=1)

    frozen["rents"] = (
        target_state.rent.copy() if "rents" in spec.toggles else base_state.rent.copy()
    )
    if "transfers_resolve" not in spec.toggles:
        frozen["transfers"] = base_state.transfers.copy()

    econ = replace(spec.base, prefs=prefs)
    return solve_partial(econ, frozen, opts)


def _premium_scaled_wages(econ, state, shift):
    """Wages implied by tilting every city's skill share so the log wage
    gap moves by `shift`, holding productivity and labor fixed."""
    alpha = econ.skill_share_arr()
    logit = np.log(alpha / (1 - alpha)) + shift
    alpha_new = 1.0 / (1.0 + np.exp(-logit))
    w_h, w_l = skill_wages(
        econ.productivity_arr(), alpha_new, econ.tech_rho, state.eff_labor
    )
    return np.stack([w_h, w_l], axis=1)


def _differential_wages(base_state, target_state):
    """Target wage pattern across cities, rescaled so the national mean
    log wage of each skill stays at its base value."""
    out = np.empty((base_state.n_cities, 2))
    pop_b = base_state.populations.sum(axis=1)
    pop_t = target_state.populations.sum(axis=1)
    for j, (wb, wt) in enumerate(
        [(base_state.wage_H, target_state.wage_H),
         (base_state.wage_L, target_state.wage_L)]
    ):
        mean_b = (np.log(wb) * pop_b).sum() / pop_b.sum()
        mean_t = (np.log(wt) * pop_t).sum() / pop_t.sum()
        out[:, j] = wt * np.exp(mean_b - mean_t)
    return out


def adjust_education_level(populations: np.ndarray, target_national: np.ndarray) -> np.ndarray:
    """Shift every city's college shares so national totals match the
    target education level, holding each city's gender totals.

    Within each gender a common log-odds shift is applied to the city
    college shares and solved by bisection; gender totals are then
    rescaled to the target gender masses.
    """
    populations = np.asarray(populations, dtype=float)
    out = populations.copy()
    for g, (hi, lo) in enumerate([(0, 1), (2, 3)]):
        tot = populations[:, hi] + populations[:, lo]
        share = populations[:, hi] / tot
        target_h = target_national[hi]
        target_tot = target_national[hi] + target_national[lo]
        scale = target_tot / tot.sum()

        def implied(lam):
            s = 1.0 / (1.0 + np.exp(-(np.log(share / (1 - share)) + lam)))
            return float((s * tot).sum() * scale)

        lo_l, hi_l = -30.0, 30.0
        for _ in range(200):
            mid = 0.5 * (lo_l + hi_l)
            if implied(mid) < target_h:
                lo_l = mid
            else:
                hi_l = mid
        lam = 0.5 * (lo_l + hi_l)
        s = 1.0 / (1.0 + np.exp(-(np.log(share / (1 - share)) + lam)))
        out[:, hi] = s * tot * scale
        out[:, lo] = (1 - s) * tot * scale
    return out


def scale_college_premium(econ: EconomyPrimitives, shift: float) -> EconomyPrimitives:
    """Economy whose skill shares are tilted by a common log-odds shift,
    moving every city's log wage gap by `shift` at unchanged labor."""
    alpha = econ.skill_share_arr()
    logit = np.log(alpha / (1 - alpha)) + shift
    alpha_new = 1.0 / (1.0 + np.exp(-logit))
    cities = tuple(
        replace(c, skill_share=float(a)) for c, a in zip(econ.cities, alpha_new)
    )
    return replace(econ, cities=cities)


def scale_assortativeness(econ: EconomyPrimitives, factor: float) -> EconomyPrimitives:
    """Economy whose nonpecuniary supermodularity core is scaled by
    `factor`, holding each gender's mean utility over the four cells."""
    if factor < 0:
        raise ValueError("factor must be >= 0")
    return replace(econ, prefs=replace(econ.prefs, mu=_scaled_mu(econ.prefs.mu, factor)))


def _scaled_mu(mu: np.ndarray, factor: float) -> np.ndarray:
    core = nonpecuniary_core(mu)
    d = (factor - 1.0) * core / 8.0
    out = np.asarray(mu, dtype=float).copy()
    for p in range(4):
        same = SKILL_IDX[p]
        out[p, same] += d
        out[p, 1 - same] -= d
    return out


def random_matching(state: EquilibriumState) -> EquilibriumState:
    """State whose couples are re-paired independently within each city.

    Marriage propensities stay at the state's values; couple cells become
    the product of the spouses' married shares.  With unequal married
    masses across genders the short side matches fully and the long
    side's masses scale down proportionally.  Per-city same-education
    concentration then equals its independence benchmark exactly.
    """
    couples = np.empty_like(state.couples)
    singles = np.empty_like(state.singles)
    probs = np.empty_like(state.choice_probs)
    for i in range(state.n_cities):
        t = state.matching(i)
        married = t.married_by_person()
        men = married[:2]
        women = married[2:]
        total_m, total_w = men.sum(), women.sum()
        if total_m == 0 or total_w == 0:
            couples[i] = 0.0
            singles[i] = state.populations[i]
            probs[i] = np.array([[0.0, 0.0, 1.0]] * 4)
            continue
        matched = min(total_m, total_w)
        for c in range(4):
            h, w = HUSBAND_OF[c], WIFE_OF[c]
            couples[i, c] = (married[h] / total_m) * (married[w] / total_w) * matched
        tbl = MatchingTable.from_counts(
            couples[i], np.maximum(state.populations[i] - _married_of(couples[i]), 0.0)
        )
        singles[i] = tbl.singles
        probs[i] = tbl.choice_probs
    return replace(
        state, couples=couples, singles=singles, choice_probs=probs
    )


def _married_of(couples):
    out = np.zeros(4)
    for c in range(4):
        out[HUSBAND_OF[c]] += couples[c]
        out[WIFE_OF[c]] += couples[c]
    return out


def no_marriage_scenario(
    econ: EconomyPrimitives, opts: SolverOptions | None = None
) -> EquilibriumState:
    """Full equilibrium with the marriage option removed.

    Implemented by an arbitrarily large nonpecuniary penalty: marriage
    probabilities underflow to exactly zero, surpluses vanish, and the
    location block sees single values only.
    """
    if np.all(econ.prefs.mu < -1e8):
        penalized = econ
    else:
        penalized = replace(econ, prefs=replace(econ.prefs, mu=econ.prefs.mu - 1e9))
    return solve_equilibrium(penalized, opts or SolverOptions())


def college_share_quartile_gap(state: EquilibriumState) -> float:
    """Upper minus lower quartile of city college shares."""
    tot = state.populations.sum(axis=1)
    share = (state.populations[:, 0] + state.populations[:, 2]) / tot
    return float(np.quantile(share, 0.75) - np.quantile(share, 0.25))


def _outcome_metrics(spec, state, prefs) -> dict:
    econ_eff = _hybrid_economy(spec, prefs)
    tables = [state.matching(i) for i in range(state.n_cities)]
    out = {
        "inequality": inequality_report(state, prefs),
        "pmh_gap": college_marital_gap(tables, city_ids=state.city_ids),
        "welfare": college_welfare_gap(state, prefs),
        "college_share_quartile_gap": college_share_quartile_gap(state),
    }
    if spec.marriage_feasible and spec.matching_mode == "assortative":
        out["assortativeness"] = assortativeness_report([(econ_eff, state)], prefs)[0]
    return out


# ----------------------------------------------------------------------
# Table-style multi-scenario drivers


_WELFARE_COLUMNS = [
    ("wages",),
    ("wages", "rents"),
    ("wages", "rents", "transfers_resolve"),
    ("wages", "rents", "transfers_resolve", "nonpecuniary_mu"),
    ("wages", "rents", "transfers_resolve", "nonpecuniary_mu", "location_choices"),
    ("wages", "rents", "transfers_resolve", "nonpecuniary_mu", "education_distribution"),
]


def welfare_decomposition(
    base: EconomyPrimitives,
    target: EconomyPrimitives,
    opts: SolverOptions | None = None,
):
    """College welfare gaps under the six cumulative-toggle scenarios.

    Column k lets one more condition evolve from base to target; the
    first two hold marital transfers at their base values, the rest
    re-clear the marriage markets.  Returns a DataFrame with the gap at
    base, the gap under each scenario, and the change.
    """
    import pandas as pd

    opts = opts or SolverOptions()
    base_state = solve_equilibrium(base, opts)
    target_state = solve_equilibrium(target, opts)
    rows = []
    for k, toggles in enumerate(_WELFARE_COLUMNS, start=1):
        spec = ScenarioSpec(
            name=f"welfare_column_{k}",
            base=base,
            target=target,
            toggles=frozenset(toggles),
            equilibrium_mode="partial",
        )
        outcome = run_scenario(
            spec, opts, base_state=base_state, target_state=target_state
        )
        gap_base = college_welfare_gap(base_state, base.prefs)
        gap_new = outcome.metrics["welfare"]
        for scope in ("male", "female", "pooled"):
            rows.append({
                "column": k,
                "toggles": "+".join(toggles),
                "scope": scope,
                "gap_base": getattr(gap_base, scope),
                "gap_scenario": getattr(gap_new, scope),
                "change": getattr(gap_new, scope) - getattr(gap_base, scope),
            })
    return pd.DataFrame(rows)


def scenario_catalog(
    base: EconomyPrimitives, target: EconomyPrimitives
) -> dict[str, ScenarioSpec]:
    """Prebuilt named scenarios mirroring the standard experiments."""
    specs = {
        "only_preference": ScenarioSpec(
            name="only_preference", base=base, target=target,
            toggles=frozenset({"wages", "rents", "nonpecuniary_mu",
                               "transfers_resolve"}),
            equilibrium_mode="partial",
        ),
        "only_distribution": ScenarioSpec(
            name="only_distribution", base=base, target=target,
            toggles=frozenset({"education_distribution", "transfers_resolve"}),
            equilibrium_mode="partial",
        ),
        "random_matching_evolving": ScenarioSpec(
            name="random_matching_evolving", base=base, target=target,
            toggles=frozenset({"education_distribution", "transfers_resolve"}),
            matching_mode="random",
            equilibrium_mode="partial",
        ),
        "no_marriage": ScenarioSpec(
            name="no_marriage", base=base, target=None,
            toggles=frozenset(), marriage_feasible=False,
            equilibrium_mode="full",
        ),
        "assortativeness_scale": ScenarioSpec(
            name="assortativeness_scale", base=base, target=None,
            toggles=frozenset(), mu_core_scale=1.5,
            equilibrium_mode="full",
        ),
    }
    ineq_toggles = {
        1: frozenset({"national_education_level", "transfers_resolve"}),
        2: frozenset({"college_premium", "transfers_resolve"}),
        3: frozenset({"location_choices", "transfers_resolve"}),
        4: frozenset({"location_choices", "city_wage_differentials",
                      "transfers_resolve"}),
    }
    for k, toggles in ineq_toggles.items():
        for mode in ("am", "rm"):
            specs[f"ineq_experiment_{k}_{mode}"] = ScenarioSpec(
                name=f"ineq_experiment_{k}_{mode}", base=base, target=target,
                toggles=toggles,
                matching_mode="assortative" if mode == "am" else "random",
                equilibrium_mode="partial",
            )
    for k, toggles in enumerate(_WELFARE_COLUMNS, start=1):
        specs[f"welfare_columns_{k}"] = ScenarioSpec(
            name=f"welfare_columns_{k}", base=base, target=target,
            toggles=frozenset(toggles), equilibrium_mode="partial",
        )
    return specs
