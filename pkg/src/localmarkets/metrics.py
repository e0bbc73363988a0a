"""Outcome measures: matching probabilities, inequality, assortativeness,
surplus regressions, and welfare gaps.

Conventions: the probability of marrying a high-skill spouse (PMH)
defaults to conditional-on-marriage; household inequality uses household
units with equivalence scale 1 + chi, couples counted once; national
aggregates pool all cities' households, local ones are per city.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import (
    HUSBAND_OF,
    PERSON_TYPES,
    SKILL_IDX,
    WIFE_OF,
    EquilibriumState,
    MatchingTable,
    PersonType,
    PreferenceParams,
)
from .labor_housing import effective_labor_units
from .marriage import (
    CitySurplus,
    clear_markets,
    marital_surplus,
    marital_surplus_from_wages,
)

__all__ = [
    "InequalityReport",
    "AssortativenessReport",
    "WelfareGapReport",
    "pmh",
    "college_marital_gap",
    "gini",
    "gini_pairwise",
    "household_income_units",
    "inequality_report",
    "likelihood_ratio",
    "pearson_assortativeness",
    "assortativeness_report",
    "surplus_regression",
    "college_welfare_gap",
    "wages_by_type",
    "marital_value_components",
    "surplus_panel",
]


# ----------------------------------------------------------------------
# matching probabilities


def pmh(matching: MatchingTable, p: PersonType, conditional: bool = True):
    """Probability that type p marries a high-skill spouse.

    Conditional (the default) divides by the probability of marrying at
    all and returns None when that probability is zero.
    """
    probs = matching.choice_probs[p.index]
    if not conditional:
        return float(probs[0])
    married = probs[0] + probs[1]
    if married == 0:
        return None
    return float(probs[0] / married)


@dataclass(frozen=True)
class GapReport:
    male: float
    female: float
    city_male: dict
    city_female: dict


def college_marital_gap(matchings, weights=None, city_ids=None) -> GapReport:
    """PMH gap between college and non-college individuals, per gender.

    matchings is one MatchingTable per city.  City-level gaps use each
    city's conditional PMH; the national gap pools married masses across
    cities (married-population weighting).  Optional weights rescale each
    city's masses.
    """
    n = len(matchings)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ids = list(city_ids) if city_ids is not None else [str(i) for i in range(n)]
    num = np.zeros(4)  # married-to-H mass by person type
    den = np.zeros(4)  # married mass by person type
    city_male, city_female = {}, {}
    for i, t in enumerate(matchings):
        married = t.populations() * (t.choice_probs[:, 0] + t.choice_probs[:, 1])
        to_h = t.populations() * t.choice_probs[:, 0]
        num += weights[i] * to_h
        den += weights[i] * married
        g_m = _gap_of(t, male=True)
        g_f = _gap_of(t, male=False)
        if g_m is not None:
            city_male[ids[i]] = g_m
        if g_f is not None:
            city_female[ids[i]] = g_f
    nat = np.divide(num, den, out=np.full(4, np.nan), where=den > 0)
    return GapReport(
        male=float(nat[0] - nat[1]),
        female=float(nat[2] - nat[3]),
        city_male=city_male,
        city_female=city_female,
    )


def _gap_of(t: MatchingTable, male: bool):
    hi = pmh(t, PERSON_TYPES[0 if male else 2])
    lo = pmh(t, PERSON_TYPES[1 if male else 3])
    if hi is None or lo is None:
        return None
    return hi - lo


# ----------------------------------------------------------------------
# inequality


def gini(values) -> float:
    """Weighted Gini coefficient via the sorted O(n log n) formula.

    values is a sequence of (income, weight) pairs or a pair of arrays.
    Incomes must be nonnegative with positive total.
    """
    x, w = _as_income_arrays(values)
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    total_w = w.sum()
    mean = (w * x).sum() / total_w
    if mean == 0:
        raise ValueError("all incomes are zero")
    below_w = np.cumsum(w) - w  # weight strictly before i in sorted order
    below_wx = np.cumsum(w * x) - w * x
    total_abs = 2.0 * np.sum(w * (x * below_w - below_wx))
    return float(total_abs / (2.0 * total_w**2 * mean))


def gini_pairwise(values) -> float:
    """Reference O(n^2) Gini from the pairwise mean absolute difference."""
    x, w = _as_income_arrays(values)
    total_w = w.sum()
    mean = (w * x).sum() / total_w
    if mean == 0:
        raise ValueError("all incomes are zero")
    diff = np.abs(x[:, None] - x[None, :])
    s = float((w[:, None] * w[None, :] * diff).sum())
    return s / (2.0 * total_w**2 * mean)


def _as_income_arrays(values):
    if isinstance(values, tuple) and len(values) == 2 and np.ndim(values[0]) >= 1:
        x = np.asarray(values[0], dtype=float)
        w = np.asarray(values[1], dtype=float)
    else:
        arr = np.asarray(list(values), dtype=float)
        x, w = arr[:, 0], arr[:, 1]
    if np.any(x < 0):
        raise ValueError("incomes must be nonnegative")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return x, w


def wages_by_type(state: EquilibriumState, prefs: PreferenceParams):
    """(single, married) wage matrices (M, 4) implied by the state's skill
    prices and the effective-labor units."""
    unit_single, unit_married = effective_labor_units(prefs)
    sp = np.stack([state.wage_H, state.wage_L], axis=1)
    w = sp[:, SKILL_IDX]
    return w * unit_single, w * unit_married


def household_income_units(
    state: EquilibriumState, prefs: PreferenceParams, city: int | None = None
):
    """Equivalized household incomes and masses.

    Couples contribute their pooled income divided by 1 + chi with the
    couple mass as weight (counted once); singles contribute their own
    wage.  Returns (incomes, weights) arrays, pooled over all cities
    unless a city index is given.
    """
    w_single, w_married = wages_by_type(state, prefs)
    couple_income = (w_married[:, HUSBAND_OF] + w_married[:, WIFE_OF]) / (1.0 + prefs.chi)
    rows = range(state.n_cities) if city is None else [city]
    incomes, weights = [], []
    for i in rows:
        incomes.append(couple_income[i])
        weights.append(state.couples[i])
        incomes.append(w_single[i])
        weights.append(state.singles[i])
    x = np.concatenate(incomes)
    w = np.concatenate(weights)
    keep = w > 0
    return x[keep], w[keep]


@dataclass(frozen=True)
class InequalityReport:
    national_gini: float
    local_gini: dict
    local_mean: float  # unweighted mean of city Ginis
    local_std: float
    local_mean_weighted: float  # household-mass weighted companion

    def to_rows(self, period: str = "") -> list[dict]:
        rows = [
            {"metric": "gini", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.national_gini},
            {"metric": "gini_local_mean", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.local_mean},
            {"metric": "gini_local_mean_weighted", "period": period,
             "city_id": "NATIONAL", "person_type": "",
             "value": self.local_mean_weighted},
            {"metric": "gini_local_std", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.local_std},
        ]
        for cid, g in self.local_gini.items():
            rows.append({"metric": "gini", "period": period, "city_id": cid,
                         "person_type": "", "value": g})
        return rows


def inequality_report(state: EquilibriumState, prefs: PreferenceParams) -> InequalityReport:
    """National (pooled) and per-city household Gini coefficients."""
    x, w = household_income_units(state, prefs)
    national = gini((x, w))
    local = {}
    masses = []
    for i, cid in enumerate(state.city_ids):
        xi, wi = household_income_units(state, prefs, city=i)
        local[cid] = gini((xi, wi))
        masses.append(wi.sum())
    vals = np.array(list(local.values()))
    masses = np.array(masses)
    return InequalityReport(
        national_gini=national,
        local_gini=local,
        local_mean=float(vals.mean()),
        local_std=float(vals.std()),
        local_mean_weighted=float((vals * masses).sum() / masses.sum()),
    )


# ----------------------------------------------------------------------
# reduced-form assortativeness


def likelihood_ratio(couples) -> float:
    """Same-education match mass over its mass under independent matching.

    couples is a (4,) mass vector in couple-type order; 1 under
    independence, above 1 with positive sorting.
    """
    c = np.asarray(couples, dtype=float)
    total = c.sum()
    if total <= 0:
        raise ValueError("no married mass")
    husband_h = (c[0] + c[1]) / total
    wife_h = (c[0] + c[2]) / total
    same = (c[0] + c[3]) / total
    indep = husband_h * wife_h + (1 - husband_h) * (1 - wife_h)
    if indep == 0:
        raise ValueError("degenerate marginals")
    return float(same / indep)


def pearson_assortativeness(couples) -> float:
    """Correlation of spouse education indicators (H=1, L=0)."""
    c = np.asarray(couples, dtype=float)
    total = c.sum()
    if total <= 0:
        raise ValueError("no married mass")
    eh = (c[0] + c[1]) / total  # husband H share
    ew = (c[0] + c[2]) / total
    cov = c[0] / total - eh * ew
    var_h = eh * (1 - eh)
    var_w = ew * (1 - ew)
    if var_h == 0 or var_w == 0:
        raise ValueError("zero variance in one spouse's education")
    return float(cov / np.sqrt(var_h * var_w))


@dataclass(frozen=True)
class AssortativenessReport:
    gamma_local_avg: float
    gamma_national: float
    lr_local_avg: float
    lr_national: float
    pearson_local_avg: float
    pearson_national: float
    period_label: str = ""

    def to_rows(self) -> list[dict]:
        rows = []
        for name in ("gamma", "lr", "pearson"):
            for scope in ("local_avg", "national"):
                rows.append({
                    "metric": f"{name}_{scope}", "period": self.period_label,
                    "city_id": "NATIONAL", "person_type": "",
                    "value": getattr(self, f"{name}_{scope}"),
                })
        return rows


def assortativeness_report(
    econ_states, prefs: PreferenceParams | None = None
) -> list[AssortativenessReport]:
    """Structural and reduced-form assortativeness per period.

    econ_states is a sequence of (EconomyPrimitives, EquilibriumState)
    pairs.  Local figures average city values with weights (population
    for the surplus core, married mass for LR and Pearson); national ones
    merge all cities into a single market: couple cells are summed, and
    the surplus core is recomputed on a pooled market with summed
    populations and population-weighted type wages, re-cleared once.
    """
    out = []
    for econ, state in econ_states:
        p = prefs or econ.prefs
        gammas = np.array([
            marital_surplus(
                np.array([state.wage_H[i], state.wage_L[i]]),
                float(state.rent[i]), state.transfers[i], p,
            ).core
            for i in range(state.n_cities)
        ])
        pop_w = state.populations.sum(axis=1)
        gamma_local = float((gammas * pop_w).sum() / pop_w.sum())

        married_w = state.couples.sum(axis=1)
        lr_cities, pearson_cities, lrw = [], [], []
        for i in range(state.n_cities):
            if married_w[i] <= 0:
                continue
            lr_cities.append(likelihood_ratio(state.couples[i]))
            pearson_cities.append(pearson_assortativeness(state.couples[i]))
            lrw.append(married_w[i])
        lrw = np.array(lrw)
        lr_local = float((np.array(lr_cities) * lrw).sum() / lrw.sum())
        pearson_local = float((np.array(pearson_cities) * lrw).sum() / lrw.sum())

        pooled = state.couples.sum(axis=0)
        lr_nat = likelihood_ratio(pooled)
        pearson_nat = pearson_assortativeness(pooled)
        gamma_nat = _pooled_gamma(state, p)

        out.append(AssortativenessReport(
            gamma_local_avg=gamma_local,
            gamma_national=gamma_nat,
            lr_local_avg=lr_local,
            lr_national=lr_nat,
            pearson_local_avg=pearson_local,
            pearson_national=pearson_nat,
            period_label=state.period_label,
        ))
    return out


def _pooled_gamma(state: EquilibriumState, prefs: PreferenceParams) -> float:
    """Surplus core of one pooled national market.

    Pooled wages are population-weighted type means by marital status;
    the pooled market is re-cleared at the summed populations.  Rent only
    shifts all options equally, so the weighted mean rent is cosmetic.
    """
    n = state.populations  # (M, 4)
    tot = n.sum(axis=0)
    w_single, w_married = wages_by_type(state, prefs)
    ws = (w_single * n).sum(axis=0) / np.maximum(tot, 1e-300)
    wm = (w_married * n).sum(axis=0) / np.maximum(tot, 1e-300)
    pop_w = n.sum(axis=1)
    rent = float((state.rent * pop_w).sum() / pop_w.sum())
    tau, _, _, _, _ = clear_markets(
        tot[None, :], None, np.array([rent]), prefs,
        wage_matrices=(ws[None, :], wm[None, :]),
    )
    return marital_surplus_from_wages(ws, wm, rent, tau[0], prefs).core


# ----------------------------------------------------------------------
# surplus regressions and welfare


def marital_value_components(state: EquilibriumState, prefs: PreferenceParams):
    """Choice-probability-weighted marital value components per (city, type).

    Returns dict of (M, 4) arrays: pecuniary (log pooled equivalized
    income gain over the single wage), nonpecuniary (mu), and transfers
    (signed tau), each weighted by the probability of choosing the
    corresponding spouse type; the single option contributes zero.
    """
    from .core import COUPLE_OF, TRANSFER_SIGN

    w_single, w_married = wages_by_type(state, prefs)
    couple_income = w_married[:, HUSBAND_OF] + w_married[:, WIFE_OF]
    pec_by_spouse = (
        np.log(couple_income[:, COUPLE_OF])
        - np.log1p(prefs.chi)
        - np.log(w_single)[:, :, None]
    )  # (M, 4, 2)
    tau = np.where(np.isnan(state.transfers), 0.0, state.transfers)
    tau_by_spouse = TRANSFER_SIGN[None, :, None] * tau[:, COUPLE_OF]
    p = state.choice_probs[:, :, :2]  # weights on the two spouse options
    return {
        "pecuniary": (p * pec_by_spouse).sum(axis=2),
        "nonpecuniary": (p * prefs.mu[None, :, :]).sum(axis=2),
        "transfers": (p * tau_by_spouse).sum(axis=2),
    }


def surplus_panel(econ_states, prefs: PreferenceParams | None = None) -> pd.DataFrame:
    """Long city-period panel of marital value components with regressors.

    One row per (city, period, person type, component); regressor columns
    carry the city's college share and log single wages by person type.
    """
    rows = []
    for econ, state in econ_states:
        p = prefs or econ.prefs
        comps = marital_value_components(state, p)
        comps["total"] = state.marital_surplus
        w_single, _ = wages_by_type(state, p)
        pop = state.populations
        college = (pop[:, 0] + pop[:, 2]) / pop.sum(axis=1)
        for i, cid in enumerate(state.city_ids):
            base = {
                "city_id": cid,
                "period": state.period_label,
                "college_share": float(college[i]),
            }
            for k, pt in enumerate(PERSON_TYPES):
                base[f"log_wage_{pt.name}"] = float(np.log(w_single[i, k]))
            for name, arr in comps.items():
                for k, pt in enumerate(PERSON_TYPES):
                    rows.append({**base, "person_type": pt.name,
                                 "component": name, "value": float(arr[i, k])})
    return pd.DataFrame(rows)


def surplus_regression(
    panel: pd.DataFrame,
    regressors: list[str] | None = None,
    y_col: str = "value",
    period_col: str = "period",
) -> pd.DataFrame:
    """OLS of each (component, person type) series on the regressors with
    period fixed effects.  Returns a tidy coefficient table."""
    from .estimation import ols

    if regressors is None:
        regressors = ["college_share"] + [
            c for c in panel.columns if c.startswith("log_wage_")
        ]
    out = []
    for (component, ptype), g in panel.groupby(["component", "person_type"]):
        periods = sorted(g[period_col].unique())
        x_cols = [g[r].to_numpy(dtype=float) for r in regressors]
        dummies = [np.ones(len(g))]
        names = list(regressors) + ["const"]
        for t in periods[1:]:
            dummies.append((g[period_col] == t).to_numpy(dtype=float))
            names.append(f"period_{t}")
        x = np.column_stack(x_cols + dummies)
        beta, se, _ = ols(g[y_col].to_numpy(dtype=float), x)
        for name, b, s in zip(names, beta, se):
            out.append({"component": component, "person_type": ptype,
                        "term": name, "coef": float(b), "se": float(s)})
    return pd.DataFrame(out)


@dataclass(frozen=True)
class WelfareGapReport:
    male: float
    female: float
    pooled: float
    by_type: dict  # person type name -> welfare level
    components: tuple

    def to_rows(self, period: str = "") -> list[dict]:
        rows = [
            {"metric": "welfare_gap_male", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.male},
            {"metric": "welfare_gap_female", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.female},
            {"metric": "welfare_gap_pooled", "period": period, "city_id": "NATIONAL",
             "person_type": "", "value": self.pooled},
        ]
        for pt, v in self.by_type.items():
            rows.append({"metric": "welfare_level", "period": period,
                         "city_id": "NATIONAL", "person_type": pt, "value": v})
        return rows


ALL_WELFARE_COMPONENTS = ("wage", "rent", "pecuniary", "nonpecuniary", "transfers")


def college_welfare_gap(
    state: EquilibriumState,
    prefs: PreferenceParams,
    components: tuple = ALL_WELFARE_COMPONENTS,
) -> WelfareGapReport:
    """Welfare gap between college and non-college types in log points.

    Welfare per type averages, over that type's own location distribution,
    the selected components: log single wage, -zeta log rent, and the
    probability-weighted marital value pieces.  Idiosyncratic-taste
    expectation terms are policy-invariant under the logit and excluded.
    """
    w_single, _ = wages_by_type(state, prefs)
    wf = np.zeros((state.n_cities, 4))
    if "wage" in components:
        wf += np.log(w_single)
    if "rent" in components:
        wf += -prefs.zeta * np.log(state.rent)[:, None]
    comps = marital_value_components(state, prefs)
    for name in ("pecuniary", "nonpecuniary", "transfers"):
        if name in components:
            wf += comps[name]
    levels = (state.location_probs * wf).sum(axis=0)  # (4,)

    nat = state.populations.sum(axis=0)
    pooled_h = (nat[0] * levels[0] + nat[2] * levels[2]) / (nat[0] + nat[2])
    pooled_l = (nat[1] * levels[1] + nat[3] * levels[3]) / (nat[1] + nat[3])
    return WelfareGapReport(
        male=float(levels[0] - levels[1]),
        female=float(levels[2] - levels[3]),
        pooled=float(pooled_h - pooled_l),
        by_type={pt.name: float(levels[k]) for k, pt in enumerate(PERSON_TYPES)},
        components=tuple(components),
    )
