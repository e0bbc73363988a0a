"""Parameter recovery from city-panel data.

Four estimators, run in this order: labor demand (2SLS on relative wage
changes, shift-share instruments interacted with land constraints),
housing supply (2SLS on rent changes), marriage (GMM on log choice-
probability ratios with concentrated city-level transfers), and location
choice (two-step logit share regression, 2SLS).  Technology levels are
backed out city by city afterwards.

Transfers and the gender split of the nonpecuniary utilities are only
separately identified up to a per-cell level: the estimator pins that
level by requiring fitted scaled transfers to average zero across cities
within each (couple type, period).  With a single city no such
normalization is possible and the flat direction is detected and
reported instead of silently resolved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize

from .core import COUPLE_TYPES, HUSBAND_OF, PERSON_TYPES, SKILL_IDX, WIFE_OF
from .labor_housing import invert_technology

__all__ = [
    "CityPanel",
    "PanelValidationError",
    "IVResult",
    "OLSResult",
    "LaborDemandResult",
    "HousingSupplyResult",
    "MarriageEstimates",
    "LocationChoiceResult",
    "Estimates",
    "ols",
    "two_sls",
    "bartik_shocks",
    "calibrate_effective_labor",
    "effective_labor_panel",
    "estimate_labor_demand",
    "recover_technology",
    "estimate_housing_supply",
    "estimate_marriage",
    "estimate_location_choice",
    "estimate_all",
    "WAGE_COLUMNS",
    "CORE_COLUMNS",
    "INDUSTRY_COLUMNS",
    "NATIONAL_COLUMNS",
]

_PT = [p.name for p in PERSON_TYPES]
_CT = [c.name for c in COUPLE_TYPES]
WAGE_COLUMNS = [f"wage_single_{p}" for p in _PT] + [f"wage_married_{p}" for p in _PT]
CORE_COLUMNS = (
    ["city_id", "period"]
    + [f"pop_{p}" for p in _PT]
    + WAGE_COLUMNS
    + ["rent"]
    + [f"mar_{c}" for c in _CT]
    + [f"single_{p}" for p in _PT]
    + ["amenity_obs", "chi_geo", "chi_reg"]
)
INDUSTRY_COLUMNS = ["city_id", "period", "industry_id", "emp_H", "emp_L"]
NATIONAL_COLUMNS = ["industry_id", "period", "wage_H", "wage_L"]


class PanelValidationError(ValueError):
    pass


@dataclass
class CityPanel:
    """Observed multi-period city data.

    core: one row per (city, period) with populations, wages by type and
    marital status, rent, marriage cells, singles, amenity and land
    indices.  industry: employment by (city, industry, period) and skill.
    national_wages: wage levels by (industry, period) and skill.
    """

    core: pd.DataFrame
    industry: pd.DataFrame | None = None
    national_wages: pd.DataFrame | None = None
    base_period: str | None = None

    def __post_init__(self):
        self.core = self.core.copy()
        self.core["city_id"] = self.core["city_id"].astype(str)
        self.core["period"] = self.core["period"].astype(str)
        self.core = self.core.sort_values(["period", "city_id"]).reset_index(drop=True)
        if self.base_period is None:
            self.base_period = min(self.core["period"].unique())
        self.base_period = str(self.base_period)
        if self.industry is not None:
            self.industry = self.industry.copy()
            self.industry["city_id"] = self.industry["city_id"].astype(str)
            self.industry["period"] = self.industry["period"].astype(str)
        if self.national_wages is not None:
            self.national_wages = self.national_wages.copy()
            self.national_wages["period"] = self.national_wages["period"].astype(str)
        self.validate()

    def validate(self):
        missing = [c for c in CORE_COLUMNS if c not in self.core.columns]
        if missing:
            raise PanelValidationError(f"core panel missing columns: {missing}")
        if self.base_period not in set(self.core["period"]):
            raise PanelValidationError(
                f"base period {self.base_period!r} absent from panel periods "
                f"{sorted(set(self.core['period']))}"
            )
        counts = [f"pop_{p}" for p in _PT] + [f"mar_{c}" for c in _CT] + [
            f"single_{p}" for p in _PT
        ]
        for col in counts:
            if (self.core[col] < 0).any():
                bad = self.core.loc[self.core[col] < 0, "city_id"].iloc[0]
                raise PanelValidationError(f"negative count in {col} (city {bad})")
        # marriage cells cannot exceed either side's population
        for c in COUPLE_TYPES:
            h = f"pop_M{c.husband_skill.value}"
            w = f"pop_F{c.wife_skill.value}"
            cell = self.core[f"mar_{c.name}"]
            over = (cell > self.core[h] + 1e-9) | (cell > self.core[w] + 1e-9)
            if over.any():
                bad = self.core.loc[over, "city_id"].iloc[0]
                raise PanelValidationError(
                    f"mar_{c.name} exceeds a side's population (city {bad})"
                )

    @property
    def periods(self) -> list[str]:
        return sorted(self.core["period"].unique())

    @property
    def cities(self) -> list[str]:
        return sorted(self.core["city_id"].unique())

    def rows(self, period: str) -> pd.DataFrame:
        g = self.core[self.core["period"] == period]
        return g.sort_values("city_id").reset_index(drop=True)


# ----------------------------------------------------------------------
# regression engines


@dataclass(frozen=True)
class OLSResult:
    beta: np.ndarray
    se: np.ndarray
    residuals: np.ndarray


def ols(y: np.ndarray, x: np.ndarray, cluster=None):
    """OLS with heteroskedasticity-robust (or cluster-robust) SEs.

    Returns (beta, se, residuals).
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    xtx = x.T @ x
    if np.linalg.matrix_rank(xtx) < x.shape[1]:
        raise np.linalg.LinAlgError("rank-deficient design matrix")
    xtx_inv = np.linalg.inv(xtx)
    beta = xtx_inv @ (x.T @ y)
    u = y - x @ beta
    meat = _meat(x, u, cluster)
    v = xtx_inv @ meat @ xtx_inv
    return beta, np.sqrt(np.maximum(np.diag(v), 0.0)), u


def _meat(x, u, cluster):
    if cluster is None:
        return (x * u[:, None] ** 2).T @ x
    meat = np.zeros((x.shape[1], x.shape[1]))
    for g in np.unique(cluster):
        sel = cluster == g
        s = x[sel].T @ u[sel]
        meat += np.outer(s, s)
    return meat


@dataclass(frozen=True)
class IVResult:
    beta: np.ndarray  # endogenous coefficients first, then exogenous
    se: np.ndarray
    names: tuple
    first_stage_F: np.ndarray  # one per endogenous regressor
    residuals: np.ndarray
    weak: bool


def two_sls(
    y: np.ndarray,
    endog: np.ndarray,
    exog: np.ndarray | None,
    instruments: np.ndarray,
    names: tuple | None = None,
    cluster=None,
) -> IVResult:
    """Two-stage least squares with robust SEs and first-stage F stats.

    endog (n, k1) are instrumented by `instruments` (n, q), q >= k1;
    exog (n, k2) enter both stages.  A first-stage F below 10 sets the
    weak flag and warns, but does not fail.
    """
    y = np.asarray(y, dtype=float)
    endog = np.atleast_2d(np.asarray(endog, dtype=float))
    if endog.shape[0] == 1 and y.shape[0] != 1:
        endog = endog.T
    z_ex = np.atleast_2d(np.asarray(instruments, dtype=float))
    if z_ex.shape[0] == 1 and y.shape[0] != 1:
        z_ex = z_ex.T
    if exog is None:
        exog = np.empty((len(y), 0))
    exog = np.asarray(exog, dtype=float)
    if z_ex.shape[1] < endog.shape[1]:
        raise ValueError("need at least as many instruments as endogenous regressors")

    x = np.hstack([endog, exog])
    z = np.hstack([z_ex, exog])
    ztz = z.T @ z
    if np.linalg.matrix_rank(ztz) < z.shape[1]:
        raise np.linalg.LinAlgError("instrument matrix is rank deficient")
    ztz_inv = np.linalg.inv(ztz)
    pz_x = z @ (ztz_inv @ (z.T @ x))
    xpx = x.T @ pz_x
    if np.linalg.matrix_rank(xpx) < x.shape[1]:
        raise np.linalg.LinAlgError("projected design is rank deficient")
    xpx_inv = np.linalg.inv(xpx)
    beta = xpx_inv @ (pz_x.T @ y)
    u = y - x @ beta
    meat = _meat(pz_x, u, cluster)
    v = xpx_inv @ meat @ xpx_inv
    se = np.sqrt(np.maximum(np.diag(v), 0.0))

    f_stats = np.array([
        _first_stage_f(endog[:, j], z_ex, exog, cluster) for j in range(endog.shape[1])
    ])
    weak = bool(np.any(f_stats < 10.0))
    if weak:
        warnings.warn(
            f"weak first stage: min F = {f_stats.min():.2f} < 10", stacklevel=2
        )
    if names is None:
        names = tuple(
            [f"endog_{j}" for j in range(endog.shape[1])]
            + [f"exog_{j}" for j in range(exog.shape[1])]
        )
    return IVResult(
        beta=beta, se=se, names=tuple(names), first_stage_F=f_stats,
        residuals=u, weak=weak,
    )


def _first_stage_f(d, z_ex, exog, cluster):
    """Robust Wald F for the excluded instruments in one first stage."""
    if exog.shape[1] == 0:
        exog = np.ones((len(d), 1))
    x = np.hstack([z_ex, exog])
    try:
        beta, se, u = ols(d, x, cluster)
    except np.linalg.LinAlgError:
        return np.nan
    xtx_inv = np.linalg.inv(x.T @ x)
    v = xtx_inv @ _meat(x, u, cluster) @ xtx_inv
    q = z_ex.shape[1]
    b = beta[:q]
    vv = v[:q, :q]
    try:
        stat = float(b @ np.linalg.solve(vv, b)) / q
    except np.linalg.LinAlgError:
        return np.nan
    return stat


# ----------------------------------------------------------------------
# shift-share instruments


def bartik_shocks(panel: CityPanel, skill: str) -> pd.DataFrame:
    """Shift-share labor demand shocks per (city, period after base).

    Base-year industry employment shares weight leave-one-out national
    industry wage growth.  The national industry wage is treated as the
    employment-weighted mean of city wages, with the city's own
    contribution proxied by its skill price, so removing city m changes
    the growth rate it faces but nobody else's.
    """
    if panel.industry is None or panel.national_wages is None:
        raise PanelValidationError("industry and national wage files are required")
    if skill not in ("H", "L"):
        raise ValueError("skill must be 'H' or 'L'")
    emp_col = f"emp_{skill}"
    wage_col = f"wage_{skill}"
    t0 = panel.base_period

    ind = panel.industry
    base = ind[ind["period"] == t0]
    base_by_city = base.groupby("city_id")[emp_col].sum()
    if (base_by_city <= 0).any():
        bad = base_by_city.index[base_by_city <= 0][0]
        raise PanelValidationError(f"zero base-year employment in city {bad}")

    nat = panel.national_wages.set_index(["industry_id", "period"])[wage_col]
    tot_emp = ind.groupby(["industry_id", "period"])[emp_col].sum()
    city_wage = panel.core.set_index(["city_id", "period"])[f"wage_single_M{skill}"]

    def loo_log_wage(city, industry, period):
        w_nat = nat.loc[(industry, period)]
        e_tot = tot_emp.loc[(industry, period)]
        sel = (
            (ind["city_id"] == city)
            & (ind["industry_id"] == industry)
            & (ind["period"] == period)
        )
        e_city = float(ind.loc[sel, emp_col].sum())
        if e_tot - e_city <= 0:
            raise PanelValidationError(
                f"city {city} holds all of industry {industry} in {period}; "
                "leave-one-out wage undefined"
            )
        w_city = float(city_wage.loc[(city, period)])
        return np.log((w_nat * e_tot - w_city * e_city) / (e_tot - e_city))

    rows = []
    for city, g in base.groupby("city_id"):
        shares = g.set_index("industry_id")[emp_col] / base_by_city.loc[city]
        for period in panel.periods:
            if period == t0:
                continue
            shock = 0.0
            for industry, share in shares.items():
                if share == 0:
                    continue
                growth = loo_log_wage(city, industry, period) - loo_log_wage(
                    city, industry, t0
                )
                shock += share * growth
            rows.append({"city_id": city, "period": period, "shock": shock})
    return pd.DataFrame(rows).sort_values(["period", "city_id"]).reset_index(drop=True)


# ----------------------------------------------------------------------
# labor demand and technology


def calibrate_effective_labor(panel: CityPanel) -> pd.DataFrame:
    """Per-period (phi, delta) by skill from observed wage ratios.

    The female/male single wage ratio within a skill identifies phi; the
    married/single female ratio identifies delta.  City means are taken
    in logs.
    """
    rows = []
    for t in panel.periods:
        g = panel.rows(t)
        rec = {"period": t}
        for s in ("H", "L"):
            rec[f"phi_{s}"] = float(
                np.log(g[f"wage_single_F{s}"] / g[f"wage_single_M{s}"]).mean()
            )
            rec[f"delta_{s}"] = float(
                np.log(g[f"wage_married_F{s}"] / g[f"wage_single_F{s}"]).mean()
            )
        rows.append(rec)
    return pd.DataFrame(rows)


def effective_labor_panel(panel: CityPanel, calib: pd.DataFrame | None = None) -> pd.DataFrame:
    """Effective labor by skill per (city, period) from counts and the
    calibrated gender/marital shifters."""
    calib = calibrate_effective_labor(panel) if calib is None else calib
    cal = calib.set_index("period")
    rows = []
    for t in panel.periods:
        g = panel.rows(t)
        married = {
            "MH": g["mar_HH"] + g["mar_HL"],
            "ML": g["mar_LH"] + g["mar_LL"],
            "FH": g["mar_HH"] + g["mar_LH"],
            "FL": g["mar_HL"] + g["mar_LL"],
        }
        eff = {"H": 0.0, "L": 0.0}
        for p in _PT:
            s = p[1]
            if p[0] == "M":
                unit_single = unit_married = 1.0
            else:
                unit_single = np.exp(cal.loc[t, f"phi_{s}"])
                unit_married = np.exp(cal.loc[t, f"phi_{s}"] + cal.loc[t, f"delta_{s}"])
            eff[s] = eff[s] + g[f"single_{p}"] * unit_single + married[p] * unit_married
        for i in range(len(g)):
            rows.append({
                "city_id": g["city_id"].iloc[i], "period": t,
                "eff_H": float(eff["H"].iloc[i]), "eff_L": float(eff["L"].iloc[i]),
            })
    return pd.DataFrame(rows)


def _long_diff(panel: CityPanel, series: pd.DataFrame, col: str) -> pd.DataFrame:
    """Change of `col` relative to the base period, per (city, period)."""
    t0 = panel.base_period
    s = series.set_index(["city_id", "period"])[col]
    rows = []
    for t in panel.periods:
        if t == t0:
            continue
        for city in panel.cities:
            rows.append({
                "city_id": city, "period": t,
                "d": float(s.loc[(city, t)] - s.loc[(city, t0)]),
            })
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class LaborDemandResult:
    rho: float
    rho_se: float
    gamma: np.ndarray  # coefficients on the two shift-share controls
    first_stage_F: np.ndarray
    boundary_flag: bool  # rho at or below 0
    iv: IVResult


def estimate_labor_demand(panel: CityPanel) -> LaborDemandResult:
    """CES substitution parameter from relative wage and labor changes.

    2SLS of d ln(w_H/w_L) on d ln(L_H/L_L) with the two shift-share
    shocks as controls and their land-index interactions as excluded
    instruments; period intercepts included.  rho = 1 + slope.
    """
    eff = effective_labor_panel(panel)
    core = panel.core.copy()
    core["lw_ratio"] = np.log(core["wage_single_MH"] / core["wage_single_ML"])
    eff["ll_ratio"] = np.log(eff["eff_H"] / eff["eff_L"])

    dy = _long_diff(panel, core, "lw_ratio")
    dl = _long_diff(panel, eff, "ll_ratio")
    bh = bartik_shocks(panel, "H").rename(columns={"shock": "bh"})
    bl = bartik_shocks(panel, "L").rename(columns={"shock": "bl"})
    df = dy.rename(columns={"d": "dy"}).merge(
        dl.rename(columns={"d": "dl"}), on=["city_id", "period"]
    ).merge(bh, on=["city_id", "period"]).merge(bl, on=["city_id", "period"])
    land = panel.rows(panel.base_period).set_index("city_id")[["chi_geo", "chi_reg"]]
    df = df.join(land, on="city_id")

    period_dummies = _period_dummies(df["period"])
    exog = np.column_stack([df["bh"], df["bl"], period_dummies])
    instruments = np.column_stack([
        df["bh"] * df["chi_geo"], df["bh"] * df["chi_reg"],
        df["bl"] * df["chi_geo"], df["bl"] * df["chi_reg"],
    ])
    iv = two_sls(
        df["dy"].to_numpy(), df["dl"].to_numpy()[:, None], exog, instruments,
        names=("dlabor",) + ("bartik_H", "bartik_L")
        + tuple(f"period_{t}" for t in sorted(df["period"].unique())),
    )
    rho = 1.0 + iv.beta[0]
    return LaborDemandResult(
        rho=float(rho),
        rho_se=float(iv.se[0]),
        gamma=iv.beta[1:3].copy(),
        first_stage_F=iv.first_stage_F,
        boundary_flag=bool(rho <= 0),
        iv=iv,
    )


def _period_dummies(periods: pd.Series) -> np.ndarray:
    cats = sorted(periods.unique())
    return np.column_stack([(periods == t).to_numpy(dtype=float) for t in cats])


def recover_technology(panel: CityPanel, rho: float) -> pd.DataFrame:
    """City-period (alpha, A) backed out from wages and effective labor."""
    eff = effective_labor_panel(panel).set_index(["city_id", "period"])
    rows = []
    for _, r in panel.core.iterrows():
        e = eff.loc[(r["city_id"], r["period"])]
        alpha, a = invert_technology(
            float(r["wage_single_MH"]), float(r["wage_single_ML"]),
            np.array([e["eff_H"], e["eff_L"]]), rho,
        )
        rows.append({
            "city_id": r["city_id"], "period": r["period"],
            "alpha": float(alpha), "A": float(a),
        })
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------
# housing supply


@dataclass(frozen=True)
class HousingSupplyResult:
    psi: np.ndarray  # (psi0, psi1, psi2)
    psi_se: np.ndarray
    first_stage_F: np.ndarray
    iv: IVResult


def estimate_housing_supply(panel: CityPanel, zeta: float = 0.62) -> HousingSupplyResult:
    """Inverse supply elasticity parameters from rent and quantity changes.

    Housing quantity is built from the demand identity H = zeta*W/R; the
    three endogenous regressors (d ln H and its exp-land interactions)
    are instrumented by the shift-share shocks and their land
    interactions; period intercepts absorb the interest-rate drift.
    """
    core = panel.core.copy()
    income = sum(
        core[f"single_{p}"] * core[f"wage_single_{p}"]
        for p in _PT
    )
    married = {
        "MH": core["mar_HH"] + core["mar_HL"],
        "ML": core["mar_LH"] + core["mar_LL"],
        "FH": core["mar_HH"] + core["mar_LH"],
        "FL": core["mar_HL"] + core["mar_LL"],
    }
    for p in _PT:
        income = income + married[p] * core[f"wage_married_{p}"]
    core["log_qty"] = np.log(zeta * income / core["rent"])
    core["log_rent"] = np.log(core["rent"])

    dr = _long_diff(panel, core, "log_rent").rename(columns={"d": "dr"})
    dq = _long_diff(panel, core, "log_qty").rename(columns={"d": "dq"})
    bh = bartik_shocks(panel, "H").rename(columns={"shock": "bh"})
    bl = bartik_shocks(panel, "L").rename(columns={"shock": "bl"})
    df = dr.merge(dq, on=["city_id", "period"]).merge(
        bh, on=["city_id", "period"]
    ).merge(bl, on=["city_id", "period"])
    land = panel.rows(panel.base_period).set_index("city_id")[["chi_geo", "chi_reg"]]
    df = df.join(land, on="city_id")

    endog = np.column_stack([
        df["dq"],
        df["dq"] * np.exp(df["chi_geo"]),
        df["dq"] * np.exp(df["chi_reg"]),
    ])
    instruments = np.column_stack([
        df["bh"], df["bl"],
        df["bh"] * df["chi_geo"], df["bh"] * df["chi_reg"],
        df["bl"] * df["chi_geo"], df["bl"] * df["chi_reg"],
    ])
    exog = _period_dummies(df["period"])
    iv = two_sls(
        df["dr"].to_numpy(), endog, exog, instruments,
        names=("psi0", "psi1", "psi2")
        + tuple(f"period_{t}" for t in sorted(df["period"].unique())),
    )
    return HousingSupplyResult(
        psi=iv.beta[:3].copy(), psi_se=iv.se[:3].copy(),
        first_stage_F=iv.first_stage_F, iv=iv,
    )


# ----------------------------------------------------------------------
# marriage GMM


@dataclass(frozen=True)
class FlatDirectionReport:
    detected: bool
    n_flat: int
    smallest_singular_values: np.ndarray
    description: str


@dataclass
class MarriageEstimates:
    sigma_eps: float
    sigma_eps_se: float
    mu: dict  # period -> (4, 2) utility units
    mu_se: dict
    mu_tilde_sum: dict  # period -> (4,) identified per-couple sums (scaled)
    tau: pd.DataFrame  # city_id, period, tau_HH..tau_LL (utility units)
    objective: float
    n_moments: int
    normalization_active: bool
    flat_direction: FlatDirectionReport


def _marriage_cells(panel: CityPanel, chi: float, smoothing: float):
    """Per (city, period, couple type): summed log probability ratios and
    summed wage terms across the two orientations, plus their differences
    (female minus male)."""
    rows = []
    for t in panel.periods:
        g = panel.rows(t)
        cells = g[[f"mar_{c}" for c in _CT]].to_numpy(dtype=float) + smoothing
        singles = g[[f"single_{p}" for p in _PT]].to_numpy(dtype=float) + smoothing
        if smoothing == 0 and (np.any(cells <= 0) or np.any(singles <= 0)):
            raise PanelValidationError(
                f"empty marriage cells in period {t}; enable smoothing"
            )
        ws = g[[f"wage_single_{p}" for p in _PT]].to_numpy(dtype=float)
        wm = g[[f"wage_married_{p}" for p in _PT]].to_numpy(dtype=float)
        for c in range(4):
            h, w = HUSBAND_OF[c], WIFE_OF[c]
            d_m = np.log(cells[:, c]) - np.log(singles[:, h])
            d_f = np.log(cells[:, c]) - np.log(singles[:, w])
            income = wm[:, h] + wm[:, w]
            x_m = np.log(income) - np.log1p(chi) - np.log(ws[:, h])
            x_f = np.log(income) - np.log1p(chi) - np.log(ws[:, w])
            for i in range(len(g)):
                rows.append({
                    "city_id": g["city_id"].iloc[i], "period": t, "cell": c,
                    "d_sum": d_m[i] + d_f[i], "x_sum": x_m[i] + x_f[i],
                    "d_diff": d_f[i] - d_m[i], "x_diff": x_f[i] - x_m[i],
                    "d_m": d_m[i], "x_m": x_m[i],
                })
    return pd.DataFrame(rows)


def estimate_marriage(
    panel: CityPanel,
    chi: float = 0.7,
    smoothing: float = 0.5,
    n_starts: int = 5,
    weighting: str = "identity",
    seed: int = 0,
) -> MarriageEstimates:
    """GMM for the marital taste scale, nonpecuniary utilities, and
    transfers.

    The moment per (gender, own skill, spouse skill, city, period) equates
    the log probability ratio of that marriage option to the scaled sum of
    nonpecuniary utility, transfer, and the pecuniary term.  Given the
    scale and the per-couple utility sums, each city-period's transfers
    have a closed-form least-squares solution; the outer problem is solved
    quasi-Newton with multistart.  Optional second stage reweights moments
    by cell counts (diagonal inverse-variance proxy).

    smoothing adds the given count to every marriage and single cell
    before log shares are formed (set 0 for model-generated data).
    """
    df = _marriage_cells(panel, chi, smoothing)
    periods = panel.periods
    multi_city = len(panel.cities) >= 2
    weights = _marriage_weights(panel, smoothing) if weighting == "counts" else None

    # Outer parameters: log sigma_eps and, per (period, couple type), the
    # identified sum of the two orientations' scaled utilities.
    key = list(zip(df["period"], df["cell"]))
    groups = {k: np.flatnonzero([kk == k for kk in key]) for k in set(key)}
    group_list = sorted(groups)
    d_sum = df["d_sum"].to_numpy()
    x_sum = df["x_sum"].to_numpy()
    w_arr = np.ones(len(df)) if weights is None else weights

    def objective(theta):
        se = np.exp(theta[0])
        total = 0.0
        for gi, k in enumerate(group_list):
            idx = groups[k]
            r = d_sum[idx] - theta[1 + gi] - x_sum[idx] / se
            total += 0.5 * float((w_arr[idx] * r * r).sum())
        return total

    best = None
    rng = np.random.default_rng(seed)
    for s in range(n_starts):
        se0 = np.exp(rng.normal(np.log(2.0), 0.5)) if s else 2.0
        th0 = np.empty(1 + len(group_list))
        th0[0] = np.log(se0)
        for gi, k in enumerate(group_list):
            idx = groups[k]
            th0[1 + gi] = float(np.mean(d_sum[idx] - x_sum[idx] / se0))
        res = optimize.minimize(objective, th0, method="L-BFGS-B")
        if best is None or res.fun < best.fun:
            best = res
    theta = best.x.copy()
    # The concentrated objective is exactly quadratic in the inverse scale
    # once the per-group means are profiled out, so the optimum admits one
    # closed-form polish step to machine precision.
    dd = d_sum.copy()
    xx = x_sum.copy()
    for k in group_list:
        idx = groups[k]
        wsub = w_arr[idx]
        dd[idx] -= float((wsub * d_sum[idx]).sum() / wsub.sum())
        xx[idx] -= float((wsub * x_sum[idx]).sum() / wsub.sum())
    denom = float((w_arr * xx * dd).sum())
    if denom != 0:
        inv_se = denom and float((w_arr * xx * dd).sum()) / float((w_arr * xx * xx).sum())
        if inv_se > 0:
            theta[0] = -np.log(inv_se)
    for gi, k in enumerate(group_list):
        idx = groups[k]
        wsub = w_arr[idx]
        theta[1 + gi] = float(
            (wsub * (d_sum[idx] - x_sum[idx] / np.exp(theta[0]))).sum() / wsub.sum()
        )
    if objective(theta) > best.fun:
        theta = best.x
    sigma_eps = float(np.exp(theta[0]))
    mu_sums = {k: float(theta[1 + gi]) for gi, k in enumerate(group_list)}

    # Split each sum into male and female parts.  With several cities the
    # level convention is mean-zero fitted transfers per (cell, period);
    # with one city the split is not identified and the minimum-norm
    # (zero-transfer) point is reported together with the flat direction.
    d_diff = df["d_diff"].to_numpy()
    x_diff = df["x_diff"].to_numpy()
    mu_diffs = {}
    for k in group_list:
        idx = groups[k]
        mu_diffs[k] = float(np.mean(d_diff[idx] - x_diff[idx] / sigma_eps))

    mu, mu_tilde_sum = {}, {}
    for t in periods:
        arr = np.zeros((4, 2))
        sums = np.zeros(4)
        for c in range(4):
            s_sum = mu_sums[(t, c)]
            s_diff = mu_diffs[(t, c)]
            mt_male = (s_sum - s_diff) / 2.0
            mt_female = (s_sum + s_diff) / 2.0
            h, w = HUSBAND_OF[c], WIFE_OF[c]
            arr[h, SKILL_IDX[w]] = sigma_eps * mt_male
            arr[w, SKILL_IDX[h]] = sigma_eps * mt_female
            sums[c] = s_sum
        mu[t] = arr
        mu_tilde_sum[t] = sums

    tau_rows = []
    d_m = df["d_m"].to_numpy()
    x_m = df["x_m"].to_numpy()
    fitted_tau = np.empty(len(df))
    for k in group_list:
        t, c = k
        idx = groups[k]
        mt_male = (mu_sums[k] - mu_diffs[k]) / 2.0
        # male moment: d_m = mu_male - tau_tilde + x_m / sigma_eps
        fitted_tau[idx] = mt_male + x_m[idx] / sigma_eps - d_m[idx]
    df = df.assign(tau_tilde=fitted_tau)
    for (t, city), g in df.groupby(["period", "city_id"]):
        rec = {"city_id": city, "period": t}
        for c in range(4):
            val = g.loc[g["cell"] == c, "tau_tilde"]
            rec[f"tau_{_CT[c]}"] = float(sigma_eps * val.iloc[0])
        tau_rows.append(rec)
    tau = pd.DataFrame(tau_rows).sort_values(["period", "city_id"]).reset_index(drop=True)

    obj = objective(theta)
    flat = _identification_report(df, sigma_eps, group_list, groups, multi_city)
    sigma_se, mu_se = _marriage_sandwich(
        df, sigma_eps, mu_sums, mu_diffs, group_list, groups, periods
    )
    return MarriageEstimates(
        sigma_eps=sigma_eps,
        sigma_eps_se=sigma_se,
        mu=mu,
        mu_se=mu_se,
        mu_tilde_sum=mu_tilde_sum,
        tau=tau,
        objective=float(obj),
        n_moments=2 * len(df),
        normalization_active=multi_city,
        flat_direction=flat,
    )


def _marriage_weights(panel: CityPanel, smoothing: float) -> np.ndarray:
    """Diagonal weights proportional to couple-cell counts."""
    w = []
    for t in panel.periods:
        g = panel.rows(t)
        cells = g[[f"mar_{c}" for c in _CT]].to_numpy(dtype=float) + smoothing
        for c in range(4):
            w.extend(cells[:, c])
    w = np.asarray(w, dtype=float)
    order = _marriage_weight_order(panel)
    return w[order] / w.mean()


def _marriage_weight_order(panel):
    # _marriage_cells iterates (period, cell, city); weights above iterate
    # (period, city, cell).  Build the permutation between the two.
    n_c = len(panel.cities)
    order = []
    for ti in range(len(panel.periods)):
        base = ti * 4 * n_c
        for c in range(4):
            for i in range(n_c):
                order.append(base + i * 4 + c)
    return np.array(order)


def _identification_report(df, sigma_eps, group_list, groups, multi_city):
    """Singular-value diagnosis of the moment Jacobian in the full
    (sigma, mu by gender, tau by city) parameterization.

    When the cross-city mean-zero transfer normalization is active its
    constraint rows are appended, since they are part of the estimator.
    """
    n_cells = len(df)
    cities = sorted(df["city_id"].unique())
    city_ix = {c: i for i, c in enumerate(cities)}
    n_tau = len(cities) * len(group_list)
    # columns: sigma, then per group (mu_male, mu_female), then tau cells
    n_par = 1 + 2 * len(group_list) + n_tau
    jac = np.zeros((2 * n_cells + (len(group_list) if multi_city else 0), n_par))
    x_m = df["x_m"].to_numpy()
    x_f = (df["x_sum"] - df["x_m"]).to_numpy()
    for gi, k in enumerate(group_list):
        idx = groups[k]
        for row in idx:
            city = df["city_id"].iloc[row]
            tau_col = 1 + 2 * len(group_list) + gi * len(cities) + city_ix[city]
            # male moment: d_m - mu_m + tau - x_m/se
            jac[2 * row, 0] = x_m[row] / sigma_eps**2
            jac[2 * row, 1 + 2 * gi] = -1.0
            jac[2 * row, tau_col] = 1.0
            # female moment: d_f - mu_f - tau - x_f/se
            jac[2 * row + 1, 0] = x_f[row] / sigma_eps**2
            jac[2 * row + 1, 2 + 2 * gi] = -1.0
            jac[2 * row + 1, tau_col] = -1.0
    if multi_city:
        for gi in range(len(group_list)):
            r = 2 * n_cells + gi
            cols = 1 + 2 * len(group_list) + gi * len(cities)
            jac[r, cols:cols + len(cities)] = 1.0
    sv = np.linalg.svd(jac, compute_uv=False)
    tol = max(jac.shape) * np.finfo(float).eps * (sv[0] if sv.size else 1.0)
    rank = int(np.sum(sv > max(tol, 1e-10 * (sv[0] if sv.size else 1.0))))
    # the kernel includes every column beyond the rank, not only columns
    # whose singular value is listed (the Jacobian can be wide)
    n_flat = n_par - rank
    detected = n_flat > 0
    if detected:
        desc = (
            f"{n_flat} flat direction(s): within each couple cell, a common "
            "shift of the male utility, the female utility (opposite sign), "
            "and every city's transfer leaves all moments unchanged"
        )
    else:
        desc = "moment Jacobian has full column rank"
    return FlatDirectionReport(
        detected=detected,
        n_flat=n_flat,
        smallest_singular_values=sv[-min(5, sv.size):].copy(),
        description=desc,
    )


def _marriage_sandwich(df, sigma_eps, mu_sums, mu_diffs, group_list, groups, periods):
    """Plug-in sandwich SEs for (sigma_eps, per-cell sums and diffs),
    mapped by the delta method onto the reported mu."""
    n = len(df)
    k = 1 + 2 * len(group_list)
    d_sum = df["d_sum"].to_numpy()
    x_sum = df["x_sum"].to_numpy()
    d_diff = df["d_diff"].to_numpy()
    x_diff = df["x_diff"].to_numpy()

    # stacked estimating equations: per observation, the sum-equation
    # residual times its gradient (sigma FOC + per-group means), plus the
    # diff-equation mean conditions
    scores = np.zeros((n, k))
    grad = np.zeros((k, k))
    for gi, kk in enumerate(group_list):
        idx = groups[kk]
        r_sum = d_sum[idx] - mu_sums[kk] - x_sum[idx] / sigma_eps
        r_diff = d_diff[idx] - mu_diffs[kk] - x_diff[idx] / sigma_eps
        scores[idx, 0] = r_sum * x_sum[idx] / sigma_eps**2
        scores[idx, 1 + 2 * gi] = r_sum
        scores[idx, 2 + 2 * gi] = r_diff
        grad[0, 0] += float((x_sum[idx] * (2 * r_sum * -1 + x_sum[idx] / sigma_eps)).sum()) / sigma_eps**3
        grad[0, 1 + 2 * gi] = float((x_sum[idx]).sum()) / sigma_eps**2 * -1
        grad[1 + 2 * gi, 0] = float(x_sum[idx].sum()) / sigma_eps**2
        grad[1 + 2 * gi, 1 + 2 * gi] = -len(idx)
        grad[2 + 2 * gi, 0] = float(x_diff[idx].sum()) / sigma_eps**2
        grad[2 + 2 * gi, 2 + 2 * gi] = -len(idx)
    try:
        ginv = np.linalg.inv(grad)
        meat = scores.T @ scores
        v = ginv @ meat @ ginv.T
        var = np.maximum(np.diag(v), 0.0)
    except np.linalg.LinAlgError:
        var = np.full(k, np.nan)

    sigma_se = float(np.sqrt(var[0]) * sigma_eps) if np.isfinite(var[0]) else np.nan
    # reported mu = sigma_eps * (sum -/+ diff)/2; ignore the sigma_eps
    # covariance cross-terms beyond the plug-in level
    mu_se = {}
    for ti, t in enumerate(periods):
        arr = np.zeros((4, 2))
        for c in range(4):
            gi = group_list.index((t, c))
            v_sum = var[1 + 2 * gi]
            v_diff = var[2 + 2 * gi]
            se_half = sigma_eps * np.sqrt(v_sum + v_diff) / 2.0
            h, w = HUSBAND_OF[c], WIFE_OF[c]
            arr[h, SKILL_IDX[w]] = se_half
            arr[w, SKILL_IDX[h]] = se_half
        mu_se[t] = arr
    return sigma_se, mu_se


# ----------------------------------------------------------------------
# location choice


@dataclass(frozen=True)
class LocationChoiceResult:
    sigma_nu: float
    sigma_nu_se: float
    eta: float
    eta_se: float
    first_stage_F: np.ndarray
    reference_city: str
    a_hat: pd.DataFrame  # city_id, period, person_type, amenity residual
    iv: IVResult


def estimate_location_choice(
    panel: CityPanel,
    marriage: MarriageEstimates,
    zeta: float = 0.62,
    reference_city: str | None = None,
    smoothing: float = 0.5,
) -> LocationChoiceResult:
    """Location-taste scale and amenity weight from logit share changes.

    Step 1 turns observed location shares into relative log utilities
    against a reference city.  Step 2 runs 2SLS of their changes on the
    change in the marriage-step inclusive value (instrumented by the two
    shift-share shocks) and the observed amenity change, with type-period
    intercepts.  Residuals, scaled back, become the unobserved amenity
    draws per (city, period, type), normalized to zero in the reference
    city.
    """
    cities = panel.cities
    if reference_city is None:
        reference_city = cities[0]
    if reference_city not in cities:
        raise ValueError(f"unknown reference city {reference_city!r}")
    t0 = panel.base_period
    se_hat = marriage.sigma_eps

    # per (city, period, type): u (log share ratio), V (inclusive value)
    rec = {}
    for t in panel.periods:
        g = panel.rows(t)
        pops = g[[f"pop_{p}" for p in _PT]].to_numpy(dtype=float)
        shares = pops / pops.sum(axis=0, keepdims=True)
        cells = g[[f"mar_{c}" for c in _CT]].to_numpy(dtype=float) + smoothing
        singles = g[[f"single_{p}" for p in _PT]].to_numpy(dtype=float) + smoothing
        married_by_type = np.stack([
            cells[:, 0] + cells[:, 1],
            cells[:, 2] + cells[:, 3],
            cells[:, 0] + cells[:, 2],
            cells[:, 1] + cells[:, 3],
        ], axis=1)
        p_single = singles / (singles + married_by_type)
        ws = g[[f"wage_single_{p}" for p in _PT]].to_numpy(dtype=float)
        v_hat = np.log(ws) - zeta * np.log(g["rent"].to_numpy(dtype=float))[:, None] \
            - se_hat * np.log(p_single)
        ref = cities.index(reference_city)
        u_hat = np.log(shares) - np.log(shares[ref, :])[None, :]
        rec[t] = {
            "u": u_hat, "v": v_hat,
            "amen": g["amenity_obs"].to_numpy(dtype=float),
            "city": list(g["city_id"]),
        }

    bh = bartik_shocks(panel, "H").set_index(["city_id", "period"])["shock"]
    bl = bartik_shocks(panel, "L").set_index(["city_id", "period"])["shock"]

    rows_y, rows_endog, rows_amen, rows_z, dummy_keys = [], [], [], [], []
    for t in panel.periods:
        if t == t0:
            continue
        for ci, city in enumerate(rec[t]["city"]):
            for k in range(4):
                rows_y.append(rec[t]["u"][ci, k] - rec[t0]["u"][ci, k])
                rows_endog.append(rec[t]["v"][ci, k] - rec[t0]["v"][ci, k])
                rows_amen.append(rec[t]["amen"][ci] - rec[t0]["amen"][ci])
                rows_z.append([bh.loc[(city, t)], bl.loc[(city, t)]])
                dummy_keys.append((t, k))
    uniq = sorted(set(dummy_keys))
    dummies = np.column_stack([
        np.array([1.0 if dk == u else 0.0 for dk in dummy_keys]) for u in uniq
    ])
    exog = np.column_stack([np.array(rows_amen), dummies])
    iv = two_sls(
        np.array(rows_y), np.array(rows_endog)[:, None], exog, np.array(rows_z),
        names=("dV", "damenity") + tuple(f"fe_{t}_{k}" for t, k in uniq),
    )
    beta1, beta2 = iv.beta[0], iv.beta[1]
    if beta1 == 0:
        raise ZeroDivisionError("inclusive-value coefficient is zero")
    sigma_nu = 1.0 / beta1
    eta = beta2 / beta1
    # delta method from (beta1, beta2)
    sigma_nu_se = float(iv.se[0] / beta1**2)
    eta_se = float(np.hypot(iv.se[1] / beta1, iv.se[0] * beta2 / beta1**2))

    a_rows = []
    for t in panel.periods:
        r = rec[t]
        a_val = sigma_nu * r["u"] - (r["v"] + eta * r["amen"][:, None])
        a_val = a_val - a_val[cities.index(reference_city), :][None, :]
        for ci, city in enumerate(r["city"]):
            for k, p in enumerate(_PT):
                a_rows.append({
                    "city_id": city, "period": t, "person_type": p,
                    "a": float(a_val[ci, k]),
                })
    return LocationChoiceResult(
        sigma_nu=float(sigma_nu),
        sigma_nu_se=sigma_nu_se,
        eta=float(eta),
        eta_se=eta_se,
        first_stage_F=iv.first_stage_F,
        reference_city=reference_city,
        a_hat=pd.DataFrame(a_rows),
        iv=iv,
    )


# ----------------------------------------------------------------------
# everything at once


@dataclass
class Estimates:
    labor: LaborDemandResult
    housing: HousingSupplyResult
    marriage: MarriageEstimates
    location: LocationChoiceResult
    technology: pd.DataFrame
    calibration: pd.DataFrame  # per-period phi/delta

    def summary(self) -> dict:
        return {
            "rho": self.labor.rho,
            "rho_se": self.labor.rho_se,
            "elasticity_of_substitution": 1.0 / (1.0 - self.labor.rho),
            "psi": list(map(float, self.housing.psi)),
            "psi_se": list(map(float, self.housing.psi_se)),
            "sigma_eps": self.marriage.sigma_eps,
            "sigma_eps_se": self.marriage.sigma_eps_se,
            "sigma_nu": self.location.sigma_nu,
            "sigma_nu_se": self.location.sigma_nu_se,
            "eta": self.location.eta,
            "eta_se": self.location.eta_se,
        }


def estimate_all(
    panel: CityPanel,
    zeta: float = 0.62,
    chi: float = 0.7,
    smoothing: float = 0.5,
    reference_city: str | None = None,
    seed: int = 0,
) -> Estimates:
    """Run the full estimation pipeline on one panel."""
    labor = estimate_labor_demand(panel)
    housing = estimate_housing_supply(panel, zeta=zeta)
    marriage = estimate_marriage(panel, chi=chi, smoothing=smoothing, seed=seed)
    location = estimate_location_choice(
        panel, marriage, zeta=zeta, reference_city=reference_city,
        smoothing=smoothing,
    )
    technology = recover_technology(panel, labor.rho)
    calibration = calibrate_effective_labor(panel)
    return Estimates(
        labor=labor, housing=housing, marriage=marriage,
        location=location, technology=technology, calibration=calibration,
    )
