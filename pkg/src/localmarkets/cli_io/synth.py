"""Synthetic economies, microdata simulation, and panel assembly.

Randomness runs through counter-based Philox generators keyed by the
64-bit seed and a per-purpose stream id, so draws are reproducible and
independent of generation order.  Parameter defaults are the package's
standard calibration; dispersion knobs shape the cross-city spread of
primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from ..core import (
    COUPLE_TYPES,
    HUSBAND_OF,
    PERSON_TYPES,
    SKILL_IDX,
    WIFE_OF,
    CityPrimitives,
    EconomyPrimitives,
    EquilibriumState,
    HousingElasticityParams,
    PreferenceParams,
    validate_economy,
)
from ..estimation import CityPanel
from ..labor_housing import effective_labor_units
from ..marriage import (
    choice_probs_from_options,
    clear_markets,
    option_values_from_wages,
)
from ..spatial_eq import SolverOptions, solve_equilibrium

__all__ = [
    "SyntheticSpec",
    "MU_DEFAULTS",
    "PHI_DEFAULTS",
    "DELTA_DEFAULTS",
    "generate_synthetic_economy",
    "generate_marriage_panel",
    "generate_estimation_inputs",
    "simulate_micro",
    "panel_from_micro",
    "panel_from_state",
]

_PT = [p.name for p in PERSON_TYPES]
_CT = [c.name for c in COUPLE_TYPES]

EULER_GAMMA = 0.5772156649015329

# Default nonpecuniary utility tables by period label.
MU_DEFAULTS = {
    "1980": np.array([
        [0.558, 0.663],
        [0.101, 0.832],
        [-0.110, -0.132],
        [-0.400, 0.204],
    ]),
    "1990": np.array([
        [0.478, 0.556],
        [-0.100, 0.560],
        [-0.075, 0.103],
        [-0.474, 0.287],
    ]),
    "2000": np.array([
        [0.445, 0.525],
        [-0.088, 0.555],
        [0.026, 0.196],
        [-0.534, 0.201],
    ]),
}

# Gender wage shifter and married-female discount by period (H, L); these
# are generator defaults shaping a narrowing gender gap, not estimates.
PHI_DEFAULTS = {"1980": (-0.35, -0.40), "1990": (-0.28, -0.34), "2000": (-0.20, -0.28)}
DELTA_DEFAULTS = {"1980": (-0.20, -0.30), "1990": (-0.15, -0.24), "2000": (-0.10, -0.18)}
KAPPA_DEFAULTS = {"1980": 0.08, "1990": 0.07, "2000": 0.06}
# college shares (male, female) by period
EDUCATION_DEFAULTS = {"1980": (0.20, 0.15), "1990": (0.25, 0.23), "2000": (0.28, 0.305)}


def symmetrize_mu(mu: np.ndarray) -> np.ndarray:
    """Equalize the male and female nonpecuniary supermodularity cores.

    Marriage data pin down only the per-couple sum of the two spouses'
    utilities; the gender split of the core is a normalization.  Cleared
    transfers satisfy, in every market, tau(HH) - tau(HL) - tau(LH) +
    tau(LL) = (male core - female core) / 2, so the mean-zero transfer
    convention is attainable exactly iff the two cores are equal.  The
    default tables obey this up to their 3-decimal rounding; this applies
    the sub-rounding correction (total core unchanged).
    """
    mu = np.asarray(mu, dtype=float).copy()
    sign = np.array([1.0, -1.0, -1.0, 1.0])  # HH, HL, LH, LL
    core_m = sum(
        sign[c] * mu[HUSBAND_OF[c], SKILL_IDX[WIFE_OF[c]]] for c in range(4)
    )
    core_f = sum(
        sign[c] * mu[WIFE_OF[c], SKILL_IDX[HUSBAND_OF[c]]] for c in range(4)
    )
    d = (core_m - core_f) / 8.0
    for c in range(4):
        mu[HUSBAND_OF[c], SKILL_IDX[WIFE_OF[c]]] -= sign[c] * d
        mu[WIFE_OF[c], SKILL_IDX[HUSBAND_OF[c]]] += sign[c] * d
    return mu


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for synthetic economy generation."""

    n_cities: int = 10
    population_scale: float = 200.0
    n_periods: int = 2
    n_micro_draws: int = 0
    # cross-city dispersion of primitives
    productivity_sigma: float = 0.12
    productivity_trend: float = 0.10
    alpha_mean: float = 0.46
    alpha_sigma: float = 0.05
    cc_sigma: float = 0.10
    amenity_obs_sigma: float = 0.40
    amenity_obs_drift_sigma: float = 0.20
    amenity_unobs_sigma: float = 0.25
    # national parameters
    rho: float = 0.577
    psi: tuple = (-0.001, 0.015, 0.051)
    sigma_eps: float = 2.728
    sigma_nu: float = 7.072
    eta: float = 0.085
    zeta: float = 0.62
    chi: float = 0.7

    def __post_init__(self):
        if self.n_cities < 1:
            raise ValueError("need at least one city")
        if not (1 <= self.n_periods <= 3):
            raise ValueError("n_periods must be 1, 2, or 3")

    def period_labels(self) -> list[str]:
        return {1: ["1980"], 2: ["1980", "2000"], 3: ["1980", "1990", "2000"]}[
            self.n_periods
        ]


def _rng(seed: int, stream: int) -> np.random.Generator:
    """Philox generator on an independent (seed, stream) key."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)])
    return np.random.Generator(np.random.Philox(key=key))


def _prefs_for(spec: SyntheticSpec, label: str) -> PreferenceParams:
    return PreferenceParams(
        sigma_eps=spec.sigma_eps,
        sigma_nu=spec.sigma_nu,
        eta=spec.eta,
        zeta=spec.zeta,
        chi=spec.chi,
        mu=MU_DEFAULTS[label],
        phi=np.array(PHI_DEFAULTS[label]),
        delta=np.array(DELTA_DEFAULTS[label]),
    )


def _national_population(spec: SyntheticSpec, label: str) -> np.ndarray:
    mh, fh = EDUCATION_DEFAULTS[label]
    half = spec.population_scale / 2.0
    return np.array([half * mh, half * (1 - mh), half * fh, half * (1 - fh)])


def generate_synthetic_economy(
    spec: SyntheticSpec, seed: int
) -> list[EconomyPrimitives]:
    """Draw one economy per period; deterministic given (spec, seed).

    City primitives: log-normal productivity and construction costs,
    uniform land indices on [0, 1], normal amenities.  Later periods keep
    the same cities, drift productivity upward (faster where the base
    productivity draw was higher), move the observed amenity by a random
    step, and shift the national education distribution.
    """
    m = spec.n_cities
    r_prod = _rng(seed, 1)
    r_land = _rng(seed, 2)
    r_amen = _rng(seed, 3)
    r_alpha = _rng(seed, 4)
    r_cc = _rng(seed, 5)
    r_drift = _rng(seed, 6)

    base_prod = r_prod.normal(0.0, spec.productivity_sigma, size=m)
    alpha = np.clip(
        r_alpha.normal(spec.alpha_mean, spec.alpha_sigma, size=m), 0.25, 0.75
    )
    cc = np.exp(r_cc.normal(0.0, spec.cc_sigma, size=m))
    land_geo = r_land.uniform(0.0, 1.0, size=m)
    land_reg = r_land.uniform(0.0, 1.0, size=m)
    amen_obs = r_amen.normal(0.0, spec.amenity_obs_sigma, size=m)
    amen_unobs = r_amen.normal(0.0, spec.amenity_unobs_sigma, size=(m, 4))
    housing = HousingElasticityParams(*spec.psi)

    labels = spec.period_labels()
    econs = []
    for ti, label in enumerate(labels):
        if ti == 0:
            log_a = base_prod
            a_obs = amen_obs
        else:
            # high-productivity cities grow faster, with a small shock
            log_a = (
                base_prod
                + ti * spec.productivity_trend * (1.0 + base_prod / max(spec.productivity_sigma, 1e-9) * 0.3)
                + r_drift.normal(0.0, 0.02, size=m)
            )
            a_obs = amen_obs + r_drift.normal(
                0.0, spec.amenity_obs_drift_sigma, size=m
            )
        cities = [
            CityPrimitives(
                city_id=f"city{i:03d}",
                productivity=float(np.exp(log_a[i])),
                skill_share=float(alpha[i]),
                construction_cost=float(cc[i]),
                land_unavail=float(land_geo[i]),
                land_reg=float(land_reg[i]),
                amenity_obs=float(a_obs[i]),
                amenity_unobs=amen_unobs[i],
                interest_rate=KAPPA_DEFAULTS[label],
            )
            for i in range(m)
        ]
        econ = EconomyPrimitives(
            cities=tuple(cities),
            national_population=_national_population(spec, label),
            tech_rho=spec.rho,
            housing=housing,
            prefs=_prefs_for(spec, label),
            period_label=label,
        )
        bad = validate_economy(econ)
        if bad:
            raise RuntimeError(f"generated economy violates invariants: {bad}")
        econs.append(econ)
    return econs


# ----------------------------------------------------------------------
# analytic panel construction


def panel_from_state(
    econ_states,
    industry: pd.DataFrame | None = None,
    national_wages: pd.DataFrame | None = None,
) -> CityPanel:
    """Exact city panel from solved states: probabilities times masses.

    No sampling; cells satisfy the model equations to solver tolerance,
    so estimator round trips on this panel are noiseless.
    """
    rows = []
    for econ, state in econ_states:
        prefs = econ.prefs
        unit_s, unit_m = effective_labor_units(prefs)
        sp = np.stack([state.wage_H, state.wage_L], axis=1)
        w_single = sp[:, SKILL_IDX] * unit_s
        w_married = sp[:, SKILL_IDX] * unit_m
        for i, cid in enumerate(state.city_ids):
            rec = {"city_id": cid, "period": state.period_label}
            for k, p in enumerate(_PT):
                rec[f"pop_{p}"] = float(state.populations[i, k])
                rec[f"single_{p}"] = float(state.singles[i, k])
                rec[f"wage_single_{p}"] = float(w_single[i, k])
                rec[f"wage_married_{p}"] = float(w_married[i, k])
            for c, name in enumerate(_CT):
                rec[f"mar_{name}"] = float(state.couples[i, c])
            rec["rent"] = float(state.rent[i])
            city = econ.cities[i]
            rec["amenity_obs"] = city.amenity_obs
            rec["chi_geo"] = city.land_unavail
            rec["chi_reg"] = city.land_reg
            rows.append(rec)
    return CityPanel(
        core=pd.DataFrame(rows), industry=industry, national_wages=national_wages
    )


# ----------------------------------------------------------------------
# marriage-only panel with a known transfer field


def generate_marriage_panel(
    n_cities: int = 12,
    seed: int = 0,
    periods: tuple = ("1980", "2000"),
    sigma_eps: float = 2.728,
    chi: float = 0.7,
    zeta: float = 0.62,
    tune_zero_mean: bool = True,
    symmetrize: bool = True,
):
    """City panel of cleared marriage markets with known parameters.

    Wages, rents, and populations are drawn per city; transfers come from
    actually clearing each market, so one couple count is consistent with
    both orientations' choice probabilities.  Transfer levels are only
    identified up to the estimator's convention (scaled transfers average
    zero across cities per couple type and period), so with
    tune_zero_mean the populations are adjusted until the cleared
    transfers satisfy that convention exactly; the generating utilities
    (gender cores symmetrized, see symmetrize_mu) are then recoverable as
    stated.  Returns (panel, truth dict).
    """
    rng = _rng(seed, 101)
    rows = []
    truth_tau = []
    mu_by_period = {}
    for t in periods:
        mu = symmetrize_mu(MU_DEFAULTS[t]) if symmetrize else MU_DEFAULTS[t]
        mu_by_period[t] = mu
        prefs = PreferenceParams(
            sigma_eps=sigma_eps, sigma_nu=7.072, eta=0.085, zeta=zeta, chi=chi,
            mu=mu, phi=np.array(PHI_DEFAULTS[t]), delta=np.array(DELTA_DEFAULTS[t]),
        )
        sp = np.exp(rng.normal(np.log(2.2), 0.25, size=(n_cities, 1))) * np.array(
            [[1.0, 0.45]]
        ) * np.exp(rng.normal(0.0, 0.10, size=(n_cities, 2)))
        rent = np.exp(rng.normal(0.0, 0.3, size=n_cities))
        pops0 = np.exp(rng.normal(np.log(25.0), 0.35, size=(n_cities, 4)))

        unit_s, unit_m = effective_labor_units(prefs)
        w_single = sp[:, SKILL_IDX] * unit_s
        w_married = sp[:, SKILL_IDX] * unit_m
        half = n_cities // 2

        def clear_at(x):
            pops = pops0.copy()
            if x is not None:
                # x: log population shifts, one per person type and city
                # group; pure rescaling of a whole market is a null
                # direction of the transfer map, so steps use a
                # pseudo-inverse
                pops[:half, :] *= np.exp(np.clip(x[:4], -3, 3))[None, :]
                pops[half:, :] *= np.exp(np.clip(x[4:], -3, 3))[None, :]
            tau, probs, _, _, _ = clear_markets(
                pops, None, rent, prefs, tol=1e-12,
                wage_matrices=(w_single, w_married),
            )
            return pops, tau, probs

        if tune_zero_mean and n_cities >= 2:
            x = np.zeros(8)

            def mean_tau(xv):
                _, tau, _ = clear_at(xv)
                return tau.mean(axis=0) / sigma_eps

            g = mean_tau(x)
            for _ in range(60):
                if np.max(np.abs(g)) < 1e-11:
                    break
                jac = np.empty((4, 8))
                h = 1e-5
                for j in range(8):
                    xp = x.copy()
                    xp[j] += h
                    jac[:, j] = (mean_tau(xp) - g) / h
                step = np.clip(-np.linalg.pinv(jac, rcond=1e-9) @ g, -0.5, 0.5)
                norm = np.linalg.norm(g)
                for scale in (1.0, 0.5, 0.25, 0.1):
                    g_new = mean_tau(x + scale * step)
                    # near the root the map is almost linear; accept full
                    # steps once the residual is small
                    if np.linalg.norm(g_new) < norm or norm < 1e-3:
                        x = x + scale * step
                        g = g_new
                        break
                else:
                    raise RuntimeError(
                        f"transfer-mean tuning stalled for period {t} "
                        f"at {np.max(np.abs(g)):.2e}"
                    )
            else:
                raise RuntimeError(f"transfer-mean tuning failed for period {t}")
            pops, tau, probs = clear_at(x)
        else:
            pops, tau, probs = clear_at(None)

        truth_tau.append(pd.DataFrame({
            "city_id": [f"city{i:03d}" for i in range(n_cities)],
            "period": t,
            **{f"tau_{_CT[c]}": tau[:, c] for c in range(4)},
        }))
        for i in range(n_cities):
            rec = {"city_id": f"city{i:03d}", "period": t}
            for k, p in enumerate(_PT):
                rec[f"pop_{p}"] = float(pops[i, k])
                rec[f"single_{p}"] = float(pops[i, k] * probs[i, k, 2])
                rec[f"wage_single_{p}"] = float(w_single[i, k])
                rec[f"wage_married_{p}"] = float(w_married[i, k])
            for c, name in enumerate(_CT):
                h = HUSBAND_OF[c]
                rec[f"mar_{name}"] = float(
                    pops[i, h] * probs[i, h, SKILL_IDX[WIFE_OF[c]]]
                )
            rec["rent"] = float(rent[i])
            rec["amenity_obs"] = 0.0
            rec["chi_geo"] = 0.0
            rec["chi_reg"] = 0.0
            rows.append(rec)
    panel = CityPanel(core=pd.DataFrame(rows))
    truth = {
        "sigma_eps": sigma_eps,
        "mu": mu_by_period,
        "tau": pd.concat(truth_tau, ignore_index=True),
        "chi": chi,
    }
    return panel, truth


# ----------------------------------------------------------------------
# full estimation inputs from solved equilibria


def generate_estimation_inputs(
    spec: SyntheticSpec,
    seed: int,
    n_industries: int = 6,
    gamma: tuple = (0.6, -0.35),
    solver: SolverOptions | None = None,
):
    """Multi-period equilibrium panel whose skill-share drift follows the
    shift-share relation exactly.

    Later periods' alpha satisfies logit(alpha_t) = logit(alpha_0) +
    gamma_H * B_H + gamma_L * B_L, where the shocks are computed by the
    same leave-one-out construction the estimators use; the circular
    dependence (shocks need equilibrium wages) is resolved by iterating
    solve-and-update to a fixed point.  Construction costs and unobserved
    amenities stay constant so the estimating equations hold without
    error terms.

    Returns (panel, econs, states, truth).
    """
    from ..estimation import bartik_shocks

    # tight tolerances: estimator round-trip precision is bounded by the
    # accuracy of the generating equilibria
    solver = solver or SolverOptions(tol_outer=1e-12, tol_inner=1e-12)
    econs = generate_synthetic_economy(spec, seed)
    labels = [e.period_label for e in econs]
    m = spec.n_cities
    # time-invariant pieces for exact estimating equations
    base = econs[0]
    econs = [
        _replace_cities(
            e,
            construction_cost=[c.construction_cost for c in base.cities],
            amenity_unobs=[c.amenity_unobs for c in base.cities],
        )
        for e in econs
    ]

    r_ind = _rng(seed, 11)
    shares = {
        s: r_ind.dirichlet(np.full(n_industries, 3.0), size=m) for s in ("H", "L")
    }
    wage0 = {s: np.exp(r_ind.normal(0.0, 0.15, size=n_industries)) for s in ("H", "L")}
    growth = {
        s: np.cumsum(
            r_ind.normal(0.10, 0.06, size=(len(labels) - 1, n_industries)), axis=0
        )
        for s in ("H", "L")
    }

    states = [solve_equilibrium(econs[0], solver)]
    for ti in range(1, len(labels)):
        states.append(solve_equilibrium(econs[ti], solver, init_state=states[0]))

    def national_rows():
        rows = []
        for ti, t in enumerate(labels):
            for k in range(n_industries):
                rec = {"industry_id": f"ind{k:02d}", "period": t}
                for s in ("H", "L"):
                    lvl = wage0[s][k] if ti == 0 else wage0[s][k] * np.exp(growth[s][ti - 1, k])
                    rec[f"wage_{s}"] = float(lvl)
                rows.append(rec)
        return pd.DataFrame(rows)

    def industry_rows(states_now):
        rows = []
        for ti, t in enumerate(labels):
            eff = states_now[ti].eff_labor
            for i in range(m):
                for k in range(n_industries):
                    rows.append({
                        "city_id": states_now[ti].city_ids[i],
                        "period": t,
                        "industry_id": f"ind{k:02d}",
                        "emp_H": float(shares["H"][i, k] * eff[i, 0]),
                        "emp_L": float(shares["L"][i, k] * eff[i, 1]),
                    })
        return pd.DataFrame(rows)

    national = national_rows()
    alpha0 = econs[0].skill_share_arr()
    logit0 = np.log(alpha0 / (1 - alpha0))
    shocks = {}
    for _ in range(60):
        panel = panel_from_state(
            list(zip(econs, states)), industry=industry_rows(states),
            national_wages=national,
        )
        bh = bartik_shocks(panel, "H").set_index(["city_id", "period"])["shock"]
        bl = bartik_shocks(panel, "L").set_index(["city_id", "period"])["shock"]
        max_move = 0.0
        for ti in range(1, len(labels)):
            t = labels[ti]
            ids = econs[ti].city_ids
            b_h = np.array([bh.loc[(c, t)] for c in ids])
            b_l = np.array([bl.loc[(c, t)] for c in ids])
            shocks[t] = (b_h, b_l)
            target = 1.0 / (1.0 + np.exp(-(logit0 + gamma[0] * b_h + gamma[1] * b_l)))
            cur = econs[ti].skill_share_arr()
            max_move = max(max_move, float(np.max(np.abs(target - cur))))
            econs[ti] = _replace_cities(econs[ti], skill_share=list(target))
            states[ti] = solve_equilibrium(econs[ti], solver, init_state=states[ti])
        if max_move < 1e-13:
            break
    else:
        raise RuntimeError("skill-share fixed point did not settle")

    panel = panel_from_state(
        list(zip(econs, states)), industry=industry_rows(states),
        national_wages=national,
    )
    truth = {
        "rho": spec.rho,
        "psi": spec.psi,
        "sigma_eps": spec.sigma_eps,
        "sigma_nu": spec.sigma_nu,
        "eta": spec.eta,
        "gamma": gamma,
        "mu": {t: MU_DEFAULTS[t] for t in labels},
        "shocks": shocks,
    }
    return panel, econs, states, truth


def _replace_cities(econ: EconomyPrimitives, **field_lists) -> EconomyPrimitives:
    """Economy with per-city fields replaced by the given lists."""
    cities = []
    for i, c in enumerate(econ.cities):
        kw = {k: v[i] for k, v in field_lists.items()}
        cities.append(replace(c, **kw))
    return replace(econ, cities=tuple(cities))


# ----------------------------------------------------------------------
# microdata simulation (the Monte Carlo oracle)


def _gumbel(rng: np.random.Generator, size) -> np.ndarray:
    """Mean-zero Gumbel draws by inverse CDF: -ln(-ln U) - gamma."""
    u = rng.random(size=size)
    return -np.log(-np.log(u)) - EULER_GAMMA


def simulate_micro(
    econ: EconomyPrimitives,
    state: EquilibriumState,
    n_per_type: int,
    seed: int,
) -> pd.DataFrame:
    """Individual records drawn from the model's choice structure.

    Each person draws one Gumbel per city for the location stage and one
    per marital option within the chosen city; empirical frequencies
    converge to the closed-form logit probabilities.  Streams split per
    (person type, stage), so output is independent of evaluation order.
    """
    prefs = econ.prefs
    m = state.n_cities
    unit_s, unit_m = effective_labor_units(prefs)
    sp = np.stack([state.wage_H, state.wage_L], axis=1)
    w_single = sp[:, SKILL_IDX] * unit_s
    w_married = sp[:, SKILL_IDX] * unit_m
    psi_bar = (
        np.log(w_single)
        - prefs.zeta * np.log(state.rent)[:, None]
        + state.marital_surplus
        + prefs.eta * econ.amenity_obs_arr()[:, None]
        + econ.amenity_unobs_arr()
    ) / prefs.sigma_nu

    feasible = (state.populations[:, [0, 0, 1, 1]] > 0) & (
        state.populations[:, [2, 3, 2, 3]] > 0
    )
    grid = option_values_from_wages(
        w_single, w_married, state.rent, state.transfers, prefs, feasible
    )

    frames = []
    for k, p in enumerate(PERSON_TYPES):
        r_loc = _rng(seed, 1000 + 2 * k)
        r_mar = _rng(seed, 1001 + 2 * k)
        chunk = 200_000
        done = 0
        while done < n_per_type:
            n = min(chunk, n_per_type - done)
            city = np.argmax(psi_bar[:, k][None, :] + _gumbel(r_loc, (n, m)), axis=1)
            opts = grid[city, k, :] + _gumbel(r_mar, (n, 3))
            choice = np.argmax(opts, axis=1)
            married = choice < 2
            wage = np.where(married, w_married[city, k], w_single[city, k])
            frames.append(pd.DataFrame({
                "person_type": p.name,
                "city_id": np.array(state.city_ids)[city],
                "married": married,
                "spouse_skill": np.choose(choice, ["H", "L", ""]),
                "wage": wage,
            }))
            done += n
    return pd.concat(frames, ignore_index=True)


def panel_from_micro(
    records: pd.DataFrame,
    econ: EconomyPrimitives,
    state: EquilibriumState,
) -> CityPanel:
    """Aggregate simulated records into the city-panel schema.

    Counts come from the records; wage cells use the record means (these
    are deterministic per cell) with the city's skill price scaled by the
    pooled gender/marital ratios as the fallback for empty cells.  Rent,
    amenity, and land columns come from the state and primitives.
    """
    prefs = econ.prefs
    unit_s, unit_m = effective_labor_units(prefs)
    sp = np.stack([state.wage_H, state.wage_L], axis=1)
    w_single_model = sp[:, SKILL_IDX] * unit_s
    w_married_model = sp[:, SKILL_IDX] * unit_m

    rows = []
    for i, cid in enumerate(state.city_ids):
        g = records[records["city_id"] == cid]
        rec = {"city_id": cid, "period": econ.period_label or "1980"}
        for k, p in enumerate(_PT):
            sub = g[g["person_type"] == p]
            rec[f"pop_{p}"] = float(len(sub))
            rec[f"single_{p}"] = float((~sub["married"]).sum())
            ws = sub.loc[~sub["married"], "wage"]
            wm = sub.loc[sub["married"], "wage"]
            rec[f"wage_single_{p}"] = float(ws.mean()) if len(ws) else float(
                w_single_model[i, k]
            )
            rec[f"wage_married_{p}"] = float(wm.mean()) if len(wm) else float(
                w_married_model[i, k]
            )
        for c, name in enumerate(_CT):
            hus = _PT[HUSBAND_OF[c]]
            wife_skill = "H" if SKILL_IDX[WIFE_OF[c]] == 0 else "L"
            sub = g[(g["person_type"] == hus) & (g["spouse_skill"] == wife_skill)]
            rec[f"mar_{name}"] = float(len(sub))
        rec["rent"] = float(state.rent[i])
        city = econ.cities[i]
        rec["amenity_obs"] = city.amenity_obs
        rec["chi_geo"] = city.land_unavail
        rec["chi_reg"] = city.land_reg
        rows.append(rec)
    return CityPanel(core=pd.DataFrame(rows))
