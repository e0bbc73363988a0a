"""Location choice and the national equilibrium fixed point.

The outer loop iterates on location-choice probabilities with damping;
inside each city, wages and the marriage market are solved jointly (the
married-female labor discount couples them), then rent follows in closed
form.  Acceptance of a solution never depends on iteration counts: an
independent evaluator recomputes every market-clearing condition from the
returned state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    SKILL_IDX,
    EconomyPrimitives,
    EquilibriumState,
    MatchingTable,
    PersonType,
    PreferenceParams,
)
from .labor_housing import effective_labor_units, equilibrium_rent, skill_wages
from .marriage import (
    choice_probs_from_options,
    clear_markets,
    flow_residuals,
    inclusive_values_from_options,
    option_values,
)

__all__ = [
    "CityValue",
    "SolverOptions",
    "EquilibriumError",
    "city_value",
    "location_choice_probs",
    "solve_equilibrium",
    "solve_partial",
    "verify_equilibrium",
]


@dataclass(frozen=True)
class CityValue:
    """Scaled systematic value of one city per person type, with the
    additive pieces kept for diagnostics."""

    psi_bar: np.ndarray  # (4,)
    components: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverOptions:
    tol_outer: float = 1e-8  # max abs gap between held and implied location probs
    tol_inner: float = 1e-10  # marriage clearing / wage fixed point
    damping: float = 0.5  # step on location probabilities, in (0, 1]
    max_outer: int = 2000
    max_inner: int = 300
    fixed_prices: bool = False  # partial-equilibrium mode
    trace_path: str | None = None  # optional line-delimited JSON solver log

    def __post_init__(self):
        if self.tol_outer <= 0 or self.tol_inner <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.damping <= 1):
            raise ValueError("damping must lie in (0, 1]")


class EquilibriumError(RuntimeError):
    """Solver failed to converge; carries the residual trace."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def city_value(
    wages_single: np.ndarray,
    rent: float,
    surplus: np.ndarray,
    amenity_obs: float,
    amenity_unobs: np.ndarray,
    prefs: PreferenceParams,
) -> CityValue:
    """Systematic value of a city: own single wage, rent, marital surplus,
    and amenities, scaled by the location taste dispersion.

    The wage term is the type's single wage; the surplus already carries
    all marriage-contingent gains relative to staying single.
    """
    wages_single = np.asarray(wages_single, dtype=float)
    surplus = np.asarray(surplus, dtype=float)
    amenity_unobs = np.asarray(amenity_unobs, dtype=float)
    log_w = np.log(wages_single)
    rent_term = -prefs.zeta * np.log(rent) * np.ones(4)
    amen_term = prefs.eta * amenity_obs * np.ones(4)
    psi_bar = (log_w + rent_term + surplus + amen_term + amenity_unobs) / prefs.sigma_nu
    return CityValue(
        psi_bar=psi_bar,
        components={
            "log_wage": log_w,
            "rent": rent_term,
            "surplus": surplus,
            "amenity_obs": amen_term,
            "amenity_unobs": amenity_unobs.copy(),
        },
    )


def location_choice_probs(values, p: PersonType | None = None) -> np.ndarray:
    """Logit shares over cities from their systematic values.

    values is a sequence of CityValue or an (M, 4) array of scaled values.
    Returns the (M,) distribution for person type p, or the full (M, 4)
    matrix when p is None.  Computed with max-subtraction.
    """
    if len(values) == 0:
        raise ValueError("need at least one city")
    if isinstance(values[0], CityValue):
        psi = np.stack([v.psi_bar for v in values], axis=0)
    else:
        psi = np.asarray(values, dtype=float)
    q = _softmax_cities(psi)
    if p is None:
        return q
    return q[:, p.index]


def _softmax_cities(psi: np.ndarray) -> np.ndarray:
    """Softmax over the city axis (axis 0) for each person type column."""
    m = psi.max(axis=0, keepdims=True)
    e = np.exp(psi - m)
    return e / e.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------------
# inner (per-city) solve, vectorized over all cities


@dataclass
class _EconArrays:
    city_ids: tuple
    A: np.ndarray
    alpha: np.ndarray
    cc: np.ndarray
    kappa: np.ndarray
    psi: np.ndarray
    amen_obs: np.ndarray
    amen_unobs: np.ndarray
    rho: float
    prefs: PreferenceParams
    nat_pop: np.ndarray


def _econ_arrays(econ: EconomyPrimitives) -> _EconArrays:
    return _EconArrays(
        city_ids=econ.city_ids,
        A=econ.productivity_arr(),
        alpha=econ.skill_share_arr(),
        cc=econ.construction_cost_arr(),
        kappa=econ.interest_rate_arr(),
        psi=econ.psi_arr(),
        amen_obs=econ.amenity_obs_arr(),
        amen_unobs=econ.amenity_unobs_arr(),
        rho=econ.tech_rho,
        prefs=econ.prefs,
        nat_pop=econ.national_population.copy(),
    )


def _labor_from_probs(N: np.ndarray, probs: np.ndarray, prefs) -> np.ndarray:
    """Effective labor (M, 2) implied by populations and marital choice
    probabilities (married mass taken from each type's own choices)."""
    unit_single, unit_married = effective_labor_units(prefs)
    p_married = probs[:, :, 0] + probs[:, :, 1]
    per_person = N * ((1.0 - p_married) * unit_single + p_married * unit_married)
    eff = np.zeros((N.shape[0], 2))
    for p in range(4):
        eff[:, SKILL_IDX[p]] += per_person[:, p]
    return eff


def _aggregate_income(N: np.ndarray, probs: np.ndarray, wages: np.ndarray, prefs) -> np.ndarray:
    """Total labor income per city: every resident earns their skill price
    times their marital-status effective unit."""
    unit_single, unit_married = effective_labor_units(prefs)
    w_by_type = wages[:, SKILL_IDX]
    p_married = probs[:, :, 0] + probs[:, :, 1]
    inc = N * w_by_type * ((1.0 - p_married) * unit_single + p_married * unit_married)
    return inc.sum(axis=1)


def _solve_cities(
    ea: _EconArrays,
    N: np.ndarray,
    tau_init: np.ndarray,
    wages_init: np.ndarray | None,
    opts: SolverOptions,
    frozen_wages: np.ndarray | None = None,
    frozen_rents: np.ndarray | None = None,
    frozen_transfers: np.ndarray | None = None,
) -> dict:
    """Solve wages, matching, and rent for every city at populations N.

    Iterates the wage <-> matching fixed point to a joint tolerance, then
    prices housing in closed form.  Marriage choice probabilities do not
    depend on rent (it shifts all options equally), so clearing runs at a
    unit rent and final values are evaluated at the equilibrium rent.
    """
    prefs = ea.prefs
    m = N.shape[0]
    ones = np.ones(m)

    if frozen_wages is not None:
        wages = np.asarray(frozen_wages, dtype=float).copy()
        tau, probs = _match_at(ea, N, wages, tau_init, frozen_transfers, opts)
    else:
        unit_single, _ = effective_labor_units(prefs)
        if wages_init is None:
            eff0 = np.zeros((m, 2))
            for p in range(4):
                eff0[:, SKILL_IDX[p]] += N[:, p] * unit_single[p]
            eff0 = np.maximum(eff0, 1e-12)
            wages = np.stack(
                skill_wages(ea.A, ea.alpha, ea.rho, eff0), axis=1
            )
        else:
            wages = np.asarray(wages_init, dtype=float).copy()
        tau = tau_init.copy()
        for _ in range(opts.max_inner):
            tau, probs = _match_at(ea, N, wages, tau, frozen_transfers, opts)
            eff = np.maximum(_labor_from_probs(N, probs, prefs), 1e-300)
            new_wages = np.stack(skill_wages(ea.A, ea.alpha, ea.rho, eff), axis=1)
            gap = np.max(np.abs(np.log(new_wages) - np.log(wages)))
            wages = new_wages
            if gap < 1e-13:
                break
        else:
            raise EquilibriumError(
                f"wage/matching fixed point stalled at gap {gap:.3e}", []
            )
        # one consistency pass so stored wages are the exact marginal
        # products of the labor implied by the stored matching
        tau, probs = _match_at(ea, N, wages, tau, frozen_transfers, opts)

    eff = np.maximum(_labor_from_probs(N, probs, prefs), 1e-300)
    if frozen_wages is None:
        wages = np.stack(skill_wages(ea.A, ea.alpha, ea.rho, eff), axis=1)
    income = _aggregate_income(N, probs, wages, prefs)

    if frozen_rents is not None:
        rent = np.asarray(frozen_rents, dtype=float).copy()
        qty = prefs.zeta * income / rent
    else:
        rent, qty = equilibrium_rent(
            income,
            _psi_box(ea),
            (np.zeros(m), np.zeros(m)),
            ea.kappa,
            ea.cc,
            prefs.zeta,
        )

    feasible = (N[:, [0, 0, 1, 1]] > 0) & (N[:, [2, 3, 2, 3]] > 0)
    opts_grid = option_values(wages, rent, tau, prefs, feasible)
    probs = choice_probs_from_options(opts_grid)
    incl = inclusive_values_from_options(opts_grid, prefs.sigma_eps)
    surplus = incl - prefs.sigma_eps * opts_grid[:, :, 2]
    return {
        "wages": wages,
        "rent": rent,
        "tau": tau,
        "probs": probs,
        "eff": eff,
        "income": income,
        "housing_qty": qty,
        "inclusive": incl,
        "surplus": surplus,
        "options": opts_grid,
    }


class _PsiBox:
    """Adapter giving equilibrium_rent a per-city inverse elasticity."""

    def __init__(self, psi):
        self.psi = psi

    def inverse_elasticity(self, *_):
        return self.psi


def _psi_box(ea: _EconArrays) -> _PsiBox:
    return _PsiBox(ea.psi)


def _match_at(ea, N, wages, tau, frozen_transfers, opts):
    """Marriage block at given wages: clear, or evaluate at frozen
    transfers without clearing."""
    if frozen_transfers is not None:
        tau = np.asarray(frozen_transfers, dtype=float)
        feasible = (N[:, [0, 0, 1, 1]] > 0) & (N[:, [2, 3, 2, 3]] > 0)
        grid = option_values(wages, np.ones(N.shape[0]), tau, ea.prefs, feasible)
        return tau, choice_probs_from_options(grid)
    tau_new, probs, _, _, _ = clear_markets(
        N,
        wages,
        np.ones(N.shape[0]),
        ea.prefs,
        tau0=tau,
        tol=opts.tol_inner,
        max_iter=10000,
        damping=0.5,
    )
    return tau_new, probs


def _psi_bar(ea, sol) -> np.ndarray:
    prefs = ea.prefs
    unit_single, _ = effective_labor_units(prefs)
    w_single = sol["wages"][:, SKILL_IDX] * unit_single
    return (
        np.log(w_single)
        - prefs.zeta * np.log(sol["rent"])[:, None]
        + sol["surplus"]
        + prefs.eta * ea.amen_obs[:, None]
        + ea.amen_unobs
    ) / prefs.sigma_nu


def _build_state(econ, ea, N, q, sol) -> EquilibriumState:
    m = N.shape[0]
    couples = np.empty((m, 4))
    singles = np.empty((m, 4))
    for i in range(m):
        t = MatchingTable.from_probs(N[i], sol["probs"][i])
        couples[i] = t.couples
        singles[i] = t.singles
    return EquilibriumState(
        city_ids=ea.city_ids,
        wage_H=sol["wages"][:, 0],
        wage_L=sol["wages"][:, 1],
        rent=sol["rent"],
        transfers=sol["tau"],
        populations=N,
        couples=couples,
        singles=singles,
        choice_probs=sol["probs"],
        eff_labor=sol["eff"],
        housing_qty=sol["housing_qty"],
        location_probs=q,
        inclusive_value=sol["inclusive"],
        marital_surplus=sol["surplus"],
        period_label=econ.period_label,
    )


def solve_equilibrium(
    econ: EconomyPrimitives,
    opts: SolverOptions | None = None,
    init_state: EquilibriumState | None = None,
) -> EquilibriumState:
    """Solve the national fixed point over prices, matching, and location.

    Starts from uniform population shares and zero transfers, with fixed
    damping; the returned state is the fixed point reached from that
    initialization (no uniqueness claim).  A previous state for the same
    cities may be passed as a warm start.  Convergence is judged by the
    same residuals verify_equilibrium reports.
    """
    opts = opts or SolverOptions()
    ea = _econ_arrays(econ)
    m = econ.n_cities
    if init_state is not None and init_state.city_ids == ea.city_ids:
        q = init_state.location_probs.copy()
        tau = np.where(np.isnan(init_state.transfers), 0.0, init_state.transfers)
        wages = np.stack([init_state.wage_H, init_state.wage_L], axis=1)
    else:
        q = np.full((m, 4), 1.0 / m)
        tau = np.zeros((m, 4))
        wages = None
    damping = opts.damping
    trace: list[dict] = []
    best = np.inf
    for outer in range(opts.max_outer):
        N = q * ea.nat_pop[None, :]
        sol = _solve_cities(ea, N, tau, wages, opts)
        tau, wages = sol["tau"], sol["wages"]
        q_hat = _softmax_cities(_psi_bar(ea, sol))
        resid = float(np.max(np.abs(q - q_hat)))
        trace.append({"iteration": outer, "family": "location", "max_residual": resid})
        if resid < opts.tol_outer:
            _write_trace(opts, trace)
            return _build_state(econ, ea, N, q, sol)
        if resid > 2.0 * best and damping > 0.05:
            damping *= 0.5  # diverging: shorten the step
        best = min(best, resid)
        q = q + damping * (q_hat - q)
    _write_trace(opts, trace)
    raise EquilibriumError(
        f"no fixed point after {opts.max_outer} outer iterations "
        f"(last location residual {resid:.3e})",
        trace,
    )


def solve_partial(
    econ: EconomyPrimitives,
    frozen: dict,
    opts: SolverOptions | None = None,
) -> EquilibriumState:
    """Solve only the blocks not pinned by `frozen`.

    frozen may contain any of: "wages" (M, 2), "rents" (M,), "populations"
    (M, 4), "transfers" (M, 4), each in canonical city order.  Frozen
    blocks enter as data; their market-clearing residuals are
    informational and not required to vanish.  With frozen populations the
    location block is skipped entirely and the reported location
    probabilities are the frozen population shares.
    """
    opts = opts or SolverOptions()
    ea = _econ_arrays(econ)
    m = econ.n_cities
    fw = frozen.get("wages")
    fr = frozen.get("rents")
    fp = frozen.get("populations")
    ft = frozen.get("transfers")
    if fp is not None:
        N = np.asarray(fp, dtype=float)
        sol = _solve_cities(
            ea, N, np.zeros((m, 4)), None, opts,
            frozen_wages=fw, frozen_rents=fr, frozen_transfers=ft,
        )
        tot = N.sum(axis=0)
        q = np.divide(N, tot[None, :], out=np.full_like(N, 1.0 / m), where=tot > 0)
        return _build_state(econ, ea, N, q, sol)

    q = np.full((m, 4), 1.0 / m)
    tau = np.zeros((m, 4))
    wages = None
    damping = opts.damping
    trace: list[dict] = []
    best = np.inf
    for outer in range(opts.max_outer):
        N = q * ea.nat_pop[None, :]
        sol = _solve_cities(
            ea, N, tau, wages, opts,
            frozen_wages=fw, frozen_rents=fr, frozen_transfers=ft,
        )
        tau, wages = sol["tau"], sol["wages"]
        q_hat = _softmax_cities(_psi_bar(ea, sol))
        resid = float(np.max(np.abs(q - q_hat)))
        trace.append({"iteration": outer, "family": "location", "max_residual": resid})
        if resid < opts.tol_outer:
            _write_trace(opts, trace)
            return _build_state(econ, ea, N, q, sol)
        if resid > 2.0 * best and damping > 0.05:
            damping *= 0.5
        best = min(best, resid)
        q = q + damping * (q_hat - q)
    _write_trace(opts, trace)
    raise EquilibriumError("partial solve did not converge", trace)


def _write_trace(opts: SolverOptions, trace: list[dict]):
    if opts.trace_path:
        with open(opts.trace_path, "w") as fh:
            for row in trace:
                fh.write(json.dumps(row) + "\n")


def verify_equilibrium(
    econ: EconomyPrimitives, state: EquilibriumState
) -> dict[str, float]:
    """Recompute every market-clearing condition from a state.

    Solver-independent: uses only the state's stored prices, transfers,
    populations, and matching.  Returns the max residual per family:
    labor (relative wage gap to CES marginal products), housing (demand
    identity and supply curve), marriage (relative flow gaps over the four
    cells), location (gap between held and implied choice probabilities),
    and population (conservation against national totals).
    """
    ea = _econ_arrays(econ)
    prefs = ea.prefs
    N = state.populations
    wages = np.stack([state.wage_H, state.wage_L], axis=1)

    # labor: stored wages vs marginal products at the labor implied by the
    # stored matching probabilities
    eff = _labor_from_probs(N, state.choice_probs, prefs)
    w_implied = np.stack(skill_wages(ea.A, ea.alpha, ea.rho, np.maximum(eff, 1e-300)), axis=1)
    labor_resid = float(np.max(np.abs(w_implied - wages) / wages))

    # housing: demand identity and the supply curve in logs
    income = _aggregate_income(N, state.choice_probs, wages, prefs)
    demand_resid = float(
        np.max(np.abs(state.rent * state.housing_qty - prefs.zeta * income)
               / np.maximum(prefs.zeta * income, 1e-300))
    )
    supply_resid = float(
        np.max(np.abs(np.log(state.rent) - (np.log(ea.kappa) + np.log(ea.cc)
               + ea.psi * np.log(np.maximum(state.housing_qty, 1e-300)))))
    )

    # marriage: recompute choice probabilities from stored prices and
    # transfers, then compare the two orientations of each flow
    feasible = (N[:, [0, 0, 1, 1]] > 0) & (N[:, [2, 3, 2, 3]] > 0)
    grid = option_values(wages, state.rent, state.transfers, prefs, feasible)
    probs = choice_probs_from_options(grid)
    _, _, rel = flow_residuals(N, probs, feasible & ~np.isnan(state.transfers))
    marriage_resid = float(rel.max()) if rel.size else 0.0

    # location: implied logit shares vs stored ones
    incl = inclusive_values_from_options(grid, prefs.sigma_eps)
    surplus = incl - prefs.sigma_eps * grid[:, :, 2]
    unit_single, _ = effective_labor_units(prefs)
    w_single = wages[:, SKILL_IDX] * unit_single
    psi_bar = (
        np.log(w_single)
        - prefs.zeta * np.log(state.rent)[:, None]
        + surplus
        + prefs.eta * ea.amen_obs[:, None]
        + ea.amen_unobs
    ) / prefs.sigma_nu
    q_hat = _softmax_cities(psi_bar)
    location_resid = float(np.max(np.abs(state.location_probs - q_hat)))

    pop_resid = float(
        np.max(np.abs(N.sum(axis=0) - ea.nat_pop) / np.maximum(ea.nat_pop, 1e-300))
    )
    return {
        "labor": labor_resid,
        "housing_demand": demand_resid,
        "housing_supply": supply_resid,
        "marriage": marriage_resid,
        "location": location_resid,
        "population": pop_resid,
    }
