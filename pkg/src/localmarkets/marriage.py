"""Local transferable-utility marriage markets.

Each city has four sub-markets, one per couple type.  Every person
compares three options (marry a high-skill spouse, marry a low-skill
spouse, stay single) whose scaled values feed a three-way logit; a
wife-side transfer per couple type moves until the male and female flows
into each cell agree.  Transfers are stored once per couple type from the
wife's perspective, so antisymmetry is structural.

All internal computations are vectorized over cities (leading axis M) and
use max-subtracted softmax/log-sum-exp; no raw exponentials of model
values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    COUPLE_OF,
    HUSBAND_OF,
    SKILL_IDX,
    TRANSFER_SIGN,
    WIFE_OF,
    MatchingTable,
    PersonType,
    PreferenceParams,
)
from .labor_housing import effective_labor_units

__all__ = [
    "ScaledValues",
    "CitySurplus",
    "ClearingResult",
    "ConvergenceError",
    "scaled_values",
    "marriage_choice_probs",
    "inclusive_value",
    "clear_marriage_market",
    "clear_markets",
    "marital_surplus",
    "marital_surplus_from_wages",
    "supermodularity_core",
    "nonpecuniary_core",
    "option_values",
    "option_values_from_wages",
    "choice_probs_from_options",
    "inclusive_values_from_options",
    "flow_residuals",
]

# Skill index of the wife / husband in each couple cell.
_WIFE_SKILL = SKILL_IDX[WIFE_OF]
_HUSB_SKILL = SKILL_IDX[HUSBAND_OF]


class ConvergenceError(RuntimeError):
    """Marriage clearing failed; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ScaledValues:
    """Scaled option values of one person type: single and per spouse skill."""

    v_single: float
    v_spouse: np.ndarray  # (2,) for spouse skill (H, L)

    def options(self) -> np.ndarray:
        return np.array([self.v_spouse[0], self.v_spouse[1], self.v_single])


@dataclass(frozen=True)
class CitySurplus:
    """Marital surpluses of one city: per person type, per couple type, and
    the supermodularity core of the per-couple values."""

    per_person: np.ndarray  # (4,)
    per_couple: np.ndarray  # (4,)
    core: float


@dataclass(frozen=True)
class ClearingResult:
    transfers: np.ndarray  # (4,) wife-side; NaN where undefined
    table: MatchingTable
    residual: float
    iterations: int
    degenerate: np.ndarray  # (4,) bool, True where a sub-market is empty


def scaled_values(
    p: PersonType,
    wages_single: np.ndarray,
    wages_married: np.ndarray,
    rent: float,
    prefs: PreferenceParams,
    transfers: np.ndarray,
) -> ScaledValues:
    """Scaled indirect utilities of one person type.

    wages_single / wages_married are (4,) arrays of individual wages by
    person type at the respective marital status; transfers is the (4,)
    wife-side transfer per couple type.  The stored transfer enters
    positively for women and negatively for men.
    """
    wages_single = np.asarray(wages_single, dtype=float)
    wages_married = np.asarray(wages_married, dtype=float)
    transfers = np.asarray(transfers, dtype=float)
    if rent <= 0 or np.any(wages_single <= 0) or np.any(wages_married <= 0):
        raise ValueError("wages and rent must be positive")
    i = p.index
    se = prefs.sigma_eps
    lr = prefs.zeta * np.log(rent)
    v_single = (np.log(wages_single[i]) - lr) / se
    v_sp = np.empty(2)
    for s in range(2):
        c = COUPLE_OF[i, s]
        spouse = WIFE_OF[c] if i in (0, 1) else HUSBAND_OF[c]
        income = wages_married[i] + wages_married[spouse]
        v_sp[s] = (
            np.log(income)
            - lr
            - np.log1p(prefs.chi)
            + prefs.mu[i, s]
            + TRANSFER_SIGN[i] * transfers[c]
        ) / se
    return ScaledValues(v_single=float(v_single), v_spouse=v_sp)


def marriage_choice_probs(v: ScaledValues) -> tuple[float, float, float]:
    """Three-way logit over (spouse H, spouse L, single), overflow-safe."""
    p = _softmax_last(v.options()[None, :])[0]
    return float(p[0]), float(p[1]), float(p[2])


def inclusive_value(v: ScaledValues, sigma_eps: float) -> float:
    """sigma_eps times the log-sum-exp of the three scaled options."""
    opts = v.options()
    m = np.max(opts)
    return float(sigma_eps * (m + np.log(np.exp(opts - m).sum())))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis; -inf entries get probability zero."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def option_values(
    skill_prices: np.ndarray,
    rent: np.ndarray,
    transfers: np.ndarray,
    prefs: PreferenceParams,
    feasible: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled option values for all cities and person types.

    skill_prices is (M, 2), rent (M,), transfers (M, 4) wife-side.
    Returns (M, 4, 3) over options (spouse H, spouse L, single).  Couples
    marked infeasible get value -inf on both orientations.  Spouse wages
    use married-status effective labor, so the marriage decision already
    anticipates the married-female discount.
    """
    skill_prices = np.asarray(skill_prices, dtype=float)
    unit_single, unit_married = effective_labor_units(prefs)
    w_single = skill_prices[:, SKILL_IDX] * unit_single  # (M, 4)
    w_married = skill_prices[:, SKILL_IDX] * unit_married
    return option_values_from_wages(
        w_single, w_married, rent, transfers, prefs, feasible
    )


def option_values_from_wages(
    w_single: np.ndarray,
    w_married: np.ndarray,
    rent: np.ndarray,
    transfers: np.ndarray,
    prefs: PreferenceParams,
    feasible: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled option values from explicit per-type wages by marital status.

    Used directly when a market's wages are given as type means rather
    than derived from skill prices (e.g. a pooled national market).
    """
    w_single = np.asarray(w_single, dtype=float)
    w_married = np.asarray(w_married, dtype=float)
    rent = np.asarray(rent, dtype=float)
    transfers = np.asarray(transfers, dtype=float)
    couple_income = w_married[:, HUSBAND_OF] + w_married[:, WIFE_OF]  # (M, 4)

    se = prefs.sigma_eps
    lr = prefs.zeta * np.log(rent)[:, None]
    v_single = (np.log(w_single) - lr) / se

    tau = np.where(np.isnan(transfers), 0.0, transfers)
    ci = couple_income[:, COUPLE_OF]  # (M, 4, 2)
    tp = tau[:, COUPLE_OF]
    v_spouse = (
        np.log(ci)
        - lr[:, :, None]
        - np.log1p(prefs.chi)
        + prefs.mu[None, :, :]
        + TRANSFER_SIGN[None, :, None] * tp
    ) / se
    if feasible is not None:
        dead = ~np.asarray(feasible, dtype=bool)
        v_spouse = np.where(dead[:, COUPLE_OF], -np.inf, v_spouse)
    out = np.empty(v_spouse.shape[:2] + (3,))
    out[..., :2] = v_spouse
    out[..., 2] = v_single
    return out


def choice_probs_from_options(options: np.ndarray) -> np.ndarray:
    return _softmax_last(options)


def inclusive_values_from_options(options: np.ndarray, sigma_eps: float) -> np.ndarray:
    m = np.max(options, axis=-1)
    return sigma_eps * (m + np.log(np.exp(options - m[..., None]).sum(axis=-1)))


def flow_residuals(
    populations: np.ndarray, probs: np.ndarray, feasible: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell male demand, female demand, and relative clearing residual.

    populations (M, 4), probs (M, 4, 3).  The residual of an infeasible
    cell is zero by convention.
    """
    d_male = populations[:, HUSBAND_OF] * np.take_along_axis(
        probs[:, HUSBAND_OF, :], _WIFE_SKILL[None, :, None], axis=2
    )[..., 0]
    d_female = populations[:, WIFE_OF] * np.take_along_axis(
        probs[:, WIFE_OF, :], _HUSB_SKILL[None, :, None], axis=2
    )[..., 0]
    scale = np.maximum(np.maximum(d_male, d_female), 1e-300)
    rel = np.where(feasible, np.abs(d_male - d_female) / scale, 0.0)
    return d_male, d_female, rel


def clear_markets(
    populations: np.ndarray,
    skill_prices: np.ndarray,
    rent: np.ndarray,
    prefs: PreferenceParams,
    tau0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 10000,
    damping: float = 0.5,
    wage_matrices: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
    """Clear all four sub-markets of every city simultaneously.

    Returns (transfers (M,4) with NaN on degenerate cells, choice
    probabilities (M,4,3), feasible mask (M,4), max relative residual,
    iterations).  Damped Gauss-Seidel over couple types with a
    finite-difference Newton fallback when progress stalls.  Pass
    wage_matrices = (w_single, w_married), each (M, 4), to clear a market
    whose wages are given per type instead of as skill prices.
    """
    populations = np.asarray(populations, dtype=float)
    rent = np.asarray(rent, dtype=float)
    m_cities = populations.shape[0]

    feasible = (populations[:, HUSBAND_OF] > 0) & (populations[:, WIFE_OF] > 0)
    tau = np.zeros((m_cities, 4)) if tau0 is None else np.where(
        np.isnan(tau0), 0.0, np.asarray(tau0, dtype=float).copy()
    )
    tau[~feasible] = 0.0
    se = prefs.sigma_eps

    if wage_matrices is None:
        skill_prices = np.asarray(skill_prices, dtype=float)
        unit_single, unit_married = effective_labor_units(prefs)
        w_single = skill_prices[:, SKILL_IDX] * unit_single
        w_married = skill_prices[:, SKILL_IDX] * unit_married
    else:
        w_single, w_married = wage_matrices

    def residual_vec(t):
        opts = option_values_from_wages(w_single, w_married, rent, t, prefs, feasible)
        probs = _softmax_last(opts)
        d_m, d_f, rel = flow_residuals(populations, probs, feasible)
        with np.errstate(divide="ignore"):
            r = np.where(feasible, np.log(np.maximum(d_m, 1e-300))
                         - np.log(np.maximum(d_f, 1e-300)), 0.0)
        return r, probs, rel

    r, probs, rel = residual_vec(tau)
    cur = rel.max() if rel.size else 0.0
    best = cur
    it = 0
    stall = 0
    newton_mode = False
    while cur > tol and it < max_iter:
        it += 1
        if not newton_mode:
            # One Gauss-Seidel sweep: per couple type, a Newton-like scalar
            # step on the log-flow gap, recomputing probabilities each time.
            for c in range(4):
                opts = option_values_from_wages(
                    w_single, w_married, rent, tau, prefs, feasible
                )
                probs = _softmax_last(opts)
                d_m, d_f, _ = flow_residuals(populations, probs, feasible)
                with np.errstate(divide="ignore"):
                    rc = np.log(np.maximum(d_m[:, c], 1e-300)) - np.log(
                        np.maximum(d_f[:, c], 1e-300)
                    )
                p_m = np.take_along_axis(
                    probs[:, HUSBAND_OF[c], :], np.full((m_cities, 1), _WIFE_SKILL[c]), 1
                )[:, 0]
                p_f = np.take_along_axis(
                    probs[:, WIFE_OF[c], :], np.full((m_cities, 1), _HUSB_SKILL[c]), 1
                )[:, 0]
                slope = np.maximum((1.0 - p_m) + (1.0 - p_f), 1e-8)
                step = np.clip(damping * se * rc / slope, -5.0 * se, 5.0 * se)
                tau[:, c] = np.where(feasible[:, c], tau[:, c] + step, 0.0)
        else:
            tau = _newton_step(tau, residual_vec, feasible, se)
        r, probs, rel = residual_vec(tau)
        cur = rel.max() if rel.size else 0.0
        if cur > 0.7 * best:
            stall += 1
        else:
            stall = 0
        if stall >= 8:
            newton_mode = True
            stall = 0
        if np.isfinite(cur):
            best = min(best, cur)
    if cur > tol:
        raise ConvergenceError("marriage market clearing did not converge", cur)

    tau_out = np.where(feasible, tau, np.nan)
    opts = option_values_from_wages(w_single, w_married, rent, tau_out, prefs, feasible)
    probs = _softmax_last(opts)
    _, _, rel = flow_residuals(populations, probs, feasible)
    return tau_out, probs, feasible, float(rel.max() if rel.size else 0.0), it


def _newton_step(tau, residual_vec, feasible, se):
    """One damped Newton step on the 4 log-flow gaps per city, with a
    finite-difference Jacobian."""
    r, _, _ = residual_vec(tau)
    m_cities = tau.shape[0]
    h = 1e-7 * se
    jac = np.empty((m_cities, 4, 4))
    for d in range(4):
        tp = tau.copy()
        tp[:, d] += h
        rp, _, _ = residual_vec(tp)
        jac[:, :, d] = (rp - r) / h
    # Degenerate cells: identity row/col keeps the system solvable.
    for c in range(4):
        dead = ~feasible[:, c]
        jac[dead, c, :] = 0.0
        jac[dead, :, c] = 0.0
        jac[dead, c, c] = 1.0
        r[dead, c] = 0.0
    try:
        delta = np.linalg.solve(jac, -r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        delta = -r  # fall back to a plain damped step
    return tau + np.clip(delta, -5.0 * se, 5.0 * se)


def clear_marriage_market(
    populations: np.ndarray,
    skill_prices: np.ndarray,
    rent: float,
    prefs: PreferenceParams,
    tau0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 10000,
    damping: float = 0.5,
) -> ClearingResult:
    """Clear one city's marriage market.

    populations is (4,) by person type and skill_prices (2,) by skill.
    A sub-market with zero mass on either side is reported degenerate: its
    transfer is NaN and its couple cell zero, rather than a diverging
    price.
    """
    populations = np.asarray(populations, dtype=float)
    tau, probs, feasible, residual, it = clear_markets(
        populations[None, :],
        np.asarray(skill_prices, dtype=float)[None, :],
        np.array([float(rent)]),
        prefs,
        None if tau0 is None else np.asarray(tau0, dtype=float)[None, :],
        tol=tol,
        max_iter=max_iter,
        damping=damping,
    )
    table = MatchingTable.from_probs(populations, probs[0])
    return ClearingResult(
        transfers=tau[0],
        table=table,
        residual=residual,
        iterations=it,
        degenerate=~feasible[0],
    )


def marital_surplus(
    skill_prices: np.ndarray,
    rent: float,
    transfers: np.ndarray,
    prefs: PreferenceParams,
) -> CitySurplus:
    """Per-person and per-couple marital surpluses of one cleared city.

    The per-person surplus is the inclusive value in excess of the single
    value (nonnegative by the log-sum-exp bound).  Per-couple surpluses
    are computed at zero transfers, which is exact: the wife's transfer
    and the husband's negation cancel.
    """
    sp = np.asarray(skill_prices, dtype=float)
    unit_single, unit_married = effective_labor_units(prefs)
    return marital_surplus_from_wages(
        sp[SKILL_IDX] * unit_single, sp[SKILL_IDX] * unit_married,
        rent, transfers, prefs,
    )


def marital_surplus_from_wages(
    w_single: np.ndarray,
    w_married: np.ndarray,
    rent: float,
    transfers: np.ndarray,
    prefs: PreferenceParams,
) -> CitySurplus:
    """marital_surplus for a market whose wages are given per type."""
    ws = np.asarray(w_single, dtype=float)[None, :]
    wm = np.asarray(w_married, dtype=float)[None, :]
    rent_arr = np.array([float(rent)])
    tau = np.asarray(transfers, dtype=float)[None, :]
    opts = option_values_from_wages(ws, wm, rent_arr, tau, prefs)
    v_single = opts[0, :, 2]
    incl = inclusive_values_from_options(opts, prefs.sigma_eps)[0]
    per_person = incl - prefs.sigma_eps * v_single

    opts0 = option_values_from_wages(ws, wm, rent_arr, np.zeros((1, 4)), prefs)[0]
    per_couple = prefs.sigma_eps * (
        opts0[HUSBAND_OF, _WIFE_SKILL]
        + opts0[WIFE_OF, _HUSB_SKILL]
        - opts0[HUSBAND_OF, 2]
        - opts0[WIFE_OF, 2]
    )
    core = float(per_couple[0] + per_couple[3] - per_couple[1] - per_couple[2])
    return CitySurplus(per_person=per_person, per_couple=per_couple, core=core)


def supermodularity_core(s: CitySurplus) -> float:
    """Gamma = S(HH) + S(LL) - S(HL) - S(LH) of the per-couple surpluses."""
    pc = s.per_couple
    return float(pc[0] + pc[3] - pc[1] - pc[2])


def nonpecuniary_core(mu: np.ndarray) -> float:
    """Supermodularity core of the nonpecuniary utilities.

    mu is the (4, 2) table over (person type, spouse skill).  Each couple
    cell contributes the husband's and the wife's nonpecuniary terms; the
    core is the same diagonal-minus-off-diagonal combination as for
    surpluses.
    """
    mu = np.asarray(mu, dtype=float)
    cell = mu[HUSBAND_OF, _WIFE_SKILL] + mu[WIFE_OF, _HUSB_SKILL]
    return float(cell[0] + cell[3] - cell[1] - cell[2])
