"""CES labor demand, effective-labor supply, and the local housing market.

Price formation inside one city: skill rental prices are CES marginal
products of effective labor, individual wages scale those prices by
gender- and marital-status-specific effective units, and rent clears the
housing market in closed form.  Everything here is a pure function; all
operations broadcast over arrays so that many cities can be priced at
once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    HUSBAND_OF,
    IS_FEMALE,
    SKILL_IDX,
    WIFE_OF,
    HousingElasticityParams,
    MatchingTable,
    PersonType,
    PreferenceParams,
)

__all__ = [
    "LaborAggregates",
    "HousingOutcome",
    "ces_output",
    "skill_wages",
    "effective_labor_unit",
    "effective_labor_units",
    "aggregate_effective_labor",
    "individual_wage",
    "housing_demand",
    "supply_rent",
    "equilibrium_rent",
    "invert_technology",
]


@dataclass(frozen=True)
class LaborAggregates:
    """Skill-specific effective labor in one city."""

    eff_H: float
    eff_L: float

    def as_array(self) -> np.ndarray:
        return np.array([self.eff_H, self.eff_L])


@dataclass(frozen=True)
class HousingOutcome:
    rent: float
    quantity: float


def _check_ces_args(A, alpha, rho):
    A = np.asarray(A, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(A <= 0):
        raise ValueError("productivity must be positive")
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("skill share must lie in (0, 1)")
    if rho >= 1:
        raise ValueError("substitution parameter must be < 1")
    if rho == 0:
        raise ValueError("rho = 0 (Cobb-Douglas limit) is not supported")


def ces_output(A, alpha, rho: float, L: LaborAggregates | np.ndarray):
    """Output Y = A * [alpha*L_H^rho + (1-alpha)*L_L^rho]^(1/rho).

    Accepts scalars or per-city arrays; L may be a LaborAggregates or an
    array whose last axis holds (L_H, L_L).  At least one labor input must
    be positive.
    """
    _check_ces_args(A, alpha, rho)
    L = L.as_array() if isinstance(L, LaborAggregates) else np.asarray(L, dtype=float)
    lh, ll = L[..., 0], L[..., 1]
    if np.any(lh < 0) or np.any(ll < 0):
        raise ValueError("labor inputs must be nonnegative")
    if np.any((lh == 0) & (ll == 0)):
        raise ValueError("at least one labor input must be positive")
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(invalid="ignore"):
        # x^rho at x=0 is 0 for rho>0 and diverges for rho<0; the diverging
        # bracket then sends output to 0, the correct CES limit.
        bracket = alpha * _pow0(lh, rho) + (1.0 - alpha) * _pow0(ll, rho)
        out = np.asarray(A, dtype=float) * bracket ** (1.0 / rho)
    return float(out) if np.ndim(out) == 0 else out


def _pow0(x, rho):
    """x**rho with the convention 0**rho -> inf for rho < 0 (CES limit)."""
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x).astype(float).copy()
    zero = flat == 0
    flat[zero] = 1.0
    flat = flat**rho
    flat[zero] = 0.0 if rho > 0 else np.inf
    return flat.reshape(x.shape) if x.ndim else flat[0]


def skill_wages(A, alpha, rho: float, L: LaborAggregates | np.ndarray):
    """Marginal products (w_H, w_L) of the CES technology.

    Both labor inputs must be strictly positive: for rho < 1 the marginal
    product of an absent skill diverges.
    """
    _check_ces_args(A, alpha, rho)
    L = L.as_array() if isinstance(L, LaborAggregates) else np.asarray(L, dtype=float)
    lh, ll = L[..., 0], L[..., 1]
    if np.any(lh <= 0) or np.any(ll <= 0):
        raise ValueError("skill_wages requires strictly positive labor of both skills")
    A = np.asarray(A, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    bracket = alpha * lh**rho + (1.0 - alpha) * ll**rho
    outer = bracket ** (1.0 / rho - 1.0)
    w_h = A * alpha * lh ** (rho - 1.0) * outer
    w_l = A * (1.0 - alpha) * ll ** (rho - 1.0) * outer
    return w_h, w_l


def effective_labor_unit(
    p: PersonType, married: bool, prefs: PreferenceParams
) -> float:
    """Effective labor supplied by one person of type p.

    Males are the unit of measurement; females carry exp(phi) and, when
    married, exp(phi + delta) for their skill.
    """
    if p.gender.value == "M":
        return 1.0
    s = 0 if p.skill.value == "H" else 1
    x = prefs.phi[s]
    if married:
        x = x + prefs.delta[s]
    return float(np.exp(x))


def effective_labor_units(prefs: PreferenceParams) -> tuple[np.ndarray, np.ndarray]:
    """(single, married) effective units for all 4 person types, as arrays."""
    phi = prefs.phi[SKILL_IDX]
    delta = prefs.delta[SKILL_IDX]
    single = np.where(IS_FEMALE, np.exp(phi), 1.0)
    married = np.where(IS_FEMALE, np.exp(phi + delta), 1.0)
    return single, married


def aggregate_effective_labor(
    populations: np.ndarray, matching: MatchingTable, prefs: PreferenceParams
) -> LaborAggregates:
    """Sum effective labor over the 8 (person type, marital status) cells.

    The matching table must be consistent with the populations: singles
    plus married cells reproduce each type's mass.
    """
    populations = np.asarray(populations, dtype=float)
    implied = matching.populations()
    if not np.allclose(implied, populations, rtol=1e-8, atol=1e-8):
        raise ValueError(
            f"matching table inconsistent with populations: {implied} vs {populations}"
        )
    unit_single, unit_married = effective_labor_units(prefs)
    married = matching.married_by_person()
    per_person = matching.singles * unit_single + married * unit_married
    eff = np.zeros(2)
    np.add.at(eff, SKILL_IDX, per_person)
    return LaborAggregates(eff_H=float(eff[0]), eff_L=float(eff[1]))


def individual_wage(skill_price, unit):
    """Wage income W = w * l, so ln W = ln w + ln l."""
    skill_price = np.asarray(skill_price, dtype=float)
    unit = np.asarray(unit, dtype=float)
    if np.any(skill_price <= 0) or np.any(unit <= 0):
        raise ValueError("skill price and effective unit must be positive")
    return skill_price * unit


def housing_demand(aggregate_income, rent, zeta: float):
    """Quantity demanded H = zeta * income / rent."""
    rent = np.asarray(rent, dtype=float)
    if np.any(rent <= 0):
        raise ValueError("rent must be positive")
    income = np.asarray(aggregate_income, dtype=float)
    if np.any(income < 0):
        raise ValueError("aggregate income must be nonnegative")
    return zeta * income / rent


def supply_rent(
    housing: HousingElasticityParams,
    land: tuple,
    quantity,
    kappa,
    construction_cost,
):
    """Marginal-cost rent: ln R = ln kappa + ln CC + psi * ln H."""
    qty = np.asarray(quantity, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    cc = np.asarray(construction_cost, dtype=float)
    if np.any(qty <= 0) or np.any(kappa <= 0) or np.any(cc <= 0):
        raise ValueError("quantity, interest rate, and construction cost must be positive")
    psi = housing.inverse_elasticity(land[0], land[1])
    if np.any(psi < 0):
        raise ValueError(f"implied inverse supply elasticity is negative: {psi}")
    return np.exp(np.log(kappa) + np.log(cc) + psi * np.log(qty))


def equilibrium_rent(
    aggregate_income,
    housing: HousingElasticityParams,
    land: tuple,
    kappa,
    construction_cost,
    zeta: float,
):
    """Rent and quantity where housing demand meets supply.

    The log-linear system solves in closed form:
    ln R = [ln kappa + ln CC + psi * ln(zeta * income)] / (1 + psi).
    """
    income = np.asarray(aggregate_income, dtype=float)
    if np.any(income <= 0):
        raise ValueError("aggregate income must be positive")
    kappa = np.asarray(kappa, dtype=float)
    cc = np.asarray(construction_cost, dtype=float)
    psi = np.asarray(housing.inverse_elasticity(land[0], land[1]), dtype=float)
    if np.any(1.0 + psi <= 0):
        raise ValueError("1 + psi must be positive for a housing equilibrium")
    log_r = (np.log(kappa) + np.log(cc) + psi * np.log(zeta * income)) / (1.0 + psi)
    rent = np.exp(log_r)
    qty = zeta * income / rent
    if rent.ndim == 0:
        return HousingOutcome(rent=float(rent), quantity=float(qty))
    return rent, qty


def invert_technology(w_h, w_l, L: LaborAggregates | np.ndarray, rho: float):
    """Recover (alpha, A) from wages and effective labor.

    alpha = w_H*L_H^(1-rho) / (w_H*L_H^(1-rho) + w_L*L_L^(1-rho)) and A is
    the matching scale; composing with skill_wages is the identity.
    """
    if rho >= 1 or rho == 0:
        raise ValueError("rho must be < 1 and nonzero")
    L = L.as_array() if isinstance(L, LaborAggregates) else np.asarray(L, dtype=float)
    w_h = np.asarray(w_h, dtype=float)
    w_l = np.asarray(w_l, dtype=float)
    lh, ll = L[..., 0], L[..., 1]
    if np.any(w_h <= 0) or np.any(w_l <= 0) or np.any(lh <= 0) or np.any(ll <= 0):
        raise ValueError("wages and labor must be strictly positive")
    term_h = w_h * lh ** (1.0 - rho)
    term_l = w_l * ll ** (1.0 - rho)
    alpha_hat = term_h / (term_h + term_l)
    a_hat = (term_h + term_l) ** (1.0 / rho) / (w_h * lh + w_l * ll) ** (1.0 / rho - 1.0)
    return alpha_hat, a_hat
