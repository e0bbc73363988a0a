"""Shared domain types, canonical orderings, and economy validation.

Every module in the package indexes people, couples, and cities the same
way.  The four person types are ordered (M,H), (M,L), (F,H), (F,L); the
four couple types (husband skill, wife skill) are ordered (H,H), (H,L),
(L,H), (L,L); cities are lexicographic by id.  All population quantities
are continuous masses, never integer head counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SkillType",
    "Gender",
    "PersonType",
    "CoupleType",
    "PERSON_TYPES",
    "COUPLE_TYPES",
    "HUSBAND_OF",
    "WIFE_OF",
    "COUPLE_OF",
    "TRANSFER_SIGN",
    "SKILL_IDX",
    "IS_FEMALE",
    "PreferenceParams",
    "HousingElasticityParams",
    "CityPrimitives",
    "EconomyPrimitives",
    "MatchingTable",
    "EquilibriumState",
    "Violation",
    "validate_economy",
    "canonical_indices",
]


class SkillType(Enum):
    """Education level. H (college) orders above L for labeling only."""

    H = "H"
    L = "L"


class Gender(Enum):
    M = "M"
    F = "F"


class PersonType(Enum):
    """Gender x skill; canonical order MH, ML, FH, FL."""

    MH = (Gender.M, SkillType.H)
    ML = (Gender.M, SkillType.L)
    FH = (Gender.F, SkillType.H)
    FL = (Gender.F, SkillType.L)

    @property
    def gender(self) -> Gender:
        return self.value[0]

    @property
    def skill(self) -> SkillType:
        return self.value[1]

    @property
    def index(self) -> int:
        return PERSON_TYPES.index(self)


class CoupleType(Enum):
    """(husband skill, wife skill); canonical order HH, HL, LH, LL."""

    HH = (SkillType.H, SkillType.H)
    HL = (SkillType.H, SkillType.L)
    LH = (SkillType.L, SkillType.H)
    LL = (SkillType.L, SkillType.L)

    @property
    def husband_skill(self) -> SkillType:
        return self.value[0]

    @property
    def wife_skill(self) -> SkillType:
        return self.value[1]

    @property
    def index(self) -> int:
        return COUPLE_TYPES.index(self)


PERSON_TYPES: tuple[PersonType, ...] = (
    PersonType.MH,
    PersonType.ML,
    PersonType.FH,
    PersonType.FL,
)
COUPLE_TYPES: tuple[CoupleType, ...] = (
    CoupleType.HH,
    CoupleType.HL,
    CoupleType.LH,
    CoupleType.LL,
)

# Wiring between the person and couple index spaces.  All solver code works
# on arrays laid out in canonical order and uses these constants.
HUSBAND_OF = np.array([0, 0, 1, 1])  # couple index -> husband person index
WIFE_OF = np.array([2, 3, 2, 3])  # couple index -> wife person index
# COUPLE_OF[p, s]: couple formed by person p with a spouse of skill index s
# (0 = H, 1 = L).
COUPLE_OF = np.array([[0, 1], [2, 3], [0, 2], [1, 3]])
# Sign with which the stored (wife-side) transfer enters person p's married
# utility: +1 for women, -1 for men.  Antisymmetry is structural.
TRANSFER_SIGN = np.array([-1.0, -1.0, 1.0, 1.0])
SKILL_IDX = np.array([0, 1, 0, 1])  # person index -> skill index (0=H, 1=L)
IS_FEMALE = np.array([False, False, True, True])

HUSBAND_OF.setflags(write=False)
WIFE_OF.setflags(write=False)
COUPLE_OF.setflags(write=False)
TRANSFER_SIGN.setflags(write=False)
SKILL_IDX.setflags(write=False)
IS_FEMALE.setflags(write=False)


def _frozen(a, shape=None, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _married_by_person(couples: np.ndarray) -> np.ndarray:
    """Married mass per person type from the four couple cells."""
    out = np.zeros(4)
    for c in range(4):
        out[HUSBAND_OF[c]] += couples[c]
        out[WIFE_OF[c]] += couples[c]
    return out


@dataclass(frozen=True)
class PreferenceParams:
    """National preference and calibration parameters for one period.

    mu is a (4, 2) array over (person type, spouse skill) holding the
    nonpecuniary utility of that match relative to staying single.  phi and
    delta are (2,) arrays over skill: phi is the female effective-labor
    shifter, delta the additional discount for married females.
    """

    sigma_eps: float
    sigma_nu: float
    eta: float
    zeta: float
    chi: float
    mu: np.ndarray
    phi: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu, (4, 2)))
        object.__setattr__(self, "phi", _frozen(self.phi, (2,)))
        object.__setattr__(self, "delta", _frozen(self.delta, (2,)))

    def mu_of(self, person: PersonType, spouse_skill: SkillType) -> float:
        return float(self.mu[person.index, 0 if spouse_skill is SkillType.H else 1])


@dataclass(frozen=True)
class HousingElasticityParams:
    """Inverse housing-supply elasticity as a function of land constraints."""

    psi0: float
    psi1: float
    psi2: float

    def inverse_elasticity(self, land_unavail, land_reg):
        """psi = psi0 + psi1*exp(geo index) + psi2*exp(reg index)."""
        return (
            self.psi0
            + self.psi1 * np.exp(np.asarray(land_unavail, dtype=float))
            + self.psi2 * np.exp(np.asarray(land_reg, dtype=float))
        )


@dataclass(frozen=True)
class CityPrimitives:
    """Exogenous per-city primitives for one period."""

    city_id: str
    productivity: float
    skill_share: float
    construction_cost: float
    land_unavail: float
    land_reg: float
    amenity_obs: float
    amenity_unobs: np.ndarray  # (4,) by person type
    interest_rate: float  # national, replicated per city for convenience

    def __post_init__(self):
        object.__setattr__(self, "amenity_unobs", _frozen(self.amenity_unobs, (4,)))


@dataclass(frozen=True)
class EconomyPrimitives:
    """One period's economy.  Cities are stored in canonical (lexicographic)
    order regardless of construction order."""

    cities: tuple[CityPrimitives, ...]
    national_population: np.ndarray  # (4,) by person type
    tech_rho: float
    housing: HousingElasticityParams
    prefs: PreferenceParams
    period_label: str = ""

    def __post_init__(self):
        ordered = tuple(sorted(self.cities, key=lambda c: c.city_id))
        object.__setattr__(self, "cities", ordered)
        object.__setattr__(
            self, "national_population", _frozen(self.national_population, (4,))
        )

    @property
    def n_cities(self) -> int:
        return len(self.cities)

    @property
    def city_ids(self) -> tuple[str, ...]:
        return tuple(c.city_id for c in self.cities)

    # Stacked-array views used by the solvers; row order == canonical order.
    def productivity_arr(self) -> np.ndarray:
        return np.array([c.productivity for c in self.cities])

    def skill_share_arr(self) -> np.ndarray:
        return np.array([c.skill_share for c in self.cities])

    def construction_cost_arr(self) -> np.ndarray:
        return np.array([c.construction_cost for c in self.cities])

    def land_unavail_arr(self) -> np.ndarray:
        return np.array([c.land_unavail for c in self.cities])

    def land_reg_arr(self) -> np.ndarray:
        return np.array([c.land_reg for c in self.cities])

    def amenity_obs_arr(self) -> np.ndarray:
        return np.array([c.amenity_obs for c in self.cities])

    def amenity_unobs_arr(self) -> np.ndarray:
        return np.array([c.amenity_unobs for c in self.cities])

    def interest_rate_arr(self) -> np.ndarray:
        return np.array([c.interest_rate for c in self.cities])

    def psi_arr(self) -> np.ndarray:
        return self.housing.inverse_elasticity(
            self.land_unavail_arr(), self.land_reg_arr()
        )


@dataclass(frozen=True)
class MatchingTable:
    """Cleared marriage outcomes for one city.

    couples holds the mass of married pairs per couple type (male-side
    flow); singles the mass of unmarried people per person type;
    choice_probs the (4, 3) conditional probabilities over the options
    (spouse H, spouse L, single) per person type.
    """

    couples: np.ndarray
    singles: np.ndarray
    choice_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "couples", _frozen(self.couples, (4,)))
        object.__setattr__(self, "singles", _frozen(self.singles, (4,)))
        object.__setattr__(self, "choice_probs", _frozen(self.choice_probs, (4, 3)))

    @classmethod
    def from_probs(cls, populations: np.ndarray, choice_probs: np.ndarray) -> "MatchingTable":
        """Table implied by choice probabilities at given populations.

        Couple cells are the male-side flows; singles are residual
        (population minus the cells touching the type), which keeps
        per-type accounting exact on both sides of the market.
        """
        populations = np.asarray(populations, dtype=float)
        probs = np.asarray(choice_probs, dtype=float)
        couples = np.empty(4)
        for c in range(4):
            h = HUSBAND_OF[c]
            wife_skill = SKILL_IDX[WIFE_OF[c]]
            couples[c] = populations[h] * probs[h, wife_skill]
        singles = np.maximum(populations - _married_by_person(couples), 0.0)
        return cls(couples=couples, singles=singles, choice_probs=probs)

    @classmethod
    def from_counts(cls, couples: np.ndarray, singles: np.ndarray) -> "MatchingTable":
        """Build a table (and implied choice probabilities) from cell counts."""
        couples = np.asarray(couples, dtype=float)
        singles = np.asarray(singles, dtype=float)
        probs = np.zeros((4, 3))
        for p in range(4):
            married_by_skill = np.zeros(2)
            for c in range(4):
                if HUSBAND_OF[c] == p:
                    married_by_skill[SKILL_IDX[WIFE_OF[c]]] += couples[c]
                if WIFE_OF[c] == p:
                    married_by_skill[SKILL_IDX[HUSBAND_OF[c]]] += couples[c]
            total = married_by_skill.sum() + singles[p]
            if total > 0:
                probs[p, 0] = married_by_skill[0] / total
                probs[p, 1] = married_by_skill[1] / total
                probs[p, 2] = singles[p] / total
            else:
                probs[p, 2] = 1.0
        return cls(couples=couples, singles=singles, choice_probs=probs)

    def married_by_person(self) -> np.ndarray:
        """Married mass per person type implied by the couple cells."""
        return _married_by_person(self.couples)

    def populations(self) -> np.ndarray:
        """Person masses implied by the table: singles + married cells."""
        return self.singles + self.married_by_person()


@dataclass(frozen=True)
class EquilibriumState:
    """Endogenous objects for every city, arrays in canonical city order.

    transfers holds, per couple type, the transfer received by the wife;
    the husband's is its negation.  NaN marks a sub-market that is
    degenerate (one side absent), where the transfer is undefined.
    """

    city_ids: tuple[str, ...]
    wage_H: np.ndarray  # (M,) skill rental prices
    wage_L: np.ndarray
    rent: np.ndarray  # (M,)
    transfers: np.ndarray  # (M, 4) wife-side, by couple type
    populations: np.ndarray  # (M, 4) by person type
    couples: np.ndarray  # (M, 4) married-pair masses by couple type
    singles: np.ndarray  # (M, 4)
    choice_probs: np.ndarray  # (M, 4, 3) options (spouse H, spouse L, single)
    eff_labor: np.ndarray  # (M, 2) effective labor by skill
    housing_qty: np.ndarray  # (M,)
    location_probs: np.ndarray  # (M, 4), columns sum to 1
    inclusive_value: np.ndarray  # (M, 4)
    marital_surplus: np.ndarray  # (M, 4) per-person
    period_label: str = ""

    def __post_init__(self):
        m = len(self.city_ids)
        object.__setattr__(self, "city_ids", tuple(self.city_ids))
        for name, shape in [
            ("wage_H", (m,)),
            ("wage_L", (m,)),
            ("rent", (m,)),
            ("transfers", (m, 4)),
            ("populations", (m, 4)),
            ("couples", (m, 4)),
            ("singles", (m, 4)),
            ("choice_probs", (m, 4, 3)),
            ("eff_labor", (m, 2)),
            ("housing_qty", (m,)),
            ("location_probs", (m, 4)),
            ("inclusive_value", (m, 4)),
            ("marital_surplus", (m, 4)),
        ]:
            object.__setattr__(self, name, _frozen(getattr(self, name), shape))

    @property
    def n_cities(self) -> int:
        return len(self.city_ids)

    def city_index(self, city_id: str) -> int:
        return self.city_ids.index(city_id)

    def matching(self, i: int) -> MatchingTable:
        return MatchingTable(
            couples=self.couples[i],
            singles=self.singles[i],
            choice_probs=self.choice_probs[i],
        )


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_economy."""

    city_id: str  # "" for economy-level violations
    field: str
    message: str


def validate_economy(econ: EconomyPrimitives) -> list[Violation]:
    """Check every economy invariant; an empty list means valid.

    Reporting only: never raises, and repeated calls return the same list.
    """
    out: list[Violation] = []

    def bad(city_id, fieldname, msg):
        out.append(Violation(city_id=city_id, field=fieldname, message=msg))

    if econ.n_cities < 1:
        bad("", "cities", "economy must contain at least one city")
        return out

    ids = econ.city_ids
    if len(set(ids)) != len(ids):
        bad("", "cities", "duplicate city ids")

    for c in econ.cities:
        if not c.productivity > 0:
            bad(c.city_id, "productivity", f"must be > 0, got {c.productivity}")
        if not (0 < c.skill_share < 1):
            bad(c.city_id, "skill_share", f"must lie in (0, 1), got {c.skill_share}")
        if not c.construction_cost > 0:
            bad(c.city_id, "construction_cost", f"must be > 0, got {c.construction_cost}")
        if not c.interest_rate > 0:
            bad(c.city_id, "interest_rate", f"must be > 0, got {c.interest_rate}")
        psi = float(econ.housing.inverse_elasticity(c.land_unavail, c.land_reg))
        if psi < 0:
            bad(c.city_id, "housing", f"implied inverse elasticity {psi} < 0")
        if not np.all(np.isfinite(c.amenity_unobs)):
            bad(c.city_id, "amenity_unobs", "non-finite amenity value")

    pop = econ.national_population
    if np.any(pop < 0):
        bad("", "national_population", "negative population mass")
    if not pop.sum() > 0:
        bad("", "national_population", "total population must be positive")

    if not econ.tech_rho < 1:
        bad("", "tech_rho", f"must be < 1, got {econ.tech_rho}")

    p = econ.prefs
    if not p.sigma_eps > 0:
        bad("", "sigma_eps", f"must be > 0, got {p.sigma_eps}")
    if not p.sigma_nu > 0:
        bad("", "sigma_nu", f"must be > 0, got {p.sigma_nu}")
    if not (0 < p.zeta < 1):
        bad("", "zeta", f"must lie in (0, 1), got {p.zeta}")
    if not (0 <= p.chi <= 1):
        bad("", "chi", f"must lie in [0, 1], got {p.chi}")
    if not np.all(np.isfinite(p.mu)):
        bad("", "mu", "non-finite nonpecuniary utility")

    return out


def canonical_indices(city_ids: Iterable[str] = ()) -> tuple[
    tuple[PersonType, ...], tuple[CoupleType, ...], tuple[str, ...]
]:
    """Fixed orderings used by every reduction and output file.

    Person types iterate (M,H), (M,L), (F,H), (F,L); couple types (H,H),
    (H,L), (L,H), (L,L); city ids sort lexicographically.
    """
    return PERSON_TYPES, COUPLE_TYPES, tuple(sorted(city_ids))
