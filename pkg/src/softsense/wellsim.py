"""Synthetic single-phase well data and closed-form least-squares estimators.

A well is parameterized by four positive constants k1..k4 that combine choke,
density, and friction effects.  For a choke opening u drawn uniformly on
[0, 100], the steady-state pressure and flow are

    mu_p = (k3 + k1 k4 u^2) / (1 + k2 k4 u^2)
    mu_Q = sqrt(-k1 u^2 + k2 u^2 mu_p)

with Gaussian observation noise added to p and Q (Q's mean uses the
noise-free pressure).  The quadratic-form parametrization

    Q^2 = a0 + a1 u^2 p,    p = b0 + b1 Q^2

admits exact least-squares identification: two labeled observations, or two
unlabeled plus one labeled via the reduced coefficients c0 = b0 + a0 b1 and
c1 = a1 b1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import MultiUnitDataset, UnitData

U_MAX = 100.0
REJECTION_BUDGET = 1000

DEFAULT_PARAM_RANGES = {
    # sampled log-uniformly; k1 = k2 * p_out and k4 = droop / (k2 * U_MAX^2)
    "p_out": (5.0, 15.0),
    "k2": (0.002, 0.02),
    "k3": (40.0, 80.0),
    "droop": (0.25, 1.5),
}


class WellsimError(ValueError):
    pass


@dataclass(frozen=True)
class WellParams:
    """Combined physical constants; the fleet sampler draws all four
    strictly positive, but k1/k4 = 0 degenerate cases are representable."""

    k1: float
    k2: float
    k3: float
    k4: float

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) < 0 or self.k2 <= 0 or self.k3 <= 0:
            raise WellsimError(f"invalid well parameters: {self}")

    def pressure_mean(self, u) -> np.ndarray:
        u2 = np.asarray(u, dtype=np.float64) ** 2
        return (self.k3 + self.k1 * self.k4 * u2) / (1.0 + self.k2 * self.k4 * u2)

    def flow_mean(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        radicand = -self.k1 * u * u + self.k2 * u * u * self.pressure_mean(u)
        if (radicand < 0).any():
            raise WellsimError(
                f"negative flow radicand for parameters {self} at some u")
        return np.sqrt(radicand)

    def feasible(self) -> bool:
        """True when the flow radicand is non-negative on all of [0, U_MAX].

        mu_p decreases monotonically from k3 toward k1/k2, so positivity at
        u = U_MAX implies positivity everywhere.
        """
        return self.pressure_mean(U_MAX) >= self.k1 / self.k2


@dataclass
class WellObservation:
    u: float
    p: float
    Q: Optional[float]  # None on unlabeled observations


@dataclass(frozen=True)
class LsTheta:
    a0: float
    a1: float
    b0: float
    b1: float

    def as_array(self) -> np.ndarray:
        return np.asarray([self.a0, self.a1, self.b0, self.b1])


@dataclass(frozen=True)
class SemiLsEstimate:
    """Stage-two flow coefficients plus the stage-one reduced coefficients."""

    a0: float
    a1: float
    c0: float
    c1: float


# -- generation ----------------------------------------------------------------

def signal_sigmas(params: WellParams, noise_frac: float,
                  grid: int = 1000) -> tuple[float, float]:
    """Noise levels as a fraction of each noise-free signal's std over u."""
    u = np.linspace(0.0, U_MAX, grid)
    return (noise_frac * float(params.pressure_mean(u).std()),
            noise_frac * float(params.flow_mean(u).std()))


def generate_unit(params: WellParams, n: int, sigma_p: float, sigma_q: float,
                  rng: np.random.Generator) -> list[WellObservation]:
    """Draw n observations; Q stays strictly positive (offending draws are
    redrawn, which only ever affects near-zero choke openings)."""
    if n < 1:
        raise WellsimError("generate_unit needs n >= 1")
    if sigma_p < 0 or sigma_q < 0:
        raise WellsimError("noise levels must be non-negative")
    if not params.feasible():
        raise WellsimError(f"parameters {params} give a negative flow radicand")
    out = []
    budget = REJECTION_BUDGET
    while len(out) < n:
        u = rng.uniform(0.0, U_MAX)
        mu_p = float(params.pressure_mean(u))
        p = rng.normal(mu_p, sigma_p) if sigma_p else mu_p
        mu_q = float(params.flow_mean(u))
        q = rng.normal(mu_q, sigma_q) if sigma_q else mu_q
        if q <= 0.0:
            budget -= 1
            if budget <= 0:
                raise WellsimError(
                    "rejection budget exhausted while enforcing Q > 0; "
                    "lower the noise level")
            continue
        out.append(WellObservation(u=u, p=p, Q=q))
    return out


def sample_params(rng: np.random.Generator,
                  ranges: Optional[dict] = None) -> WellParams:
    ranges = dict(DEFAULT_PARAM_RANGES if ranges is None else ranges)

    def log_uniform(key):
        lo, hi = ranges[key]
        if not (0 < lo <= hi):
            raise WellsimError(f"bad range for {key!r}: ({lo}, {hi})")
        return math.exp(rng.uniform(math.log(lo), math.log(hi)))

    for _ in range(REJECTION_BUDGET):
        p_out = log_uniform("p_out")
        k2 = log_uniform("k2")
        k3 = log_uniform("k3")
        droop = log_uniform("droop")
        params = WellParams(k1=k2 * p_out, k2=k2, k3=k3,
                            k4=droop / (k2 * U_MAX ** 2))
        if k3 > p_out and params.feasible():
            return params
    raise WellsimError(
        f"rejection budget exhausted while sampling parameters from {ranges}")


def generate_fleet(m_units: int, n_labeled: int, n_unlabeled: int, n_test: int,
                   noise_frac: float = 0.01, seed: int = 0,
                   param_ranges: Optional[dict] = None,
                   unit_prefix: str = "unit") -> MultiUnitDataset:
    """Generate a fleet with per-unit parameter draws and disjoint splits.

    Each unit's RNG is split from the master seed, so generation order (or
    parallel generation) cannot change the data.
    """
    if m_units < 1:
        raise WellsimError("generate_fleet needs at least one unit")
    if min(n_labeled, n_unlabeled, n_test) < 0:
        raise WellsimError("split sizes must be non-negative")
    master = np.random.SeedSequence(seed)
    children = master.spawn(m_units)
    width = max(2, len(str(m_units - 1)))
    units, params_log = [], {}
    for i in range(m_units):
        rng = np.random.default_rng(children[i])
        params = sample_params(rng, param_ranges)
        sigma_p, sigma_q = signal_sigmas(params, noise_frac)
        unit_id = f"{unit_prefix}{i:0{width}d}"
        n_total = n_labeled + n_unlabeled + n_test
        obs = generate_unit(params, n_total, sigma_p, sigma_q, rng) if n_total else []
        lab = obs[:n_labeled]
        unl = obs[n_labeled:n_labeled + n_unlabeled]
        tst = obs[n_labeled + n_unlabeled:]
        units.append(UnitData(
            unit_id=unit_id,
            x_labeled=np.asarray([[o.u, o.p] for o in lab]).reshape(-1, 2),
            y_labeled=np.asarray([[o.Q] for o in lab]).reshape(-1, 1),
            x_unlabeled=np.asarray([[o.u, o.p] for o in unl]).reshape(-1, 2),
            x_test=np.asarray([[o.u, o.p] for o in tst]).reshape(-1, 2),
            y_test=np.asarray([[o.Q] for o in tst]).reshape(-1, 1),
            labeled_ids=[(unit_id, j) for j in range(len(lab))],
            unlabeled_ids=[(unit_id, n_labeled + j) for j in range(len(unl))],
            test_ids=[(unit_id, n_labeled + n_unlabeled + j) for j in range(len(tst))],
        ))
        params_log[unit_id] = {"k1": params.k1, "k2": params.k2,
                               "k3": params.k3, "k4": params.k4,
                               "sigma_p": sigma_p, "sigma_q": sigma_q}
    dataset = MultiUnitDataset(units=units)
    dataset.meta = {
        "seed": seed,
        "noise_frac": noise_frac,
        "param_ranges": {k: list(v) for k, v in
                         (param_ranges or DEFAULT_PARAM_RANGES).items()},
        "counts": {"labeled": n_labeled, "unlabeled": n_unlabeled, "test": n_test},
        "unit_params": params_log,
        "scaler": dataset.scaler().to_dict() if n_labeled + n_unlabeled else None,
    }
    return dataset


def induced_quadratic_coeffs(params: WellParams) -> LsTheta:
    """Constant coefficients of the pressure equation induced by k1..k4.

    The flow equation's constant term is u-dependent (a0 = -k1 u^2 at each
    observation), so only (a1, b0, b1) are global: a1 = k2, b0 = k3,
    b1 = -k4.  The returned a0 is the u = 1 value, -k1.
    """
    return LsTheta(a0=-params.k1, a1=params.k2, b0=params.k3, b1=-params.k4)


# -- companion quadratic model (used by the LS identifiability checks) --------

def quadratic_observation(theta: LsTheta, u: float,
                          rng: Optional[np.random.Generator] = None,
                          sigma_p: float = 0.0,
                          sigma_q: float = 0.0) -> WellObservation:
    """Simulate one observation of the constant-coefficient quadratic model."""
    denom = 1.0 - theta.a1 * theta.b1 * u * u
    if abs(denom) < 1e-12:
        raise WellsimError(f"singular pressure equation at u={u}")
    p = (theta.b0 + theta.a0 * theta.b1) / denom
    q2 = theta.a0 + theta.a1 * u * u * p
    if q2 < 0:
        raise WellsimError(f"negative squared flow at u={u} for {theta}")
    q = math.sqrt(q2)
    if rng is not None:
        p = rng.normal(p, sigma_p) if sigma_p else p
        q = rng.normal(q, sigma_q) if sigma_q else q
    return WellObservation(u=u, p=p, Q=q)


# -- least-squares estimators ----------------------------------------------

def _canonical_lstsq(rows: list, rhs: list) -> np.ndarray:
    """Least squares on lexicographically sorted rows, so the result is
    exactly invariant to the order the observations arrived in."""
    stacked = np.column_stack([np.asarray(rows), np.asarray(rhs)])
    order = np.lexsort(stacked.T[::-1])
    stacked = stacked[order]
    solution, *_ = np.linalg.lstsq(stacked[:, :-1], stacked[:, -1], rcond=None)
    return solution


def ls_supervised(triples: Sequence[tuple[float, float, float]]) -> LsTheta:
    """Least-squares fit of (a0, a1, b0, b1) from labeled (u, p, Q) triples."""
    triples = list(triples)
    if len(triples) < 2:
        raise WellsimError("ls_supervised needs at least 2 labeled triples")
    rows, rhs = [], []
    for u, p, q in triples:
        rows.append([1.0, u * u * p, 0.0, 0.0])
        rhs.append(q * q)
        rows.append([0.0, 0.0, 1.0, q * q])
        rhs.append(p)
    rank = np.linalg.matrix_rank(np.asarray(rows))
    if rank < 4:
        raise WellsimError(
            f"supervised system is rank-deficient (rank {rank} < 4); "
            "provide observations at distinct choke openings")
    theta = _canonical_lstsq(rows, rhs)
    return LsTheta(*map(float, theta))


def ls_semisupervised(pairs: Sequence[tuple[float, float]],
                      triples: Sequence[tuple[float, float, float]]) -> SemiLsEstimate:
    """Two-stage fit: (c0, c1) from unlabeled pairs, then (a0, a1) using the
    relation c1 Q^2 = c1 a0 + (p - c0) a1 on labeled triples."""
    pairs, triples = list(pairs), list(triples)
    if len(pairs) < 2:
        raise WellsimError(
            "semi-supervised stage 1 needs at least 2 unlabeled (u, p) pairs")
    if len(triples) < 1:
        raise WellsimError(
            "semi-supervised stage 2 needs at least 1 labeled triple")

    rows_unsup = [[1.0, u * u * p] for u, p in pairs]
    rhs_unsup = [p for _, p in pairs]
    if np.linalg.matrix_rank(np.asarray(rows_unsup)) < 2:
        raise WellsimError(
            "semi-supervised stage 1 is rank-deficient; "
            "unlabeled pairs need distinct choke openings")
    c = _canonical_lstsq(rows_unsup, rhs_unsup)
    c0, c1 = float(c[0]), float(c[1])

    rows, rhs = [], []
    for u, p, q in triples:
        rows.append([1.0, u * u * p])
        rhs.append(q * q)
        rows.append([c1, p - c0])
        rhs.append(c1 * q * q)
    if np.linalg.matrix_rank(np.asarray(rows)) < 2:
        raise WellsimError("semi-supervised stage 2 is rank-deficient")
    theta = _canonical_lstsq(rows, rhs)
    return SemiLsEstimate(a0=float(theta[0]), a1=float(theta[1]), c0=c0, c1=c1)


def labeled_triples(dataset: MultiUnitDataset, unit_id: str) -> list[tuple]:
    u = dataset.unit(unit_id)
    return [(float(x[0]), float(x[1]), float(y[0]))
            for x, y in zip(u.x_labeled, u.y_labeled)]


def unlabeled_pairs(dataset: MultiUnitDataset, unit_id: str) -> list[tuple]:
    u = dataset.unit(unit_id)
    return [(float(x[0]), float(x[1])) for x in u.x_unlabeled]
