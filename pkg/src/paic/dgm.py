"""The eight data-generating mechanisms of the simulation study.

Each mechanism draws two i.i.d. covariates, assigns trial membership through
a logistic model whose intercept is calibrated to a marginal probability of
0.5 for trial b, randomizes arms 1:1 within trial, and generates outcomes from

    Y = x1 + 2 x2 + (1 + 2 x1) I(Z=A) + I(Z=B) + eps,   eps ~ N(0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .model import CovariateSet, TrialIPD, ValidationError

FAMILIES = ("normal", "trunc_lognormal", "bimodal_tight", "bimodal_wide")
COVARIATES = ("x1", "x2")

LOGNORMAL_SDLOG = 0.5
LOGNORMAL_CAP = 5.0
MIXTURE_MEANS = (0.0, 3.0)
MIXTURE_SD = {"bimodal_tight": 0.5, "bimodal_wide": 1.0}

BRACKET_LIMIT = 1e3


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgmSpec:
    id: int
    family: str
    delta: int
    beta0: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown covariate family {self.family!r}")
        if self.delta not in (1, -1):
            raise ValueError("delta must be +1 or -1")

    @property
    def form(self) -> str:
        """Functional form of the assignment model shared by a DGM pair."""
        return {"normal": "quadratic", "trunc_lognormal": "linear"}.get(
            self.family, "scaled_quadratic")

    @property
    def positivity_violation(self) -> bool:
        return self.id % 2 == 0

    def with_beta0(self, beta0: float) -> DgmSpec:
        return replace(self, beta0=float(beta0))


DGMS = {
    1: DgmSpec(1, "normal", 1),
    2: DgmSpec(2, "normal", -1),
    3: DgmSpec(3, "trunc_lognormal", -1),
    4: DgmSpec(4, "trunc_lognormal", 1),
    5: DgmSpec(5, "bimodal_tight", 1),
    6: DgmSpec(6, "bimodal_tight", -1),
    7: DgmSpec(7, "bimodal_wide", 1),
    8: DgmSpec(8, "bimodal_wide", -1),
}


def get_dgm(dgm_id: int) -> DgmSpec:
    try:
        return DGMS[int(dgm_id)]
    except KeyError:
        raise ValueError(f"DGM id must be in 1..8, got {dgm_id}") from None


# Coefficient on beta0 inside the bracket, per functional form.
_BETA0_COEF = {"quadratic": 1.0, "linear": 2.0, "scaled_quadratic": 0.5}


def _covariate_part(form: str, x1, x2):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if form == "quadratic":
        # x2 enters linearly, as printed for DGM-1/2.
        return x1 - 0.5 * x1**2 + x2 - 0.5 * x2
    if form == "linear":
        return 2.0 * x1 + 2.0 * x2
    return 0.5 * x1 - 0.5 * x1**2 + 0.5 * x2 - 0.5 * x2**2


def linear_predictor(dgm: DgmSpec, x1, x2):
    """Trial-b assignment log-odds, delta * (c * beta0 + f(x1, x2))."""
    if dgm.beta0 is None:
        raise CalibrationError(f"uncalibrated DGM {dgm.id}: beta0 is unset")
    c = _BETA0_COEF[dgm.form]
    return dgm.delta * (c * dgm.beta0 + _covariate_part(dgm.form, x1, x2))


def assignment_probability(dgm: DgmSpec, x1, x2):
    return expit(linear_predictor(dgm, x1, x2))


def sample_covariates(dgm: DgmSpec, n: int, rng: np.random.Generator) -> CovariateSet:
    if n <= 0:
        raise ValueError("n must be positive")
    if dgm.family == "normal":
        x = rng.standard_normal((n, 2))
    elif dgm.family == "trunc_lognormal":
        x = np.minimum(rng.lognormal(0.0, LOGNORMAL_SDLOG, (n, 2)), LOGNORMAL_CAP)
    else:
        upper = rng.random((n, 2)) < 0.5
        centers = np.where(upper, MIXTURE_MEANS[1], MIXTURE_MEANS[0])
        x = centers + MIXTURE_SD[dgm.family] * rng.standard_normal((n, 2))
    return CovariateSet(COVARIATES, x)


def solve_beta0(covariate_part: np.ndarray, beta0_coef: float, delta: int,
                tolerance: float = 1e-4) -> float:
    """Bisection for beta0 with mean(expit(delta*(c*beta0 + part))) = 0.5.

    The bracket starts at [-1, 1] and doubles until the root is enclosed.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    part = np.asarray(covariate_part, dtype=float)
    slope = delta * beta0_coef

    def excess(b):
        return expit(slope * b + delta * part).mean() - 0.5

    lo, hi = -1.0, 1.0
    f_lo, f_hi = excess(lo), excess(hi)
    # mean probability increases in beta0 when slope > 0
    sign = 1.0 if slope > 0 else -1.0
    while sign * f_lo > 0 or sign * f_hi < 0:
        lo, hi = 2 * lo, 2 * hi
        if hi > BRACKET_LIMIT:
            raise CalibrationError(
                "calibration failed: no sign change within +/-1e3")
        f_lo, f_hi = excess(lo), excess(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = excess(mid)
        if abs(f_mid) <= tolerance:
            return mid
        if sign * f_mid < 0:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("calibration failed: bisection did not reach tolerance")


def calibrate_beta0(dgm: DgmSpec, n_calibration: int, tolerance: float,
                    rng: np.random.Generator) -> float:
    x = sample_covariates(dgm, n_calibration, rng).values
    part = _covariate_part(dgm.form, x[:, 0], x[:, 1])
    return solve_beta0(part, _BETA0_COEF[dgm.form], dgm.delta, tolerance)


@dataclass(frozen=True, eq=False)
class SuperPopulation:
    covariates: CovariateSet
    trial: np.ndarray
    pi: np.ndarray

    def stratum(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.trial == label)


def generate_superpopulation(dgm: DgmSpec, n: int,
                             rng: np.random.Generator) -> SuperPopulation:
    cov = sample_covariates(dgm, n, rng)
    x = cov.values
    pi = assignment_probability(dgm, x[:, 0], x[:, 1])
    trial = np.where(rng.random(n) < pi, "b", "a")
    pi.setflags(write=False)
    trial.setflags(write=False)
    return SuperPopulation(cov, trial, pi)


def simulate_outcome(x1, x2, arm, noise):
    """Outcome equation, vectorized over subjects."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    arm = np.asarray(arm)
    return (x1 + 2.0 * x2 + (1.0 + 2.0 * x1) * (arm == "A") + 1.0 * (arm == "B")
            + np.asarray(noise, dtype=float))


def sample_trials(pop: SuperPopulation, n_per_arm: int, rng: np.random.Generator,
                  assign_rng: np.random.Generator | None = None,
                  noise_rng: np.random.Generator | None = None):
    """Draw trial a (arms A, C) and trial b (arms B, C) from the population.

    Subjects are drawn without replacement within each trial stratum and
    randomized to exactly ``n_per_arm`` per arm.
    """
    assign_rng = rng if assign_rng is None else assign_rng
    noise_rng = rng if noise_rng is None else noise_rng
    trials = []
    for label, arms in (("a", ("A", "C")), ("b", ("B", "C"))):
        stratum = pop.stratum(label)
        size = 2 * n_per_arm
        if stratum.size < size:
            raise ValidationError(
                f"stratum {label} has {stratum.size} subjects, {size} required")
        ids = np.sort(rng.choice(stratum, size=size, replace=False))
        arm = assign_rng.permutation(np.repeat(np.array(arms), n_per_arm))
        x = pop.covariates.values[ids]
        y = simulate_outcome(x[:, 0], x[:, 1], arm, noise_rng.standard_normal(size))
        trials.append(TrialIPD(label, CovariateSet(COVARIATES, x), arm, y, ids))
    return trials[0], trials[1]


def effect_in_stratum(pop: SuperPopulation, label: str = "b") -> tuple[float, float]:
    """Noise-free mean of Y(A) - Y(B) in a stratum, and 2 * mean(x1) there.

    The two agree algebraically under the fixed outcome model; both are
    returned so callers can check the identity.
    """
    x = pop.covariates.values[pop.stratum(label)]
    zero = np.zeros(x.shape[0])
    ya = simulate_outcome(x[:, 0], x[:, 1], np.full(x.shape[0], "A"), zero)
    yb = simulate_outcome(x[:, 0], x[:, 1], np.full(x.shape[0], "B"), zero)
    return float(np.mean(ya - yb)), float(2.0 * x[:, 0].mean())


def true_effect(dgm: DgmSpec, n: int, rng: np.random.Generator) -> float:
    """Marginal A-vs-B effect in the trial-b population, noise excluded."""
    pop = generate_superpopulation(dgm, n, rng)
    po, closed = effect_in_stratum(pop, "b")
    if abs(po - closed) > 1e-9 * max(1.0, abs(closed)):
        raise RuntimeError(f"truth identity violated: {po} vs {closed}")
    return po
