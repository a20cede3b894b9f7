"""Domain types shared across the package and covariate-moment computation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

ARM_ALPHABET = ("A", "B", "C")
METHODS = ("unweighted", "psw", "maic1", "maic2")
ANCHORINGS = ("anchored", "unanchored")


class ValidationError(ValueError):
    """Input data violates a structural invariant."""


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CovariateSet:
    """Named covariate matrix, one row per subject."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        values = _frozen(self.values)
        if values.ndim == 1 and len(names) == 1:
            values = _frozen(values.reshape(-1, 1))
        if values.ndim != 2:
            raise ValidationError("covariate values must be a 2-D matrix")
        if values.shape[1] != len(names):
            raise ValidationError(
                f"{values.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate covariate names in {names}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            row, col = bad[0]
            raise ValidationError(
                f"non-finite value in row {row}, covariate {names[col]!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self._index(name)]

    def select(self, names: Sequence[str]) -> CovariateSet:
        idx = [self._index(n) for n in names]
        return CovariateSet(tuple(names), self.values[:, idx])

    def take(self, rows) -> CovariateSet:
        return CovariateSet(self.names, self.values[rows])

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(
                f"covariate {name!r} not found; available: {', '.join(self.names)}"
            ) from None


@dataclass(frozen=True, eq=False)
class TrialIPD:
    """Individual patient rows of one trial."""

    trial_id: str
    covariates: CovariateSet
    arm: np.ndarray
    outcome: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        arm = _frozen(self.arm, dtype="<U1")
        outcome = _frozen(self.outcome)
        n = len(self.covariates)
        if arm.shape != (n,) or outcome.shape != (n,):
            raise ValidationError(
                f"trial {self.trial_id}: covariates, arm and outcome lengths differ "
                f"({n}, {arm.shape[0]}, {outcome.shape[0]})")
        if self.ids is None:
            ids = _frozen(np.arange(n), dtype=np.int64)
        else:
            ids = _frozen(self.ids, dtype=np.int64)
            if ids.shape != (n,):
                raise ValidationError(f"trial {self.trial_id}: id length differs")
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.outcome.shape[0]

    @property
    def arms(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.arm.tolist())))

    def take(self, rows) -> TrialIPD:
        return TrialIPD(self.trial_id, self.covariates.take(rows), self.arm[rows],
                        self.outcome[rows], self.ids[rows])

    def restrict_arms(self, arms: Sequence[str]) -> TrialIPD:
        return self.take(np.flatnonzero(np.isin(self.arm, list(arms))))


@dataclass(frozen=True, eq=False)
class MomentVector:
    """Per-covariate means and, for second-order summaries, variances."""

    names: tuple[str, ...]
    means: np.ndarray
    variances: np.ndarray | None
    order: int
    n: int

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValidationError(f"moment order must be 1 or 2, got {self.order}")
        means = _frozen(self.means)
        if means.shape != (len(self.names),):
            raise ValidationError("one mean per covariate required")
        if (self.variances is None) != (self.order == 1):
            raise ValidationError("variances must be present iff order is 2")
        variances = None
        if self.variances is not None:
            variances = _frozen(self.variances)
            if variances.shape != means.shape:
                raise ValidationError("one variance per covariate required")
            if np.any(variances < 0) or not np.all(np.isfinite(variances)):
                raise ValidationError("variances must be finite and nonnegative")
        if not np.all(np.isfinite(means)):
            raise ValidationError("means must be finite")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    def select(self, names: Sequence[str], order: int | None = None) -> MomentVector:
        """Subset to ``names``; optionally drop to first order."""
        order = self.order if order is None else order
        if order > self.order:
            raise ValidationError(
                f"second-order target requested but only means are available")
        missing = [n for n in names if n not in self.names]
        if missing:
            raise ValidationError(
                f"covariate(s) {missing} not in aggregate data; "
                f"available: {', '.join(self.names)}")
        idx = [self.names.index(n) for n in names]
        variances = self.variances[idx] if order == 2 else None
        return MomentVector(tuple(names), self.means[idx], variances, order, self.n)


@dataclass(frozen=True)
class ArmSummary:
    mean: float
    n: int
    variance_of_mean: float | None = None


@dataclass(frozen=True)
class AggregateData:
    """Published-style summary of one trial."""

    trial_id: str
    moments: MomentVector
    arm_summaries: Mapping[str, ArmSummary]

    def __post_init__(self):
        if not self.arm_summaries:
            raise ValidationError(f"trial {self.trial_id}: no arm summaries")
        for arm, s in self.arm_summaries.items():
            if s.n <= 0:
                raise ValidationError(f"trial {self.trial_id}, arm {arm}: n must be > 0")
            if not np.isfinite(s.mean):
                raise ValidationError(f"trial {self.trial_id}, arm {arm}: non-finite mean")
        object.__setattr__(self, "arm_summaries", dict(self.arm_summaries))

    @property
    def arms(self) -> tuple[str, ...]:
        return tuple(sorted(self.arm_summaries))


@dataclass(frozen=True)
class EstimatorSpec:
    method: str
    anchoring: str
    adjustment_set: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.anchoring not in ANCHORINGS:
            raise ValidationError(f"unknown anchoring {self.anchoring!r}")
        adj = tuple(self.adjustment_set)
        if (len(adj) == 0) != (self.method == "unweighted"):
            raise ValidationError(
                "adjustment set must be empty exactly when method is unweighted")
        object.__setattr__(self, "adjustment_set", adj)

    @property
    def adjustment_label(self) -> str:
        return "+".join(self.adjustment_set) if self.adjustment_set else "none"


@dataclass(frozen=True)
class EstimateRecord:
    """One treatment-effect estimate with its uncertainty and provenance."""

    spec: EstimatorSpec
    delta_hat: float
    se: float
    ess: float
    converged: bool
    iteration: int = 0
    seed: int = 0
    dgm: int | None = None
    diagnostic: str = ""
    n_failed_replicates: int = 0
    link: str = "identity"
    ci_low: float = field(init=False)
    ci_high: float = field(init=False)

    def __post_init__(self):
        # Plain Python scalars keep records directly serializable.
        for name in ("delta_hat", "se", "ess"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "converged", bool(self.converged))
        object.__setattr__(self, "n_failed_replicates", int(self.n_failed_replicates))
        object.__setattr__(self, "ci_low", self.delta_hat - 1.96 * self.se)
        object.__setattr__(self, "ci_high", self.delta_hat + 1.96 * self.se)


def covariate_moments(covariates: CovariateSet, order: int) -> MomentVector:
    """Column means and, for ``order=2``, sample variances (n-1 divisor)."""
    values = covariates.values
    n = values.shape[0]
    if n == 0:
        raise ValidationError("no subjects")
    if order not in (1, 2):
        raise ValidationError(f"moment order must be 1 or 2, got {order}")
    means = values.mean(axis=0)
    variances = None
    if order == 2:
        if n < 2:
            raise ValidationError("variance undefined for fewer than 2 subjects")
        variances = values.var(axis=0, ddof=1)
    return MomentVector(covariates.names, means, variances, order, n)


def validate_trial(ipd: TrialIPD, expected_arms) -> TrialIPD:
    """Check arm labels and finiteness; returns ``ipd`` unchanged."""
    expected = set(expected_arms)
    unknown = np.flatnonzero(~np.isin(ipd.arm, sorted(expected)))
    if unknown.size:
        row = int(unknown[0])
        raise ValidationError(
            f"trial {ipd.trial_id}: unknown arm {ipd.arm[row]!r} in row {row} "
            f"(expected one of {sorted(expected)})")
    bad = np.flatnonzero(~np.isfinite(ipd.outcome))
    if bad.size:
        raise ValidationError(
            f"trial {ipd.trial_id}: non-finite outcome in row {int(bad[0])}")
    present = set(ipd.arm.tolist())
    empty = sorted(expected - present)
    if empty:
        raise ValidationError(f"trial {ipd.trial_id}: empty arm(s) {empty}")
    return ipd
