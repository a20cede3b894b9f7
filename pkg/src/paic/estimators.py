"""Point estimates of the A-vs-B effect in the trial-b population.

Anchored analyses use all four arms and contrast through the shared arm C;
unanchored analyses use arm A of trial a and arm B of trial b only, so the
weights are fit on the arm-A subjects against arm-B summaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .model import (AggregateData, CovariateSet, EstimateRecord, EstimatorSpec, MomentVector,
                    TrialIPD, ValidationError, covariate_moments)
from .weights import (LogisticFit, SingularFitError, WeightFit, effective_sample_size,
                      fit_logistic, maic_weights, psw_weights)

TrialView = Union[TrialIPD, AggregateData]

ARMS_USED = {
    "anchored": (("a", "A"), ("a", "C"), ("b", "B"), ("b", "C")),
    "unanchored": (("a", "A"), ("b", "B")),
}


class DegenerateArmError(ValueError):
    pass


@dataclass(frozen=True)
class ArmMeans:
    """Arm-level outcome means keyed by (trial, arm)."""

    entries: Mapping[tuple[str, str], tuple[float, str]]

    def __getitem__(self, key: tuple[str, str]) -> float:
        try:
            return self.entries[key][0]
        except KeyError:
            raise ValidationError(f"missing arm mean for trial {key[0]}, arm {key[1]}") from None


@dataclass(frozen=True, eq=False)
class Analysis:
    """Inputs of one estimator after restriction to the arms it uses."""

    spec: EstimatorSpec
    trial_a: TrialIPD
    b_ipd: TrialIPD | None
    b_agd: AggregateData | None

    @property
    def order(self) -> int:
        return {"maic1": 1, "maic2": 2}.get(self.spec.method, 1)

    def target(self) -> MomentVector:
        adj = self.spec.adjustment_set
        if self.b_agd is not None:
            return self.b_agd.moments.select(adj, self.order)
        return covariate_moments(self.b_ipd.covariates.select(adj), self.order)


def weighted_arm_mean(outcome, arm_labels, weights, arm: str) -> float:
    """Ratio estimator sum(w y) / sum(w) over subjects of ``arm``."""
    y = np.asarray(outcome, dtype=float)
    w = np.asarray(weights, dtype=float)
    mask = np.asarray(arm_labels) == arm
    if not mask.any():
        raise ValidationError(f"arm {arm!r} absent from data")
    total = w[mask].sum()
    if not total > 0:
        raise DegenerateArmError(f"degenerate arm weight for arm {arm!r}")
    return float(np.dot(w[mask], y[mask]) / total)


def estimate_unanchored(arms: ArmMeans) -> float:
    return arms[("a", "A")] - arms[("b", "B")]


def estimate_anchored(arms: ArmMeans) -> float:
    return (arms[("a", "A")] - arms[("a", "C")]) - (arms[("b", "B")] - arms[("b", "C")])


def prepare(spec: EstimatorSpec, trial_a: TrialIPD, trial_b_view: TrialView) -> Analysis:
    """Restrict both trials to the arms used and check view requirements."""
    a_arms = {"anchored": ("A", "C"), "unanchored": ("A",)}[spec.anchoring]
    b_arms = {"anchored": ("B", "C"), "unanchored": ("B",)}[spec.anchoring]
    missing = [a for a in a_arms if a not in trial_a.arms]
    if missing:
        raise ValidationError(f"trial a lacks arm(s) {missing} required for {spec.anchoring}")
    sub_a = trial_a.restrict_arms(a_arms)
    for name in spec.adjustment_set:
        sub_a.covariates.column(name)

    if isinstance(trial_b_view, TrialIPD):
        missing = [a for a in b_arms if a not in trial_b_view.arms]
        if missing:
            raise ValidationError(
                f"trial b lacks arm(s) {missing} required for {spec.anchoring}")
        for name in spec.adjustment_set:
            trial_b_view.covariates.column(name)
        sub_b = trial_b_view.restrict_arms(b_arms)
        if spec.method in ("maic1", "maic2"):
            # MAIC only ever sees trial b through its summaries
            from .inference import summarize_trial
            return Analysis(spec, sub_a, sub_b, summarize_trial(sub_b))
        return Analysis(spec, sub_a, sub_b, None)

    if spec.method == "psw":
        raise ValidationError("psw needs individual data for both trials")
    missing = [a for a in b_arms if a not in trial_b_view.arm_summaries]
    if missing:
        raise ValidationError(
            f"aggregate data lacks arm(s) {missing} required for {spec.anchoring}")
    analysis = Analysis(spec, sub_a, None, trial_b_view)
    if spec.method != "unweighted":
        analysis.target()
    return analysis


def fit_weights(analysis: Analysis) -> WeightFit:
    spec = analysis.spec
    a = analysis.trial_a
    if spec.method == "unweighted":
        w = np.ones(len(a))
        return WeightFit(w, True, float(len(a)), "unweighted")
    feats_a = a.covariates.select(spec.adjustment_set)
    if spec.method == "psw":
        fit = fit_membership(analysis)
        return psw_weights(fit, feats_a)
    return maic_weights(feats_a, analysis.target(), analysis.order)


def fit_membership(analysis: Analysis) -> LogisticFit:
    """Logistic model for trial-b membership on the stacked subjects."""
    adj = analysis.spec.adjustment_set
    xa = analysis.trial_a.covariates.select(adj).values
    xb = analysis.b_ipd.covariates.select(adj).values
    stacked = CovariateSet(adj, np.vstack([xa, xb]))
    labels = np.concatenate([np.zeros(len(xa)), np.ones(len(xb))])
    return fit_logistic(stacked, labels)


def arm_means(analysis: Analysis, weights) -> ArmMeans:
    a = analysis.trial_a
    kind = "observed" if analysis.spec.method == "unweighted" else "weighted"
    entries = {}
    for trial, arm in ARMS_USED[analysis.spec.anchoring]:
        if trial == "a":
            entries[(trial, arm)] = (weighted_arm_mean(a.outcome, a.arm, weights, arm), kind)
        elif analysis.b_ipd is not None:
            b = analysis.b_ipd
            entries[(trial, arm)] = (float(b.outcome[b.arm == arm].mean()), "observed")
        else:
            entries[(trial, arm)] = (analysis.b_agd.arm_summaries[arm].mean, "observed")
    return ArmMeans(entries)


def contrast(anchoring: str, arms: ArmMeans) -> float:
    if anchoring == "anchored":
        return estimate_anchored(arms)
    return estimate_unanchored(arms)


def run_estimator(spec: EstimatorSpec, trial_a: TrialIPD, trial_b_view: TrialView,
                  plan=None, *, iteration: int = 0, dgm: int | None = None,
                  dump=None) -> EstimateRecord:
    """Point estimate plus bootstrap standard error for one estimator.

    Weight-fit failures produce a record with ``converged=False`` instead of
    raising; only malformed inputs raise.
    """
    from .inference import BootstrapPlan, bootstrap_arm_variances, combine_variance

    plan = BootstrapPlan() if plan is None else plan
    analysis = prepare(spec, trial_a, trial_b_view)
    nan = float("nan")
    try:
        wfit = fit_weights(analysis)
    except (SingularFitError, ValidationError) as exc:
        return EstimateRecord(spec, nan, nan, nan, False, iteration, plan.seed, dgm,
                              diagnostic=str(exc))
    if not wfit.converged:
        # Weights from a failed fit carry no meaning, so neither does an estimate.
        return EstimateRecord(spec, nan, nan, nan, False, iteration, plan.seed, dgm,
                              diagnostic=wfit.diagnostic)
    try:
        delta = contrast(spec.anchoring, arm_means(analysis, wfit.weights))
    except DegenerateArmError as exc:
        return EstimateRecord(spec, nan, nan, wfit.ess, False, iteration, plan.seed, dgm,
                              diagnostic=str(exc))
    boot = bootstrap_arm_variances(analysis, plan)
    if dump is not None:
        dump(boot)
    se, _ = combine_variance(boot.variances, spec.anchoring, delta)
    diagnostic = "" if boot.reliable else (
        f"bootstrap unreliable: {boot.n_failed}/{plan.replicates} replicate fits failed")
    return EstimateRecord(spec, delta, se, wfit.ess, boot.reliable, iteration, plan.seed,
                          dgm, diagnostic=diagnostic, n_failed_replicates=boot.n_failed)
