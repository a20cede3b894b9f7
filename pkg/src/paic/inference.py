"""Nonparametric bootstrap variances of arm means and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .estimators import ARMS_USED, Analysis
from .model import (AggregateData, ArmSummary, TrialIPD, ValidationError,
                    covariate_moments)
from .streams import replicate_stream
from .weights import irls_batch, maic_design, maic_newton_batch

# independent stream parts for the two trials within one replicate
PART_A, PART_B = 0, 1
Z95 = 1.96


@dataclass(frozen=True)
class BootstrapPlan:
    replicates: int = 2000
    seed: int = 0
    stratify_by_arm: bool = field(default=True, init=False)
    refit_weights: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("at least one bootstrap replicate required")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Per-replicate arm means and the resulting variances."""

    variances: Mapping[tuple[str, str], float]
    replicate_means: Mapping[tuple[str, str], np.ndarray]
    fit_ok: np.ndarray
    n_failed: int

    @property
    def reliable(self) -> bool:
        return bool(2 * self.n_failed <= self.fit_ok.size and self.fit_ok.sum() >= 2)

    def dump_rows(self):
        """Rows of (replicate, trial, arm, mean, converged)."""
        for (trial, arm), means in sorted(self.replicate_means.items()):
            for r, m in enumerate(means):
                yield r, trial, arm, float(m), bool(self.fit_ok[r])


@lru_cache(maxsize=256)
def _stratified_draws(seed: int, replicates: int, part: int,
                      arm_sizes: tuple[tuple[str, int], ...]) -> np.ndarray:
    """Positions drawn with replacement within each arm, arms in sorted order.

    Returns an array of shape (replicates, total) holding, per arm block,
    positions in ``0..n_arm-1``.
    """
    total = sum(n for _, n in arm_sizes)
    out = np.empty((replicates, total), dtype=np.int64)
    for r in range(replicates):
        rng = replicate_stream(seed, r, part)
        start = 0
        for _, n in arm_sizes:
            out[r, start:start + n] = rng.integers(0, n, n)
            start += n
    out.setflags(write=False)
    return out


def stratified_resample(ipd: TrialIPD, plan: BootstrapPlan, part: int) -> np.ndarray:
    """Row indices of ``plan.replicates`` arm-stratified resamples of ``ipd``.

    Arm sizes are preserved exactly in every replicate.
    """
    arms = ipd.arms
    rows = [np.flatnonzero(ipd.arm == a) for a in arms]
    sizes = tuple((a, r.size) for a, r in zip(arms, rows))
    draws = _stratified_draws(plan.seed, plan.replicates, part, sizes)
    idx = np.empty_like(draws)
    start = 0
    for r in rows:
        idx[:, start:start + r.size] = r[draws[:, start:start + r.size]]
        start += r.size
    return idx


def _arm_mean_replicates(y: np.ndarray, arm: np.ndarray, w: np.ndarray, label: str):
    mask = arm == label
    num = (w * y * mask).sum(axis=1)
    den = (w * mask).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den


def trial_arm_replicates(ipd: TrialIPD, plan: BootstrapPlan, part: int = PART_B):
    """Unweighted arm-mean replicates for each arm of ``ipd``."""
    idx = stratified_resample(ipd, plan, part)
    y, arm = ipd.outcome[idx], ipd.arm[idx]
    ones = np.ones_like(y)
    return {a: _arm_mean_replicates(y, arm, ones, a) for a in ipd.arms}


def summarize_trial(ipd: TrialIPD, plan: BootstrapPlan | None = None) -> AggregateData:
    """Aggregate view of a trial: covariate means/variances and arm means.

    With a plan, each arm summary also carries the bootstrap variance of its
    mean, which is what an aggregate-data analysis needs for its standard
    error.
    """
    moments = covariate_moments(ipd.covariates, 2)
    var_of_mean = {}
    if plan is not None:
        reps = trial_arm_replicates(ipd, plan, PART_B)
        var_of_mean = {a: _variance(m) for a, m in reps.items()}
    arms = {}
    for a in ipd.arms:
        y = ipd.outcome[ipd.arm == a]
        arms[a] = ArmSummary(float(y.mean()), int(y.size), var_of_mean.get(a))
    return AggregateData(ipd.trial_id, moments, arms)


def _variance(values: np.ndarray) -> float:
    if values.size < 2:
        return float("nan")
    return float(np.var(values, ddof=1))


def _replicate_weights(analysis: Analysis, idx_a: np.ndarray, idx_b: np.ndarray | None):
    """Refit weights on every resample; returns (weights (B, n), ok (B,))."""
    spec = analysis.spec
    nrep, n = idx_a.shape
    if spec.method == "unweighted":
        return np.ones((nrep, n)), np.ones(nrep, dtype=bool)
    xa = analysis.trial_a.covariates.select(spec.adjustment_set).values[idx_a]
    if spec.method == "psw":
        xb = analysis.b_ipd.covariates.select(spec.adjustment_set).values[idx_b]
        x = np.concatenate([xa, xb], axis=1)
        design = np.concatenate([np.ones(x.shape[:2] + (1,)), x], axis=2)
        labels = np.concatenate([np.zeros((nrep, n)), np.ones((nrep, xb.shape[1]))], axis=1)
        beta, ok, _, _, _ = irls_batch(design, labels)
        eta = np.einsum("bnp,bp->bn", design[:, :n], beta)
    else:
        r = maic_design(xa, analysis.target())
        alpha, ok, _, _ = maic_newton_batch(r)
        eta = np.einsum("bnk,bk->bn", r, alpha)
    # ratio estimators are scale free: shift per replicate to avoid overflow
    w = np.exp(eta - eta.max(axis=1, keepdims=True))
    return w, ok & np.isfinite(w).all(axis=1)


def bootstrap_arm_variances(analysis: Analysis, plan: BootstrapPlan) -> BootstrapResult:
    """Bootstrap variance of every arm mean used by the analysis.

    Trial-a arm means are recomputed with weights refit on each resample;
    replicates whose refit fails are excluded and counted.  Trial-b arm
    variances come from resampling trial-b IPD when available, otherwise from
    the ``variance_of_mean`` fields of the aggregate data.
    """
    a = analysis.trial_a
    b_ipd = analysis.b_ipd
    idx_a = stratified_resample(a, plan, PART_A)
    idx_b = stratified_resample(b_ipd, plan, PART_B) if b_ipd is not None else None
    w, ok = _replicate_weights(analysis, idx_a, idx_b)
    y, arm = a.outcome[idx_a], a.arm[idx_a]

    variances, reps = {}, {}
    for trial, label in ARMS_USED[analysis.spec.anchoring]:
        key = (trial, label)
        if trial == "a":
            m = _arm_mean_replicates(y, arm, w, label)
            reps[key] = m
            variances[key] = _variance(m[ok])
        elif b_ipd is not None:
            yb, armb = b_ipd.outcome[idx_b], b_ipd.arm[idx_b]
            m = _arm_mean_replicates(yb, armb, np.ones_like(yb), label)
            reps[key] = m
            variances[key] = _variance(m)
        else:
            v = analysis.b_agd.arm_summaries[label].variance_of_mean
            if v is None:
                raise ValidationError(
                    f"aggregate data for arm {label} lacks variance_of_mean")
            variances[key] = float(v)
    return BootstrapResult(variances, reps, ok, int((~ok).sum()))


def combine_variance(arm_variances: Mapping[tuple[str, str], float], anchoring: str,
                     estimate: float = 0.0):
    """Sum the variances of the arms used; returns (se, (ci_low, ci_high))."""
    try:
        total = sum(arm_variances[k] for k in ARMS_USED[anchoring])
    except KeyError as exc:
        raise ValidationError(f"missing arm variance for {exc.args[0]}") from None
    se = float(np.sqrt(total))
    return se, (estimate - Z95 * se, estimate + Z95 * se)
