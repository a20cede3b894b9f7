"""Performance metrics of an estimator over Monte Carlo iterations."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .model import EstimateRecord, EstimatorSpec

Z95 = 1.96


class MetricsError(ValueError):
    pass


def _as_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise MetricsError(f"{name}: no estimates")
    return arr


def bias(estimates, truth: float) -> float:
    return float(np.mean(_as_array(estimates, "bias")) - truth)


def rmse(estimates, truth: float) -> float:
    err = _as_array(estimates, "rmse") - truth
    return float(np.sqrt(np.mean(err**2)))


def variability_ratio(ses, estimates, truth: float, n_total: int | None = None) -> float:
    """Mean model-based SE over the empirical SE about the truth.

    The empirical SE uses deviations from the true value with an ``n - 1``
    divisor, where ``n`` defaults to the number of estimates.
    """
    ses = np.asarray(ses, dtype=float)
    est = np.asarray(estimates, dtype=float)
    if ses.shape != est.shape:
        raise MetricsError("ses and estimates differ in length")
    if est.size < 2:
        raise MetricsError("variability ratio needs at least 2 estimates")
    n = est.size if n_total is None else n_total
    denom = np.sqrt(np.sum((est - truth) ** 2) / (n - 1))
    if denom == 0:
        raise MetricsError("variability ratio undefined: zero empirical SE")
    return float(ses.mean() / denom)


def coverage(estimates, ses, truth: float) -> float:
    est = _as_array(estimates, "coverage")
    ses = np.asarray(ses, dtype=float)
    if ses.shape != est.shape:
        raise MetricsError("ses and estimates differ in length")
    hit = (est - Z95 * ses <= truth) & (truth <= est + Z95 * ses)
    return float(hit.mean())


@dataclass(frozen=True)
class MetricsCell:
    dgm: int | None
    spec: EstimatorSpec
    truth: float
    n_total: int
    n_converged: int
    bias: float | None = None
    rmse: float | None = None
    vr: float | None = None
    coverage: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        spec = d.pop("spec")
        return {"dgm": self.dgm, "method": spec["method"], "anchoring": spec["anchoring"],
                "adjustment_set": self.spec.adjustment_label,
                **{k: v for k, v in d.items() if k != "dgm"}}


def summarize_cell(records: Sequence[EstimateRecord], truth: float,
                   exclude_nonconverged: bool = True) -> MetricsCell:
    """Aggregate one cell; non-converged records are counted but excluded.

    Records whose estimate or SE is not finite cannot enter any metric and
    are dropped even when ``exclude_nonconverged`` is False.
    """
    if not records:
        raise MetricsError("no records")
    spec = records[0].spec
    if any(r.spec != spec for r in records):
        raise MetricsError("records mix estimator specifications")
    dgm = records[0].dgm
    n_total = len(records)
    n_converged = sum(bool(r.converged) for r in records)
    used = [r for r in records
            if (r.converged or not exclude_nonconverged)
            and np.isfinite(r.delta_hat) and np.isfinite(r.se)]
    if not used:
        return MetricsCell(dgm, spec, truth, n_total, n_converged)
    est = np.array([r.delta_hat for r in used])
    ses = np.array([r.se for r in used])
    vr = None
    if est.size >= 2:
        try:
            vr = variability_ratio(ses, est, truth, n_total=n_total)
        except MetricsError:
            vr = None
    return MetricsCell(dgm, spec, truth, n_total, n_converged, bias(est, truth),
                       rmse(est, truth), vr, coverage(est, ses, truth))
