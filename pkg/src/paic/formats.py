"""Readers and writers for the on-disk formats.

Floats are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .model import (AggregateData, ArmSummary, CovariateSet, EstimateRecord,
                    EstimatorSpec, MomentVector, TrialIPD, ValidationError)

RESULT_COLUMNS = ("dgm", "iteration", "method", "anchoring", "adjustment_set", "estimate",
                  "se", "ci_low", "ci_high", "ess", "converged", "seed")
BOOTSTRAP_COLUMNS = ("replicate", "trial", "arm", "mean", "converged")


def _num(x) -> str:
    return repr(float(x))


def parse_adjustment(label: str) -> tuple[str, ...]:
    label = label.strip()
    if label in ("", "none"):
        return ()
    return tuple(p.strip() for p in label.replace("+", ",").split(",") if p.strip())


def record_row(rec: EstimateRecord) -> list[str]:
    return [str(rec.dgm if rec.dgm is not None else ""), str(rec.iteration), rec.spec.method,
            rec.spec.anchoring, rec.spec.adjustment_label, _num(rec.delta_hat), _num(rec.se),
            _num(rec.ci_low), _num(rec.ci_high), _num(rec.ess), str(bool(rec.converged)).lower(),
            str(rec.seed)]


def row_record(row: Mapping[str, str]) -> EstimateRecord:
    spec = EstimatorSpec(row["method"], row["anchoring"], parse_adjustment(row["adjustment_set"]))
    return EstimateRecord(spec, float(row["estimate"]), float(row["se"]), float(row["ess"]),
                          row["converged"].strip().lower() == "true", int(row["iteration"]),
                          int(row["seed"]), int(row["dgm"]) if row["dgm"] else None)


class ResultsWriter:
    """Streams result rows to CSV, flushing after every batch."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(RESULT_COLUMNS)
        self.count = 0

    def write(self, records: Iterable[EstimateRecord]):
        for rec in records:
            self._w.writerow(record_row(rec))
            self.count += 1
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_results(path) -> list[EstimateRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing result columns {sorted(missing)}")
        return [row_record(r) for r in reader]


def record_json(rec: EstimateRecord, **extra) -> dict:
    def clean(x):
        return None if isinstance(x, float) and not math.isfinite(x) else x
    out = {"dgm": rec.dgm, "iteration": rec.iteration, "method": rec.spec.method,
           "anchoring": rec.spec.anchoring, "adjustment_set": list(rec.spec.adjustment_set),
           "link": rec.link, "estimate": clean(rec.delta_hat), "se": clean(rec.se),
           "ci_low": clean(rec.ci_low), "ci_high": clean(rec.ci_high), "ess": clean(rec.ess),
           "converged": rec.converged, "seed": rec.seed, "diagnostic": rec.diagnostic,
           "n_failed_replicates": rec.n_failed_replicates}
    out.update(extra)
    return out


def write_ipd_csv(path, ipd: TrialIPD):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "trial", "arm", *ipd.covariates.names, "y"])
        for i in range(len(ipd)):
            w.writerow([int(ipd.ids[i]), ipd.trial_id, ipd.arm[i],
                        *(_num(v) for v in ipd.covariates.values[i]), _num(ipd.outcome[i])])


def read_ipd_csv(path, arm_map: Mapping[str, str] | None = None,
                 trial: str | None = None) -> TrialIPD:
    """Parse ``id,trial,arm,<covariates...>,y``; ``arm_map`` relabels arms."""
    arm_map = dict(arm_map or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if header[:3] != ["id", "trial", "arm"] or header[-1] != "y" or len(header) < 5:
            raise ValidationError(
                f"{path}: header must be id,trial,arm,<covariates...>,y; got {','.join(header)}")
        names = tuple(header[3:-1])
        ids, trials, arms, xs, ys = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {lineno} has {len(row)} fields")
            try:
                ids.append(int(row[0]))
                xs.append([float(v) for v in row[3:-1]])
                ys.append(float(row[-1]))
            except ValueError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from None
            trials.append(row[1].strip())
            label = row[2].strip()
            arms.append(arm_map.get(label, label))
    if not ys:
        raise ValidationError(f"{path}: no subjects")
    if trial is None:
        labels = sorted(set(trials))
        if len(labels) != 1:
            raise ValidationError(f"{path}: expected one trial, found {labels}")
        trial = labels[0]
    bad = [a for a in set(arms) if a not in ("A", "B", "C")]
    if bad:
        raise ValidationError(
            f"{path}: unknown arm label(s) {sorted(bad)}; map them with --arm-map")
    y = np.array(ys)
    nonfinite = np.flatnonzero(~np.isfinite(y))
    if nonfinite.size:
        raise ValidationError(f"{path}: non-finite outcome in data row {int(nonfinite[0]) + 1}")
    return TrialIPD(trial, CovariateSet(names, np.array(xs, dtype=float)), np.array(arms),
                    y, np.array(ids))


def agd_to_json(agd: AggregateData) -> dict:
    m = agd.moments
    moments = {}
    for j, name in enumerate(m.names):
        var = float(m.variances[j]) if m.variances is not None else None
        moments[name] = {"mean": float(m.means[j]), "variance": var}
    arms = {}
    for arm, s in sorted(agd.arm_summaries.items()):
        entry = {"mean": s.mean, "n": s.n}
        if s.variance_of_mean is not None:
            entry["variance_of_mean"] = s.variance_of_mean
        arms[arm] = entry
    return {"trial_id": agd.trial_id, "moments": moments, "n": m.n, "arms": arms}


def agd_from_json(obj: Mapping, arm_map: Mapping[str, str] | None = None) -> AggregateData:
    arm_map = dict(arm_map or {})
    try:
        names = tuple(obj["moments"])
        means = [float(obj["moments"][k]["mean"]) for k in names]
        raw_var = [obj["moments"][k].get("variance") for k in names]
        n = int(obj["n"])
        arms = {}
        for label, a in obj["arms"].items():
            vom = a.get("variance_of_mean")
            arms[arm_map.get(label, label)] = ArmSummary(
                float(a["mean"]), int(a["n"]), None if vom is None else float(vom))
        trial_id = str(obj["trial_id"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ValidationError(f"malformed aggregate data: {exc!r}") from None
    order = 2 if all(v is not None for v in raw_var) else 1
    variances = np.array(raw_var, dtype=float) if order == 2 else None
    return AggregateData(trial_id, MomentVector(names, means, variances, order, n), arms)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_truth(path) -> dict[int, float]:
    obj = read_json(path)
    try:
        return {int(k): float(v) for k, v in obj.items()}
    except (AttributeError, ValueError) as exc:
        raise ValidationError(f"{path}: truth must map DGM id to a number ({exc})") from None


def write_long_csv(path, cells: Iterable[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "cell", "value"])
        for c in cells:
            label = f"dgm{c['dgm']}|{c['method']}|{c['anchoring']}|{c['adjustment_set']}"
            for metric in ("bias", "rmse", "vr", "coverage", "n_converged", "n_total"):
                v = c.get(metric)
                w.writerow([metric, label, "" if v is None else repr(v)])


def write_weights_csv(path, ipd: TrialIPD, weights: np.ndarray, method: str):
    """Per-subject weights; ``propensity`` (odds / (1 + odds)) is filled for psw only."""
    w = np.asarray(weights, dtype=float)
    norm = w / w.mean()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "method", "weight", "propensity", "arm", "normalized_weight"])
        for i in range(len(ipd)):
            prop = _num(w[i] / (1.0 + w[i])) if method == "psw" else ""
            out.writerow([int(ipd.ids[i]), method, _num(w[i]), prop, ipd.arm[i],
                          _num(norm[i])])
