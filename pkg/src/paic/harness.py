"""Study orchestration: calibration, truths, the estimator grid, and runs."""

from __future__ import annotations

import configparser
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import formats
from .dgm import (COVARIATES, DgmSpec, SuperPopulation, calibrate_beta0,
                  generate_superpopulation, get_dgm, sample_trials, true_effect)
from .estimators import fit_weights, prepare, run_estimator
from .inference import BootstrapPlan, BootstrapResult, summarize_trial
from .metrics import summarize_cell
from .model import (ANCHORINGS, METHODS, AggregateData, EstimateRecord, EstimatorSpec,
                    TrialIPD, ValidationError)
from .weights import SingularFitError
from .streams import SeedContext, derive_seed, derive_stream

log = logging.getLogger(__name__)

B_ARMS = {"anchored": ("B", "C"), "unanchored": ("B",)}

PRESETS = {
    "quick": {"iterations": 200, "bootstrap": 200, "superpop_n": 200_000},
    "paper": {"iterations": 2000, "bootstrap": 2000, "superpop_n": 2_000_000},
}


@dataclass(frozen=True)
class StudyConfig:
    dgms: tuple[int, ...] = (1,)
    iterations: int = 2000
    n_per_arm: int = 250
    superpop_n: int = 2_000_000
    calibration_n: int = 2_000_000
    calibration_tol: float = 1e-4
    truth_n: int = 2_000_000
    bootstrap: int = 2000
    methods: tuple[str, ...] = METHODS
    anchorings: tuple[str, ...] = ANCHORINGS
    adjustment_sets: tuple[tuple[str, ...], ...] = (("x1",), ("x2",), ("x1", "x2"))
    base_seed: int = 0
    workers: int = 1
    out: str | None = None
    dump_bootstrap: bool = False
    include_nonconverged: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dgms", tuple(int(d) for d in self.dgms))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "anchorings", tuple(self.anchorings))
        object.__setattr__(self, "adjustment_sets",
                           tuple(tuple(s) for s in self.adjustment_sets))
        for d in self.dgms:
            get_dgm(d)
        counts = (self.iterations, self.n_per_arm, self.superpop_n, self.calibration_n,
                  self.truth_n, self.bootstrap, self.workers)
        if min(counts) < 1:
            raise ValidationError("iteration, sample and worker counts must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        bad += [a for a in self.anchorings if a not in ANCHORINGS]
        if bad:
            raise ValidationError(f"unknown method/anchoring {bad}")
        for s in self.adjustment_sets:
            if not s or not set(s) <= set(COVARIATES):
                raise ValidationError(f"adjustment set {s} must be a nonempty subset of x1, x2")

    @classmethod
    def preset(cls, name: str, **overrides) -> StudyConfig:
        return cls(**{**PRESETS[name], **overrides})


def load_config(path) -> dict:
    """Flat ``[study]`` keys from an INI file, converted to StudyConfig types."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise OSError(f"cannot read config file {path}")
    if "study" not in parser:
        raise ValidationError(f"{path}: missing [study] section")
    known = {f.name: f for f in fields(StudyConfig)}
    out = {}
    for key, raw in parser["study"].items():
        if key not in known:
            raise ValidationError(f"{path}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "dgms":
        return tuple(int(x) for x in raw.split(","))
    if key in ("methods", "anchorings"):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if key == "adjustment_sets":
        return tuple(formats.parse_adjustment(s) for s in raw.split())
    if key in ("dump_bootstrap", "include_nonconverged"):
        return raw.lower() in ("1", "true", "yes", "on")
    if key == "calibration_tol":
        return float(raw)
    if key == "out":
        return raw
    return int(float(raw))


def estimator_grid(config: StudyConfig) -> list[EstimatorSpec]:
    """Cells of one iteration; unweighted collapses the adjustment sets."""
    grid = []
    for method in config.methods:
        for anchoring in config.anchorings:
            if method == "unweighted":
                grid.append(EstimatorSpec(method, anchoring, ()))
            else:
                grid.extend(EstimatorSpec(method, anchoring, s) for s in config.adjustment_sets)
    return grid


def calibrated_dgm(dgm_id: int, n: int, tol: float, seed: int) -> DgmSpec:
    dgm = get_dgm(dgm_id)
    rng = derive_stream(SeedContext(seed, dgm_id, 0, "calibration"))
    return dgm.with_beta0(calibrate_beta0(dgm, n, tol, rng))


def compute_truth(dgm: DgmSpec, n: int, seed: int) -> float:
    return true_effect(dgm, n, derive_stream(SeedContext(seed, dgm.id, 0, "truth")))


def study_population(dgm: DgmSpec, config: StudyConfig) -> SuperPopulation:
    rng = derive_stream(SeedContext(config.base_seed, dgm.id, 0, "population"))
    return generate_superpopulation(dgm, config.superpop_n, rng)


@dataclass(frozen=True, eq=False)
class IterationData:
    trial_a: TrialIPD
    trial_b: TrialIPD
    plan: BootstrapPlan

    def b_view(self, spec: EstimatorSpec, cache: dict):
        """Trial-b input for ``spec``: IPD for psw, summaries otherwise."""
        sub = self.trial_b.restrict_arms(B_ARMS[spec.anchoring])
        if spec.method == "psw":
            return sub
        if spec.anchoring not in cache:
            cache[spec.anchoring] = summarize_trial(sub, self.plan)
        return cache[spec.anchoring]


def sample_iteration(dgm_id: int, pop: SuperPopulation, config: StudyConfig,
                     iteration: int) -> IterationData:
    def ctx(purpose):
        return SeedContext(config.base_seed, dgm_id, iteration, purpose)
    ta, tb = sample_trials(pop, config.n_per_arm, derive_stream(ctx("sampling")),
                           derive_stream(ctx("arm-assignment")), derive_stream(ctx("outcome")))
    return IterationData(ta, tb, BootstrapPlan(config.bootstrap, derive_seed(ctx("bootstrap"))))


def run_iteration(dgm_id: int, pop: SuperPopulation, config: StudyConfig, iteration: int,
                  grid: Sequence[EstimatorSpec] | None = None):
    """Sample one pair of trials and run every grid cell on them.

    Returns the records in grid order and, if requested, bootstrap dump rows.
    """
    grid = estimator_grid(config) if grid is None else grid
    data = sample_iteration(dgm_id, pop, config, iteration)
    views: dict = {}
    records, dump_rows = [], []
    for spec in grid:
        dump = None
        if config.dump_bootstrap:
            def dump(boot: BootstrapResult, spec=spec):
                prefix = [dgm_id, iteration, spec.method, spec.anchoring, spec.adjustment_label]
                dump_rows.extend(prefix + list(row) for row in boot.dump_rows())
        rec = run_estimator(spec, data.trial_a, data.b_view(spec, views), data.plan,
                            iteration=iteration, dgm=dgm_id, dump=dump)
        records.append(rec)
    return records, dump_rows


# Worker-process state, set once per worker by the pool initializer.
_WORKER: dict = {}


def _init_worker(pops, config):
    _WORKER["pops"] = pops
    _WORKER["config"] = config


def _work(task):
    dgm_id, iteration = task
    return run_iteration(dgm_id, _WORKER["pops"][dgm_id], _WORKER["config"], iteration)


@dataclass
class StudyResult:
    records: list[EstimateRecord]
    truths: dict[int, float]
    beta0: dict[int, float]
    summary: dict = field(default_factory=dict)


def prepare_dgms(config: StudyConfig):
    dgms, truths = {}, {}
    for d in config.dgms:
        dgms[d] = calibrated_dgm(d, config.calibration_n, config.calibration_tol,
                                 config.base_seed)
        truths[d] = compute_truth(dgms[d], config.truth_n, config.base_seed)
        log.info("DGM-%d: beta0=%.6f truth=%.4f", d, dgms[d].beta0, truths[d])
    return dgms, truths


def run_study(config: StudyConfig) -> StudyResult:
    """Run the full grid for every DGM; writes outputs when ``config.out`` is set.

    Records are merged in (dgm, iteration, cell) order, so outputs do not
    depend on the number of workers.
    """
    dgms, truths = prepare_dgms(config)
    pops = {d: study_population(dgms[d], config) for d in config.dgms}
    grid = estimator_grid(config)
    tasks = [(d, it) for d in config.dgms for it in range(config.iterations)]

    out = Path(config.out) if config.out else None
    writer = formats.ResultsWriter(out) if out else None
    dump_fh = None
    if out and config.dump_bootstrap:
        import csv
        dump_fh = open(out.with_suffix(".bootstrap.csv"), "w", newline="")
        dump_writer = csv.writer(dump_fh)
        dump_writer.writerow(["dgm", "iteration", "method", "anchoring", "adjustment_set",
                              *formats.BOOTSTRAP_COLUMNS])
    records: list[EstimateRecord] = []
    try:
        if config.workers == 1:
            _init_worker(pops, config)
            results = map(_work, tasks)
            pool = None
        else:
            pool = ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                       initargs=(pops, config))
            results = pool.map(_work, tasks, chunksize=1)
        for recs, dump_rows in results:
            records.extend(recs)
            if writer:
                writer.write(recs)
            if dump_fh:
                dump_writer.writerows(_dump_row(r) for r in dump_rows)
        if pool:
            pool.shutdown()
    finally:
        if writer:
            writer.close()
        if dump_fh:
            dump_fh.close()
        _WORKER.clear()

    expected = len(tasks) * len(grid)
    if len(records) != expected or (writer and writer.count != expected):
        raise RuntimeError(f"integrity check failed: {len(records)} records, {expected} expected")

    beta0 = {d: dgms[d].beta0 for d in config.dgms}
    summary = summarize_records(records, truths, config.include_nonconverged,
                                metadata=run_metadata(config, beta0, truths))
    result = StudyResult(records, truths, beta0, summary)
    if out:
        write_study_outputs(out, result)
    return result


def _dump_row(row):
    *head, mean, ok = row
    return [*head, repr(float(mean)), str(bool(ok)).lower()]


def run_metadata(config: StudyConfig, beta0, truths) -> dict:
    # Execution details (worker count, output path) are left out so that the
    # summary is byte-identical across worker counts.
    return {"config": {f.name: _jsonable(getattr(config, f.name)) for f in fields(config)
                       if f.name not in ("workers", "out")},
            "beta0": {str(k): v for k, v in beta0.items()},
            "truth": {str(k): v for k, v in truths.items()}}


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def group_records(records: Iterable[EstimateRecord]):
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.dgm, rec.spec), []).append(rec)
    return groups


def summarize_records(records, truths: dict[int, float], include_nonconverged=False,
                      metadata: dict | None = None) -> dict:
    cells = []
    for (dgm, spec), recs in group_records(records).items():
        if dgm not in truths:
            raise ValidationError(f"no truth value for DGM {dgm}")
        cell = summarize_cell(recs, truths[dgm], exclude_nonconverged=not include_nonconverged)
        cells.append(cell.to_dict())
    nonconv = [{"dgm": c["dgm"], "method": c["method"], "anchoring": c["anchoring"],
                "adjustment_set": c["adjustment_set"],
                "non_converged": c["n_total"] - c["n_converged"], "n_total": c["n_total"]}
               for c in cells if c["n_converged"] < c["n_total"]]
    meta = dict(metadata or {})
    meta["include_nonconverged"] = include_nonconverged
    meta["non_convergence"] = nonconv
    return {"metadata": meta, "cells": cells}


def write_study_outputs(out: Path, result: StudyResult):
    truth_path = out.with_suffix(".truth.json")
    formats.write_json(truth_path, {str(k): v for k, v in result.truths.items()})
    formats.write_json(out.with_suffix(".summary.json"), result.summary)
    formats.write_long_csv(out.with_suffix(".long.csv"), result.summary["cells"])


def estimate_external(trial_a: TrialIPD, trial_b_view: TrialIPD | AggregateData,
                      spec: EstimatorSpec, bootstrap: int, seed: int):
    """Run one estimator on user data.

    Returns the record, the trial-a subjects used, and the weight fit (None
    when the fit itself failed).
    """
    analysis = prepare(spec, trial_a, trial_b_view)
    rec = run_estimator(spec, trial_a, trial_b_view, BootstrapPlan(bootstrap, seed))
    try:
        wfit = fit_weights(analysis)
    except (SingularFitError, ValidationError):
        wfit = None
    return rec, analysis.trial_a, wfit
