"""Acceptance suite: one printed PASS/FAIL line per criterion.

Each criterion runs at its stated scale and tolerance.  Studies are shared
through module-scoped fixtures so that cells reused by several criteria are
simulated once.  Run with ``pytest tests/test_acceptance.py -v``; the verdict
lines are printed whether or not output capture is enabled.
"""

import json
import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from paic import dgm as dgm_module
from paic import formats
from paic.cli import main as cli_main
from paic.harness import (StudyConfig, calibrated_dgm, compute_truth, estimate_external,
                          run_iteration, run_study, sample_iteration, study_population)
from paic.metrics import bias, coverage, rmse, summarize_cell, variability_ratio
from paic.model import CovariateSet, EstimateRecord, EstimatorSpec, MomentVector
from paic.weights import fit_logistic, maic_weights

pytestmark = pytest.mark.slow

REFERENCE_TRUTH = {1: 0.68, 2: -0.55, 3: 1.17, 4: 3.53, 5: 1.52, 6: 2.27, 7: 0.1, 8: 3.52}
WORKERS = os.cpu_count() or 1


@pytest.fixture
def report(capsys):
    """Print one verdict line outside pytest's capture, then assert it."""
    def _report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail
    return _report


def quick(**kw):
    return StudyConfig.preset("quick", workers=WORKERS, **kw)


def cells(result):
    """Summary cells keyed by (dgm, method, anchoring, adjustment label)."""
    return {(c["dgm"], c["method"], c["anchoring"], c["adjustment_set"]): c
            for c in result.summary["cells"]}


# --------------------------------------------------------------------------
# 1. Truth reproduction
# --------------------------------------------------------------------------

def _truths(seed=0, n=2_000_000):
    out = {}
    for d in range(1, 9):
        spec = calibrated_dgm(d, n, 1e-4, seed)
        out[d] = compute_truth(spec, n, seed)
    return out


def test_criterion_1_truth_reproduction(report, monkeypatch):
    start = time.perf_counter()
    sd_reading = _truths()
    elapsed = time.perf_counter() - start
    # the alternative reading treats the mixture's second parameter as a variance
    monkeypatch.setitem(dgm_module.MIXTURE_SD, "bimodal_tight", math.sqrt(0.5))
    var_reading = {d: v for d, v in _truths().items() if d >= 5}
    monkeypatch.undo()

    misses = {d: round(v, 3) for d, v in sd_reading.items()
              if abs(v - REFERENCE_TRUTH[d]) > 0.05}
    var_misses = {d: round(v, 3) for d, v in var_reading.items()
                  if abs(v - REFERENCE_TRUTH[d]) > 0.05}
    ok = not misses and elapsed < 120
    detail = (f"{8 - len(misses)}/8 within +-0.05 of the reference truths in {elapsed:.0f}s; "
              f"misses (sd reading) {misses}; DGM-5..8 under variance reading "
              f"{ {d: round(v, 3) for d, v in var_reading.items()} } "
              f"(misses {sorted(var_misses)})")
    report(1, ok, detail)


# --------------------------------------------------------------------------
# 2. Solver oracles
# --------------------------------------------------------------------------

def test_criterion_2_solver_oracles(report):
    x = np.array([0.0, 1.0, 2.0])
    oracle = brentq(lambda a: math.fsum(np.exp(a * (x - 1.5)) * (x - 1.5)), -50, 50,
                    xtol=1e-15)
    fit = maic_weights(CovariateSet(("x1",), x[:, None]),
                       MomentVector(("x1",), [1.5], None, 1, 3), 1)
    alpha_err = abs(fit.alpha[0] - oracle)

    rng = np.random.default_rng(0)
    feats = CovariateSet(("x1", "x2"), rng.standard_normal((500, 2)))
    worst = 0.0
    for order, var in ((1, None), (2, [0.7, 1.4])):
        target = MomentVector(("x1", "x2"), [0.4, -0.3], var, order, 500)
        wfit = maic_weights(feats, target, order)
        w = wfit.weights
        for j in range(2):
            col = feats.values[:, j]
            worst = max(worst, abs(np.average(col, weights=w) - target.means[j])
                        / max(1.0, abs(target.means[j])))
            if order == 2:
                goal = target.variances[j] + target.means[j] ** 2
                worst = max(worst, abs(np.average(col**2, weights=w) - goal) / max(1.0, goal))

    xs = CovariateSet(("x1",), np.r_[np.zeros(20), np.ones(20)][:, None])
    ys = np.r_[np.ones(10), np.zeros(10), np.ones(15), np.zeros(5)]
    lfit = fit_logistic(xs, ys)
    logit_err = max(abs(lfit.coefficients[0]), abs(lfit.coefficients[1] - math.log(3)))

    ok = alpha_err <= 1e-6 and worst <= 1e-6 and logit_err <= 1e-8 and fit.converged
    report(2, ok, f"MAIC alpha error {alpha_err:.1e} (<=1e-6); moment rel error {worst:.1e} "
                  f"(<=1e-6); logistic log-odds error {logit_err:.1e} (<=1e-8)")


# --------------------------------------------------------------------------
# 3. DGM-1 calibration cell
# --------------------------------------------------------------------------

CORRECT = {"anchored": ("x1",), "unanchored": ("x1", "x2")}


@pytest.fixture(scope="module")
def dgm1_correct():
    results = {}
    for anchoring, adj in CORRECT.items():
        config = quick(dgms=(1,), iterations=500, bootstrap=500,
                       methods=("psw", "maic1", "maic2"), anchorings=(anchoring,),
                       adjustment_sets=(adj,))
        results[anchoring] = cells(run_study(config))
    return results


def test_criterion_3_dgm1_calibration(report, dgm1_correct):
    lines, ok = [], True
    for anchoring, table in dgm1_correct.items():
        for (_, method, _, adj), c in sorted(table.items()):
            good = (abs(c["bias"]) <= 0.06 and 0.91 <= c["coverage"] <= 0.98
                    and 0.85 <= c["vr"] <= 1.15)
            ok &= good
            lines.append(f"{method}/{anchoring}/{adj}: bias {c['bias']:+.3f} "
                         f"cov {c['coverage']:.3f} vr {c['vr']:.3f} "
                         f"({c['n_converged']}/{c['n_total']}){'' if good else ' <-'}")
    report(3, ok, "; ".join(lines))


# --------------------------------------------------------------------------
# 4. Positivity-violation ordering
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def positivity_cells():
    config = quick(dgms=(2, 8), methods=("psw", "maic1"), anchorings=("unanchored",),
                   adjustment_sets=(("x1", "x2"),))
    return cells(run_study(config))


def test_criterion_4_positivity_ordering(report, positivity_cells):
    lines, ok = [], True
    for d in (2, 8):
        b_psw = positivity_cells[(d, "psw", "unanchored", "x1+x2")]["bias"]
        b_maic = positivity_cells[(d, "maic1", "unanchored", "x1+x2")]["bias"]
        good = abs(b_psw) > abs(b_maic) and abs(b_maic) <= 0.1
        ok &= good
        lines.append(f"DGM-{d}: |bias psw| {abs(b_psw):.3f} vs |bias maic1| {abs(b_maic):.3f}"
                     f"{'' if good else ' <-'}")
    report(4, ok, "; ".join(lines))


# --------------------------------------------------------------------------
# 5. Misspecification dominance
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def misspecification_cells():
    config = quick(dgms=(1,), methods=("psw", "maic1", "maic2"), anchorings=("anchored",),
                   adjustment_sets=(("x1",), ("x2",)))
    return cells(run_study(config))


def test_criterion_5_misspecification(report, misspecification_cells):
    lines, ok = [], True
    for method in ("psw", "maic1", "maic2"):
        wrong = misspecification_cells[(1, method, "anchored", "x2")]["bias"]
        right = misspecification_cells[(1, method, "anchored", "x1")]["bias"]
        good = abs(wrong) > 3 * abs(right)
        ok &= good
        lines.append(f"{method}: |bias {{x2}}| {abs(wrong):.3f} vs 3x|bias {{x1}}| "
                     f"{3 * abs(right):.3f}{'' if good else ' <-'}")
    report(5, ok, "; ".join(lines))


# --------------------------------------------------------------------------
# 6. Convergence-failure accounting
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dgm6_maic2(tmp_path_factory):
    out = tmp_path_factory.mktemp("c6") / "dgm6.csv"
    config = quick(dgms=(6,), iterations=500, methods=("maic2",), anchorings=("unanchored",),
                   adjustment_sets=(("x1", "x2"),), out=str(out))
    result = run_study(config)
    return result, json.loads(out.with_suffix(".summary.json").read_text())


def test_criterion_6_convergence_accounting(report, dgm6_maic2):
    result, summary = dgm6_maic2
    failed = sum(not r.converged for r in result.records)
    rate = failed / len(result.records)
    listed = summary["metadata"]["non_convergence"]
    visible = any(e["dgm"] == 6 and e["method"] == "maic2" and e["non_converged"] == failed
                  for e in listed)
    ok = len(result.records) == 500 and 0.02 <= rate <= 0.30 and visible
    report(6, ok, f"DGM-6 unanchored maic2: {failed}/500 non-converged ({rate:.1%}, "
                  f"band 2%-30%); run completed; listed in summary JSON: {visible}")


# --------------------------------------------------------------------------
# 7. Determinism and parallel stability
# --------------------------------------------------------------------------

def test_criterion_7_determinism(report, tmp_path):
    def outputs(tag, workers):
        out = tmp_path / tag / "res.csv"
        out.parent.mkdir()
        config = StudyConfig.preset("quick", dgms=(1, 6), iterations=4, bootstrap=40,
                                    workers=workers, out=str(out), dump_bootstrap=True)
        run_study(config)
        return {s: out.with_suffix(s).read_bytes()
                for s in (".csv", ".summary.json", ".truth.json", ".long.csv", ".bootstrap.csv")}

    w1, w8, again = outputs("w1", 1), outputs("w8", 8), outputs("again", 1)
    parallel_same = w1 == w8
    repeat_same = w1 == again

    config = StudyConfig.preset("quick", dgms=(1,), iterations=1, bootstrap=40)
    pop = study_population(calibrated_dgm(1, config.calibration_n, config.calibration_tol,
                                          config.base_seed), config)
    records, _ = run_iteration(1, pop, config, 0)
    data = sample_iteration(1, pop, config, 0)
    formats.write_ipd_csv(tmp_path / "a.csv", data.trial_a)
    formats.write_ipd_csv(tmp_path / "b.csv", data.trial_b)
    views, mismatches = {}, 0
    for rec in records:
        args = ["estimate", "--ipd", str(tmp_path / "a.csv"), "--method", rec.spec.method,
                "--anchoring", rec.spec.anchoring, "--adjust", ",".join(rec.spec.adjustment_set),
                "--bootstrap", str(config.bootstrap), "--seed", str(data.plan.seed),
                "--out", str(tmp_path / "o.json")]
        if rec.spec.method == "psw":
            args += ["--ipd-b", str(tmp_path / "b.csv")]
        else:
            formats.write_json(tmp_path / "agd.json",
                               formats.agd_to_json(data.b_view(rec.spec, views)))
            args += ["--agd", str(tmp_path / "agd.json")]
        cli_main(args)
        got = json.loads((tmp_path / "o.json").read_text())
        mismatches += not (got["estimate"] == rec.delta_hat and got["se"] == rec.se
                           and got["converged"] == rec.converged)
    ok = parallel_same and repeat_same and mismatches == 0
    report(7, ok, f"workers 1 vs 8 identical: {parallel_same}; repeated run identical: "
                  f"{repeat_same}; round-trip mismatches {mismatches}/{len(records)}")


# --------------------------------------------------------------------------
# 8. Metric unit suite
# --------------------------------------------------------------------------

def test_criterion_8_metrics(report):
    spec = EstimatorSpec("maic2", "unanchored", ("x1", "x2"))
    emp = math.sqrt(((0 - 1.5) ** 2 + (2 - 1.5) ** 2 + (1 - 1.5) ** 2 + (3 - 1.5) ** 2) / 3)
    checks = {
        "bias offset": bias([1.1, 1.1], 1.0) == pytest.approx(0.1, abs=1e-15),
        "bias symmetric": bias([0.5, 1.5], 1.0) == 0.0,
        "bias arithmetic": bias([1.0, 2.0], 1.0) == 0.5,
        "rmse offset": rmse([1.1, 1.1], 1.0) == pytest.approx(0.1, abs=1e-15),
        "rmse spread": rmse([0.0, 2.0], 1.0) == 1.0,
        "vr calibrated": variability_ratio([emp] * 4, [0, 2, 1, 3], 1.5)
        == pytest.approx(1.0, abs=1e-15),
        "vr linear": variability_ratio([0.4, 0.6], [0.1, -0.3], 0.0)
        == pytest.approx(2 * variability_ratio([0.2, 0.3], [0.1, -0.3], 0.0), rel=1e-15),
        "coverage huge se": coverage([5.0, -7.0], [1e6, 1e6], 0.0) == 1.0,
        "coverage zero se": coverage([0.5, 1.5], [0.0, 0.0], 1.0) == 0.0,
    }
    recs = [EstimateRecord(spec, 1.0, 0.1, 10.0, i >= 294, iteration=i) for i in range(2000)]
    cell = summarize_cell(recs, 1.0)
    checks["294/2000 counting"] = (cell.n_total, cell.n_converged) == (2000, 1706)
    perfect = summarize_cell([EstimateRecord(spec, 2.0, 0.1, 10.0, True)] * 3, 2.0)
    checks["perfect cell"] = (perfect.bias, perfect.rmse, perfect.coverage) == (0.0, 0.0, 1.0)

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        est = rng.normal(rng.normal(), rng.uniform(0.1, 5), rng.integers(2, 3000))
        truth = rng.normal()
        lhs = rmse(est, truth) ** 2
        worst = max(worst, abs(lhs - (bias(est, truth) ** 2 + np.var(est))) / max(1.0, lhs))
    checks["rmse identity <=1e-12"] = worst <= 1e-12
    failed = [k for k, v in checks.items() if not v]
    report(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} metric checks exact; "
                          f"worst bias-variance identity error {worst:.1e}; failed {failed}")
