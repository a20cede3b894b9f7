"""Command-line entry point: ``paic <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 estimation non-convergence
(``estimate`` only), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import formats
from .dgm import CalibrationError
from .harness import (PRESETS, StudyConfig, calibrated_dgm, compute_truth, estimate_external,
                      load_config, run_study, summarize_records)
from .model import ANCHORINGS, METHODS, EstimatorSpec, ValidationError
from .weights import SingularFitError

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4


def _dgm_list(value: str) -> list[int]:
    if value == "all":
        return list(range(1, 9))
    return [int(v) for v in value.split(",")]


def _arm_map(value: str | None) -> dict[str, str]:
    if not value:
        return {}
    pairs = [p.split("=", 1) for p in value.split(",")]
    if any(len(p) != 2 for p in pairs):
        raise ValidationError("--arm-map expects LABEL=ARM pairs, e.g. drug=A,placebo=C")
    return {k.strip(): v.strip() for k, v in pairs}


def cmd_calibrate(args):
    out = []
    for d in _dgm_list(args.dgm):
        dgm = calibrated_dgm(d, args.n, args.tol, args.seed)
        out.append({"dgm": d, "beta0": dgm.beta0, "n": args.n, "tolerance": args.tol,
                    "seed": args.seed})
    formats.write_json(args.out, out[0] if len(out) == 1 else out)
    return EXIT_OK


def cmd_truth(args):
    truths = {}
    for d in _dgm_list(args.dgm):
        dgm = calibrated_dgm(d, args.n, args.tol, args.seed)
        truths[str(d)] = compute_truth(dgm, args.n, args.seed)
        logging.info("DGM-%d truth %.4f", d, truths[str(d)])
    formats.write_json(args.out, truths)
    return EXIT_OK


def build_config(args) -> StudyConfig:
    """Defaults < preset < config file < explicit flags."""
    values = {}
    if args.preset:
        values.update(PRESETS[args.preset])
    if args.config:
        values.update(load_config(args.config))
    if args.dgm is not None:
        values["dgms"] = tuple(_dgm_list(args.dgm))
    if args.methods is not None:
        values["methods"] = tuple(m.strip() for m in args.methods.split(","))
    if args.anchoring is not None:
        values["anchorings"] = ANCHORINGS if args.anchoring == "both" else (args.anchoring,)
    if args.adjust is not None:
        values["adjustment_sets"] = tuple(formats.parse_adjustment(s) for s in args.adjust)
    for flag, key in (("iterations", "iterations"), ("n_per_arm", "n_per_arm"),
                      ("bootstrap", "bootstrap"), ("seed", "base_seed"),
                      ("workers", "workers"), ("out", "out"), ("superpop_n", "superpop_n")):
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    if args.dump_bootstrap:
        values["dump_bootstrap"] = True
    if "out" not in values:
        raise ValidationError("--out is required (flag or config file)")
    return StudyConfig(**values)


def cmd_simulate(args):
    config = build_config(args)
    result = run_study(config)
    nonconv = result.summary["metadata"]["non_convergence"]
    for item in nonconv:
        logging.warning("DGM-%s %s %s %s: %d/%d non-converged", item["dgm"], item["method"],
                        item["anchoring"], item["adjustment_set"], item["non_converged"],
                        item["n_total"])
    print(json.dumps({"records": len(result.records), "out": config.out,
                      "non_convergence": nonconv}))
    return EXIT_OK


def cmd_summarize(args):
    records = formats.read_results(args.input)
    truths = formats.read_truth(args.truth)
    summary = summarize_records(records, truths, args.include_nonconverged,
                                metadata={"results": str(args.input), "truth": truths})
    formats.write_json(args.out, summary)
    formats.write_long_csv(Path(args.out).with_suffix(".long.csv"), summary["cells"])
    return EXIT_OK


def cmd_estimate(args):
    arm_map = _arm_map(args.arm_map)
    trial_a = formats.read_ipd_csv(args.ipd, arm_map)
    if args.ipd_b:
        view = formats.read_ipd_csv(args.ipd_b, arm_map)
    elif args.agd:
        view = formats.agd_from_json(formats.read_json(args.agd), arm_map)
    else:
        raise ValidationError("one of --ipd-b or --agd is required")
    spec = EstimatorSpec(args.method, args.anchoring,
                         () if args.method == "unweighted" else formats.parse_adjustment(args.adjust))
    rec, used_a, wfit = estimate_external(trial_a, view, spec, args.bootstrap, args.seed)
    formats.write_json(args.out, formats.record_json(rec))
    if args.weights_out and wfit is not None:
        formats.write_weights_csv(args.weights_out, used_a, wfit.weights, spec.method)
    if not rec.converged:
        print(json.dumps({"error": "non-convergence", "diagnostic": rec.diagnostic}),
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="calibrate the assignment intercept")
    c.add_argument("--dgm", default="all")
    c.add_argument("--n", type=int, default=2_000_000)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("truth", help="true marginal effect in the trial-b population")
    t.add_argument("--dgm", default="all")
    t.add_argument("--n", type=int, default=2_000_000)
    t.add_argument("--tol", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_truth)

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--dgm")
    s.add_argument("--iterations", type=int)
    s.add_argument("--n-per-arm", type=int)
    s.add_argument("--superpop-n", type=int)
    s.add_argument("--bootstrap", type=int)
    s.add_argument("--methods")
    s.add_argument("--anchoring", choices=["anchored", "unanchored", "both"])
    s.add_argument("--adjust", nargs="+", help="one or more sets, e.g. x1 x2 x1,x2")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.add_argument("--dump-bootstrap", action="store_true")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("summarize", help="performance metrics from a results CSV")
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--include-nonconverged", action="store_true")
    m.set_defaults(func=cmd_summarize)

    e = sub.add_parser("estimate", help="run one estimator on external data")
    e.add_argument("--ipd", required=True)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--ipd-b")
    g.add_argument("--agd")
    e.add_argument("--method", required=True, choices=METHODS)
    e.add_argument("--anchoring", required=True, choices=ANCHORINGS)
    e.add_argument("--adjust", default="")
    e.add_argument("--bootstrap", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--weights-out")
    e.add_argument("--arm-map", help="relabel arms, e.g. drug=A,placebo=C")
    e.set_defaults(func=cmd_estimate)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, CalibrationError, SingularFitError, ValueError) as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
