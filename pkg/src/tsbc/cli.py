"""Command-line entry point: ``tsbc {simulate,correct,report,trace}``.

Exit status is 0 on success, 1 for usage or input errors and 2 when a
numerical routine fails (divergence, singular Jacobian, ...).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .acm import compute_acm
from .correction import robbins_monro, write_trace_csv
from .dga import STREAM_DATA, read_dataset_csv
from .exceptions import DataError, NumericalError, StructuralError
from .models import StudyModel

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_run_options(p):
    p.add_argument("--study", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scores", dest="score_choice")
    p.add_argument("--K", type=int)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--M", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--config", help="JSON file with StudyConfig fields")


def build_parser():
    parser = _Parser(prog="tsbc", description="Bias-corrected factor score regression")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a replication study")
    _add_run_options(sim)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--methods", help="comma-separated subset of fsr,bc")
    sim.add_argument("--compute-se", dest="compute_se", action="store_true", default=None)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out", required=True, help="output directory")

    cor = sub.add_parser("correct", help="bias-correct estimates for a dataset")
    cor.add_argument("--data", required=True)
    cor.add_argument("--model", required=True, help="JSON with study and optional settings")
    cor.add_argument("--scores", dest="score_choice")
    cor.add_argument("--no-se", dest="compute_se", action="store_false", default=None)
    cor.add_argument("--out")

    rep = sub.add_parser("report", help="summarise a records CSV")
    rep.add_argument("--records", required=True)
    rep.add_argument("--truth", required=True, help="truth JSON or a study number")
    rep.add_argument("--out")

    tr = sub.add_parser("trace", help="Robbins-Monro trace of one replication")
    _add_run_options(tr)
    tr.add_argument("--rep", type=int, default=0)
    tr.add_argument("--out", required=True)
    return parser


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return raw


def _config(args, extra=()):
    raw = _read_json(args.config) if args.config else {}
    for key in ("study", "n", "seed", "score_choice", "K", "a", "b", "M", "delta", *extra):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    raw.pop("workers", None)
    return harness.StudyConfig.from_dict(raw)


def cmd_simulate(args):
    raw_workers = None
    if args.config:
        raw_workers = _read_json(args.config).get("workers")
    cfg = _config(args, ("reps", "methods", "compute_se"))
    workers = args.workers
    if workers is None:
        workers = harness.resolve_workers(None) if os.environ.get("TSBC_THREADS") else raw_workers
    records = harness.run_study(cfg, workers)
    os.makedirs(args.out, exist_ok=True)
    harness.write_records_csv(records, os.path.join(args.out, "records.csv"))
    summary = harness.aggregate(records, harness.truth_dict(cfg.study))
    harness.write_summary_csv(summary, os.path.join(args.out, "summary.csv"))
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_correct(args):
    raw = _read_json(args.model)
    if args.score_choice:
        raw["score_choice"] = args.score_choice
    if args.compute_se is not None:
        raw["compute_se"] = args.compute_se
    raw.setdefault("compute_se", True)
    if "study" not in raw:
        raise StructuralError("study: missing from model JSON")
    data = read_dataset_csv(args.data, int(raw["study"]))
    raw["n"] = data.n
    raw.setdefault("reps", 1)
    cfg = harness.StudyConfig.from_dict(raw)
    model = cfg.model()
    nu = model.estimate_nuisance(data)
    phi_hat = model.estimate_focal(data, nu)
    trace = robbins_monro(phi_hat, nu, cfg.rm_config(model.feasibility), model, cfg.seed, (0,))
    out = {
        "study": cfg.study,
        "scores": cfg.score_choice,
        "n": data.n,
        "focal_names": model.focal_names,
        "phi_hat": phi_hat.tolist(),
        "phi_bc": trace.phi_bc.tolist(),
        "ses": None,
        "nuisance": dict(zip(model.nuisance_names, nu.tolist())),
    }
    if cfg.compute_se:
        theta = np.concatenate([nu, trace.phi_bc])
        out["ses"] = compute_acm(theta, cfg.acm_config(theta.size), model, (0,)).ses.tolist()
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args):
    records = harness.read_records_csv(args.records)
    truth = harness.load_truth_json(int(args.truth) if args.truth.isdigit() else args.truth)
    summary = harness.aggregate(records, truth)
    if args.out:
        harness.write_summary_csv(summary, args.out)
    else:
        harness.write_summary_csv(summary, sys.stdout)
    return EXIT_OK


def cmd_trace(args):
    cfg = _config(args)
    model = StudyModel(cfg.study, cfg.n, cfg.score_choice)
    data = model.generate(model.draw(cfg.seed, (args.rep, STREAM_DATA)), model.truth().values)
    nu = model.estimate_nuisance(data)
    phi_hat = model.estimate_focal(data, nu)
    trace = robbins_monro(
        phi_hat, nu, cfg.rm_config(model.feasibility), model, cfg.seed, (args.rep,), model.focal_names
    )
    write_trace_csv(trace, args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "correct": cmd_correct,
    "report": cmd_report,
    "trace": cmd_trace,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StructuralError, DataError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
