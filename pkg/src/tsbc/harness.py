"""Replication studies: generate, estimate, correct, summarise, persist.

Replication ``r`` uses the stream family rooted at ``(r,)``: its dataset
comes from ``(r, STREAM_DATA)``, the Robbins-Monro draws from
``(r, STREAM_RM, k, j)`` and the covariance draws from ``(r, STREAM_ACM, m)``.
Every replication is therefore a pure function of ``(config, r)`` and the
records do not depend on how replications are spread over workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from importlib import resources
from typing import Optional

import numpy as np

from .acm import ACMConfig, bootstrap_omega, compute_acm, equal_blocks
from .correction import RMConfig, robbins_monro
from .dga import STREAM_BOOT, STREAM_DATA, STUDY_NAMES, study_truth
from .exceptions import DataError, StructuralError, TSBCError
from .models import StudyModel
from .structural import DEFAULT_SCORES, VALID_SCORES

METHODS = ("fsr", "bc")
RECORD_COLUMNS = ("rep", "method", "param", "estimate", "se", "runtime_ms", "flags")
SUMMARY_COLUMNS = ("method", "param", "rb", "ese", "rbse", "reps")
DEFAULT_DELTA = {1: 1e-6, 2: 1e-6, 3: 0.005}
DEFAULT_N_BLOCKS = {1: 1, 2: 1, 3: 15}


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce a replication study."""

    study: int
    n: int = 500
    reps: int = 200
    seed: int = 0
    score_choice: Optional[str] = None
    methods: tuple = METHODS
    compute_se: bool = False
    K: int = 1000
    a: float = 3.0
    b: float = 0.6
    mc_per_iter: int = 1
    M: int = 1000
    delta: Optional[float] = None
    n_blocks: Optional[int] = None

    def __post_init__(self):
        if self.study not in VALID_SCORES:
            raise StructuralError(f"study: must be 1, 2 or 3, got {self.study!r}")
        score = (self.score_choice or DEFAULT_SCORES[self.study]).upper()
        if score not in VALID_SCORES[self.study]:
            raise StructuralError(
                f"score_choice: {score!r} is not valid for study {self.study} "
                f"(choose from {', '.join(VALID_SCORES[self.study])})"
            )
        object.__setattr__(self, "score_choice", score)
        methods = self.methods
        if isinstance(methods, str):
            methods = methods.split(",")
        methods = tuple(m.strip().lower() for m in methods if m.strip())
        if not methods or any(m not in METHODS for m in methods):
            raise StructuralError(f"methods: must be a non-empty subset of {set(METHODS)}")
        object.__setattr__(self, "methods", methods)
        if self.reps < 1:
            raise StructuralError("reps: must be at least 1")
        if self.n < 50:
            raise StructuralError("n: must be at least 50")
        if self.delta is None:
            object.__setattr__(self, "delta", DEFAULT_DELTA[self.study])
        if self.n_blocks is None:
            object.__setattr__(self, "n_blocks", DEFAULT_N_BLOCKS[self.study])
        # surfaces invalid RM/ACM settings early, with their own messages
        self.rm_config(None)
        self.acm_config()

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise StructuralError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        if "study" not in raw:
            raise StructuralError("study: missing from config")
        return cls(**raw)

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def rm_config(self, feasibility):
        kw = {} if feasibility is None else {"feasibility": feasibility}
        return RMConfig(K=self.K, a=self.a, b=self.b, mc_per_iter=self.mc_per_iter, **kw)

    def acm_config(self, q=None):
        blocks = None
        if q is not None and self.n_blocks > 1:
            blocks = equal_blocks(q, self.n_blocks)
        return ACMConfig(M=self.M, delta=self.delta, blocks=blocks, seed=self.seed)

    def model(self):
        return StudyModel(self.study, self.n, self.score_choice)

    def label(self, method):
        return f"{method.upper()}({self.score_choice})"


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    method: str
    param: str
    estimate: float
    se: Optional[float] = None
    runtime_ms: int = 0
    flags: str = ""

    def key(self):
        return (self.rep, self.method, self.param)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    param: str
    rb: float
    ese: float
    rbse: Optional[float]
    reps: int
    flags: str = ""


def _records(rep, label, names, estimates, ses, ms, flags):
    out = []
    for j, name in enumerate(names):
        se = None if ses is None or ses[j] is None else float(ses[j])
        out.append(ReplicationRecord(rep, label, name, float(estimates[j]), se, int(ms), flags))
    return out


def _failed(rep, label, names, ms, exc):
    flag = f"failed:{type(exc).__name__}"
    return _records(rep, label, names, [math.nan] * len(names), None, ms, flag)


def _ms(t0):
    return int(round((time.perf_counter() - t0) * 1000))


def _fsr_ses(cfg, model, theta_hat, rep):
    """Bootstrap SEs of the naive slopes (other focal parameters get none)."""
    omega, skipped = bootstrap_omega(theta_hat, cfg.acm_config(), model, (rep, STREAM_BOOT))
    focal = list(model.partition.focal_idx)
    ses = []
    for name, idx in zip(model.focal_names, focal):
        ses.append(float(np.sqrt(omega[idx, idx])) if name.startswith("beta") else None)
    return ses, skipped


def run_replication(cfg: StudyConfig, rep: int):
    """Records of every requested method for replication ``rep``."""
    model = cfg.model()
    names = model.focal_names
    truth = model.truth().values
    t0 = time.perf_counter()
    data = model.generate(model.draw(cfg.seed, (rep, STREAM_DATA)), truth)
    try:
        nu = model.estimate_nuisance(data)
        phi_hat = model.estimate_focal(data, nu)
    except (TSBCError, np.linalg.LinAlgError) as exc:
        ms = _ms(t0)
        return [r for m in cfg.methods for r in _failed(rep, cfg.label(m), names, ms, exc)]
    stage_ms = _ms(t0)
    out = []
    if "fsr" in cfg.methods:
        t1 = time.perf_counter()
        ses, flags = None, ""
        if cfg.compute_se and cfg.score_choice == "BR":
            try:
                ses, skipped = _fsr_ses(cfg, model, np.concatenate([nu, phi_hat]), rep)
                flags = f"boot_skipped={skipped}" if skipped else ""
            except TSBCError as exc:
                flags = f"se_failed:{type(exc).__name__}"
        out += _records(rep, cfg.label("fsr"), names, phi_hat, ses, stage_ms + _ms(t1), flags)
    if "bc" in cfg.methods:
        t1 = time.perf_counter()
        label = cfg.label("bc")
        try:
            trace = robbins_monro(
                phi_hat, nu, cfg.rm_config(model.feasibility), model, cfg.seed, (rep,), names
            )
        except TSBCError as exc:
            out += _failed(rep, label, names, stage_ms + _ms(t1), exc)
            return out
        flags = [f"projections={trace.projections}"] if trace.projections else []
        ses = None
        if cfg.compute_se:
            theta_bc = np.concatenate([nu, trace.phi_bc])
            try:
                res = compute_acm(theta_bc, cfg.acm_config(theta_bc.size), model, (rep,))
                ses = res.ses
                if res.flags.get("bootstrap_skipped"):
                    flags.append(f"boot_skipped={res.flags['bootstrap_skipped']}")
            except TSBCError as exc:
                flags.append(f"se_failed:{type(exc).__name__}")
        out += _records(rep, label, names, trace.phi_bc, ses, stage_ms + _ms(t1), ";".join(flags))
    return out


def resolve_workers(workers=None):
    """Explicit argument, else ``TSBC_THREADS``, else 1."""
    if workers is None:
        env = os.environ.get("TSBC_THREADS")
        if env:
            try:
                workers = int(env)
            except ValueError as exc:
                raise StructuralError(f"TSBC_THREADS must be an integer, got {env!r}") from exc
        else:
            workers = 1
    if workers < 1:
        raise StructuralError("workers: must be at least 1")
    return int(workers)


def sort_records(records):
    return sorted(records, key=ReplicationRecord.key)


def run_study(cfg: StudyConfig, workers=None):
    """All replications of ``cfg``, sorted by ``(rep, method, param)``."""
    workers = resolve_workers(workers)
    job = partial(run_replication, cfg)
    if workers == 1:
        chunks = [job(r) for r in range(cfg.reps)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(job, range(cfg.reps)))
    return sort_records(r for chunk in chunks for r in chunk)


def aggregate(records, truth):
    """RB, ESE and RBSE per ``(method, param)``.

    ``truth`` maps parameter names to true values.  Replications whose
    estimate is not finite are left out; RBSE is reported only when every
    retained replication carries an SE.
    """
    truth = dict(truth)
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.param), []).append(r)
    rows = []
    for (method, param), recs in sorted(groups.items()):
        if param not in truth:
            raise DataError(f"no true value for parameter {param!r}")
        kept = [r for r in recs if r.estimate is not None and math.isfinite(r.estimate)]
        if len(kept) < 2:
            raise DataError(f"{method}/{param}: fewer than two usable replications")
        est = np.array([r.estimate for r in kept])
        tv = float(truth[param])
        bias = float(est.mean()) - tv
        flags = ""
        if tv == 0.0:
            rb, flags = bias, "absolute_bias"
        else:
            rb = bias / tv
        ese = float(est.std(ddof=1))
        rbse = None
        if all(r.se is not None and math.isfinite(r.se) for r in kept):
            rmse_se = float(np.sqrt(np.mean([r.se**2 for r in kept])))
            rbse = (rmse_se - ese) / ese if ese > 0 else math.nan
        rows.append(SummaryRow(method, param, rb, ese, rbse, len(kept), flags))
    return rows


# -- persistence ------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def write_records_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.rep, r.method, r.param, _fmt(r.estimate), _fmt(r.se), r.runtime_ms, r.flags])


def read_records_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RECORD_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(RECORD_COLUMNS)}")
        out = []
        for row in reader:
            try:
                out.append(
                    ReplicationRecord(
                        int(row["rep"]),
                        row["method"],
                        row["param"],
                        float(row["estimate"]),
                        float(row["se"]) if row["se"] else None,
                        int(row["runtime_ms"]),
                        row["flags"],
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}: malformed record ({exc})") from exc
    return out


def write_summary_csv(rows, path_or_file):
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in rows:
            w.writerow([s.method, s.param, _fmt(s.rb), _fmt(s.ese), _fmt(s.rbse), s.reps])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def truth_dict(study):
    return study_truth(study).as_dict()


def load_truth_json(path_or_study):
    """True values by name from a JSON file or a shipped fixture (study number)."""
    if isinstance(path_or_study, int):
        ref = resources.files("tsbc") / "fixtures" / f"truth_study{path_or_study}.json"
        raw = json.loads(ref.read_text(encoding="utf-8"))
    else:
        with open(path_or_study, encoding="utf-8") as fh:
            raw = json.load(fh)
    if isinstance(raw, dict) and "parameters" in raw:
        raw = raw["parameters"]
    if not isinstance(raw, dict) or not all(isinstance(v, (int, float)) for v in raw.values()):
        raise DataError("truth JSON must map parameter names to numbers")
    return {k: float(v) for k, v in raw.items()}


def truth_fixture(study):
    """JSON text of the shipped truth fixture for ``study``."""
    tv = study_truth(study)
    return json.dumps(
        {"study": study, "parameters": dict(zip(STUDY_NAMES[study], tv.values.tolist()))},
        indent=2,
    ) + "\n"
