"""Desk-scale studies: training, hierarchical error curves and effectivity tables.

Every table is written as CSV whose rows carry the operators' ``config_hash``
and the package version.  Timings go to a separate file so that the other
tables are bit-identical across reruns with the same configuration.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .certification import CertificationError, Certifier, certify, l2_true_measure, true_errors
from .config import RunConfig
from .construction import (
    ErrorMeasure,
    GreedyTrace,
    ReducedBasis,
    SnapshotStore,
    TrainingConfig,
    greedy_error_measure,
    operator_header,
    pod_angle_greedy,
    save_basis,
)
from .detailed import Trajectory, solve
from .fem import DiscreteOperators, build_operators
from .market_models import Model, ModelParams, OptionType, ParameterBox, param_names
from .online import project_operators, solve_reduced

log = logging.getLogger(__name__)

REPORT_STEPS = (5, 10, 15, 20)


@dataclass(frozen=True)
class StudyDefaults:
    """Default setup of one study; a config file can override every entry."""

    model: Model
    option: OptionType
    active: tuple[str, ...]
    grid: int
    N_max: int
    measures: tuple[ErrorMeasure, ...]
    test_count: int


STUDIES: dict[str, StudyDefaults] = {
    "eu-heston-2d": StudyDefaults(Model.HESTON, OptionType.EUROPEAN_CALL, ("gamma", "kappa"), 15, 50,
                                  (ErrorMeasure.L2_TRUE,), 400),
    "eu-heston-3d": StudyDefaults(Model.HESTON, OptionType.EUROPEAN_CALL, ("gamma", "kappa", "r"), 9, 150,
                                  (ErrorMeasure.L2_TRUE,), 1024),
    "eu-heston-5d": StudyDefaults(Model.HESTON, OptionType.EUROPEAN_CALL, ("xi", "rho", "gamma", "kappa", "r"), 6,
                                  350, (ErrorMeasure.L2_TRUE,), 10000),
    "am-heston-2d": StudyDefaults(Model.HESTON, OptionType.AMERICAN_PUT, ("gamma", "kappa"), 7, 35,
                                  (ErrorMeasure.L2_TRUE,), 200),
    "am-bs": StudyDefaults(Model.BLACK_SCHOLES, OptionType.AMERICAN_PUT, ("sigma", "q", "r"), 4, 25,
                           (ErrorMeasure.ENERGY_TRUE,), 20),
    "effectivity-bs": StudyDefaults(Model.BLACK_SCHOLES, OptionType.AMERICAN_PUT, ("sigma", "q", "r"), 4, 25,
                                    (ErrorMeasure.ENERGY_TRUE, ErrorMeasure.ENERGY_APOST), 0),
    "effectivity-heston": StudyDefaults(Model.HESTON, OptionType.AMERICAN_PUT, ("gamma", "kappa"), 7, 25,
                                        (ErrorMeasure.ENERGY_TRUE, ErrorMeasure.ENERGY_APOST), 0),
}


class UnknownStudy(ValueError):
    pass


# ---------------------------------------------------------------------------
# parallel detailed solves

_WORKER_OPS: DiscreteOperators | None = None


def _init_worker(spec, resolution, L, theta):
    global _WORKER_OPS
    _WORKER_OPS = build_operators(spec, resolution, L, theta)


def _solve_vector(kind, vec):
    p = ModelParams.from_vector(kind, vec)
    t = solve(_WORKER_OPS, p)
    return t.U, t.Lam, t.iterations, t.runtime


def build_ops(cfg: RunConfig) -> DiscreteOperators:
    return build_operators(cfg.spec, cfg.resolution, cfg.L, cfg.theta)


def fill_store(store: SnapshotStore, params: list[ModelParams], workers: int) -> None:
    """Solve all missing trajectories, in a process pool when ``workers > 1``."""
    todo = [p for p in params if tuple(p.vector) not in store._mem]
    if workers <= 1 or len(todo) < 2:
        for p in todo:
            store.get(p)
        return
    ops = store.ops
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(ops.spec, ops.resolution, ops.L, ops.theta)) as pool:
        futs = [pool.submit(_solve_vector, p.kind, p.vector) for p in todo]
        for p, f in zip(todo, futs):
            U, Lam, it, rt = f.result()
            store._mem[tuple(p.vector)] = Trajectory(U, Lam, p, list(it), rt)


# ---------------------------------------------------------------------------
# evaluation helpers


def evaluate_basis(basis: ReducedBasis, ops: DiscreteOperators, params: list[ModelParams], store: SnapshotStore | None,
                   certify_bound: bool = True) -> list[dict]:
    """Per-parameter errors, bounds and effectivities for one basis."""
    red = project_operators(basis, ops)
    cert = Certifier(red) if (ops.spec.american and certify_bound) else None
    rows = []
    for p in params:
        t0 = time.perf_counter()
        rt = solve_reduced(red, p)
        online = time.perf_counter() - t0
        row = {"params": p, "N_V": red.N_V, "N_W": red.N_W, "online_time": online,
               "pdas_max": max(rt.iterations, default=0), "traj": rt}
        det = store.get(p) if store is not None else None
        if det is not None:
            ev, _ = true_errors(red, rt, det)
            row["l2_true"] = l2_true_measure(ev, red.dt)
            row["detailed_time"] = det.runtime
        if cert is not None:
            try:
                rep = certify(cert, p, rt, det)
            except CertificationError as exc:
                row["cert_error"] = str(exc)
            else:
                row["report"] = rep
                row["apost"] = rep.apost
                if det is not None:
                    row["energy_true"] = rep.energy_true
                    for n in REPORT_STEPS:
                        if n <= rt.L:
                            row[f"eff_n{n}"] = rep.effectivity(n)
        elif det is not None and ops.spec.american:
            try:
                row["energy_true"] = greedy_error_measure(ErrorMeasure.ENERGY_TRUE, p, red, rt, det)
            except CertificationError as exc:
                row["cert_error"] = str(exc)
        rows.append(row)
    return rows


def _tag(ops: DiscreteOperators) -> dict:
    return {"config_hash": ops.config_hash, "version": __version__}


def write_csv(path: Path, header: list[str], rows: list[list], tag: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + list(tag))
        for r in rows:
            w.writerow([_fmt(v) for v in r] + list(tag.values()))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, ModelParams):
        return " ".join(repr(float(x)) for x in v.vector)
    return v


def write_trace(path: Path, trace: GreedyTrace, basis: ReducedBasis, tag: dict) -> None:
    rows = []
    for i, p in enumerate(basis.provenance):
        score = trace.max_scores[i - 1] if i >= 1 else ""
        inf_sup = trace.inf_sup[i] if i < len(trace.inf_sup) else ""
        rows.append([p.k, " ".join(repr(x) for x in p.params), p.n if p.n is not None else "",
                     score, p.angle if p.angle is not None else "", p.N_V, p.N_W, inf_sup])
    write_csv(path, ["k", "mu", "n_k", "max_train_score", "angle_rad", "N_V", "N_W", "reduced_inf_sup"], rows, tag)


def write_frequency(path: Path, basis: ReducedBasis, cfg: RunConfig, tag: dict) -> None:
    counts = Counter(tuple(np.asarray(p.params)[list(cfg.box.active)]) for p in basis.provenance)
    names = list(cfg.box.active_names)
    rows = [list(k) + [c] for k, c in sorted(counts.items())]
    write_csv(path, names + ["times_selected"], rows, tag)


# ---------------------------------------------------------------------------
# studies


def apply_study_defaults(cfg: RunConfig, study_id: str) -> RunConfig:
    """Fill keys that the configuration file leaves unset with the study defaults."""
    if study_id not in STUDIES:
        raise UnknownStudy(f"unknown study {study_id!r}; choose from {sorted(STUDIES)}")
    d = STUDIES[study_id]
    if cfg.spec.model is not d.model or cfg.spec.option_type is not d.option:
        raise UnknownStudy(f"study {study_id} needs model={d.model.value}, option={d.option.value}")
    src = cfg.source
    kw = {}
    if "box.active" not in src:
        names = param_names(d.model)
        b = cfg.box
        kw["box"] = ParameterBox(b.kind, b.lower, b.upper, b.default, tuple(names.index(a) for a in d.active))
    if "train.grid" not in src:
        kw["train_grid"] = (d.grid,)
    if "train.N_max" not in src:
        kw["N_max"] = d.N_max
    if "test.count" not in src:
        kw["test_count"] = d.test_count
    if "train.measure" not in src:
        kw["measure"] = d.measures[0]
    return cfg.with_overrides(**kw)


def train(cfg: RunConfig, ops: DiscreteOperators, store: SnapshotStore | None = None,
          measure: ErrorMeasure | None = None, progress=None) -> tuple[ReducedBasis, GreedyTrace, SnapshotStore]:
    store = store or SnapshotStore(ops, cfg.cache_dir)
    tc = TrainingConfig(cfg.train_set(), cfg.N_max, measure or cfg.measure, cfg.drop_tol, cfg.train_seed,
                        cfg.supremizers, cfg.cache_dir)
    tc.check_box(cfg.box)
    if tc.error_measure is not ErrorMeasure.ENERGY_APOST or not ops.spec.american:
        fill_store(store, tc.train_set, cfg.workers)
    basis, trace = pod_angle_greedy(tc, ops, store, progress)
    return basis, trace, store


def error_curves(basis: ReducedBasis, ops, params, store, measure_key: str) -> list[list]:
    """Max and mean of one error column over ``params`` for every hierarchical sub-basis."""
    out = []
    for k in range(1, len(basis.provenance) + 1):
        sub = basis.truncated(k)
        rows = evaluate_basis(sub, ops, params, store, certify_bound=False)
        vals = np.array([r.get(measure_key, np.nan) for r in rows], float)
        good = vals[np.isfinite(vals)]
        out.append([k, sub.N_V, sub.N_W, float(good.max()) if good.size else "", float(good.mean()) if good.size else "",
                    int(np.isfinite(vals).sum())])
    return out


def effectivity_table(basis: ReducedBasis, ops, params, store) -> tuple[list, int, int]:
    """Max effectivity per reported step over ``params``.

    Returns the maxima, the number of points where the bound is undefined
    (non-positive coercivity) and the number reproduced exactly (zero true
    error, infinite effectivity), which are left out of the maxima.
    """
    rows = evaluate_basis(basis, ops, params, store)
    effs = {n: [r[f"eff_n{n}"] for r in rows if f"eff_n{n}" in r] for n in REPORT_STEPS}
    undefined = sum("cert_error" in r for r in rows)
    exact = sum(any(not np.isfinite(r[k]) for k in r if k.startswith("eff_n")) for r in rows)
    finite = {n: [e for e in v if np.isfinite(e)] for n, v in effs.items()}
    return [max(finite[n]) if finite[n] else "" for n in REPORT_STEPS], undefined, exact


def run_study(study_id: str, cfg: RunConfig, out_dir: Path, progress=None) -> dict[str, Path]:
    """Run one study and write its tables into ``out_dir``; returns the written paths."""
    cfg = apply_study_defaults(cfg, study_id)
    ops = build_ops(cfg)
    tag = _tag(ops)
    out_dir = Path(out_dir)
    written: dict[str, Path] = {}
    store = SnapshotStore(ops, cfg.cache_dir)
    d = STUDIES[study_id]

    if study_id.startswith("effectivity"):
        rows = []
        for m in d.measures:
            try:
                basis, trace, store = train(cfg.with_overrides(measure=m), ops, store, m, progress)
            except CertificationError as exc:
                rows.append([m.value, cfg.N_max, "", ""] + [""] * len(REPORT_STEPS) + [f"not computable: {exc}"])
                continue
            fill_store(store, cfg.train_set(), cfg.workers)
            for it in sorted({max(1, cfg.N_max - 1), cfg.N_max}):
                sub = basis.truncated(min(it, len(basis.provenance)))
                effs, undefined, exact = effectivity_table(sub, ops, cfg.train_set(), store)
                notes = []
                if undefined:
                    notes.append(f"{undefined} training points with alpha_a <= 0 excluded")
                if exact:
                    notes.append(f"{exact} training points reproduced exactly")
                note = "; ".join(notes)
                rows.append([m.value, it, sub.N_V, sub.N_W] + effs + [note])
        p = out_dir / f"{study_id}_effectivities.csv"
        write_csv(p, ["measure", "N_max", "N_V", "N_W"] + [f"max_eff_n{n}" for n in REPORT_STEPS] + ["note"],
                  rows, tag)
        written["effectivities"] = p
        return written

    basis, trace, store = train(cfg, ops, store, progress=progress)
    bpath = out_dir / f"{study_id}.rbb"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_basis(bpath, basis, operator_header(ops))
    written["basis"] = bpath
    p = out_dir / f"{study_id}_greedy_trace.csv"
    write_trace(p, trace, basis, tag)
    written["trace"] = p
    p = out_dir / f"{study_id}_selected_parameters.csv"
    write_frequency(p, basis, cfg, tag)
    written["frequency"] = p

    test = cfg.test_set()
    fill_store(store, test, cfg.workers)
    key = "energy_true" if study_id == "am-bs" else "l2_true"
    curves = error_curves(basis, ops, test, store, key)
    p = out_dir / f"{study_id}_error_vs_N.csv"
    write_csv(p, ["k", "N_V", "N_W", f"max_test_{key}", f"mean_test_{key}", "n_defined"], curves, tag)
    written["errors"] = p

    rows = evaluate_basis(basis, ops, test, store, certify_bound=False)
    timing = [[r["params"], r["N_V"], r.get("detailed_time", ""), r["online_time"]] for r in rows]
    p = out_dir / f"{study_id}_timing.csv"
    write_csv(p, ["mu", "N_V", "detailed_seconds", "online_seconds"], timing, tag)
    written["timing"] = p
    return written
