"""Command line interface: ``rbprice <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 basis /
operator hash mismatch.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .certification import CertificationError
from .config import ConfigError, RunConfig, load_config, parse_mu
from .construction import (
    ErrorMeasure,
    SnapshotStore,
    TrainingError,
    load_basis,
    operator_header,
    read_header,
    save_basis,
)
from .detailed import SolverError, complementarity_defect, solve
from .online import HashMismatchError
from .studies import (
    REPORT_STEPS,
    STUDIES,
    UnknownStudy,
    build_ops,
    evaluate_basis,
    fill_store,
    run_study,
    train,
    write_csv,
    write_trace,
)

log = logging.getLogger("rbprice")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_HASH = 0, 2, 3, 4


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    if getattr(args, "workers", None):
        kw["workers"] = args.workers
    if getattr(args, "seed", None) is not None:
        kw["test_seed"] = args.seed
    if getattr(args, "measure", None):
        kw["measure"] = ErrorMeasure(args.measure)
    if getattr(args, "no_supremizers", False):
        kw["supremizers"] = False
    if getattr(args, "out", None):
        kw["out_dir"] = Path(args.out)
    return cfg.with_overrides(**kw) if kw else cfg


def cmd_detailed_solve(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    mu = parse_mu(args.mu, cfg) if args.mu else cfg.box.make([cfg.box.default[i] for i in cfg.box.active])
    ops = build_ops(cfg)
    traj = solve(ops, mu)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "U.csv", "U")
    if traj.Lam.size:
        traj.to_csv(out / "Lam.csv", "Lam")
    rows = [[n + 1, it] for n, it in enumerate(traj.iterations)]
    summary = [["mu", mu], ["n_free", ops.n_free], ["L", ops.L], ["runtime_seconds", traj.runtime],
               ["max_pdas_iterations", max(traj.iterations, default=0)]]
    if traj.Lam.size:
        worst = {"dual": 0.0, "primal": 0.0, "product": 0.0}
        for n in range(1, ops.L + 1):
            d = complementarity_defect(traj.U[n], traj.Lam[n - 1], ops.G)
            worst = {k: max(worst[k], d[k]) for k in worst}
        summary += [[f"complementarity_{k}", v] for k, v in worst.items()]
    tag = {"config_hash": ops.config_hash, "version": __version__}
    write_csv(out / "summary.csv", ["quantity", "value"], summary, tag)
    if rows:
        write_csv(out / "pdas_iterations.csv", ["step", "iterations"], rows, tag)
    print(f"solved {mu} on {ops.n_free} free nodes in {traj.runtime:.3f} s; wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    ops = build_ops(cfg)
    basis, trace, _ = train(cfg, ops, progress=print)
    out = Path(args.basis) if args.basis else cfg.out_dir / "basis.rbb"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_basis(out, basis, operator_header(ops))
    write_trace(out.with_suffix(".trace.csv"), trace, basis, {"config_hash": ops.config_hash, "version": __version__})
    print(f"basis N_V={basis.N_V} N_W={basis.N_W} written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    ops = build_ops(cfg)
    basis = load_basis(args.basis, ops)
    params = [parse_mu(m, cfg) for m in args.mu] if args.mu else cfg.test_set()
    store = None
    if not args.no_detailed:
        store = SnapshotStore(ops, cfg.cache_dir)
        fill_store(store, params, cfg.workers)
    rows = evaluate_basis(basis, ops, params, store)
    cols = ["l2_true", "energy_true", "apost"] + [f"eff_n{n}" for n in REPORT_STEPS]
    table = [[r["params"], r["N_V"], r["N_W"]] + [r.get(c, "") for c in cols] + [r.get("cert_error", "")]
             for r in rows]
    out = cfg.out_dir
    tag = {"config_hash": ops.config_hash, "version": __version__}
    write_csv(out / "evaluation.csv", ["mu", "N_V", "N_W"] + cols + ["note"], table, tag)
    agg = []
    for c in cols:
        vals = [r[c] for r in rows if c in r and math.isfinite(r[c])]
        if vals:
            agg.append([c, max(vals), sum(vals) / len(vals), len(vals)])
    write_csv(out / "evaluation_summary.csv", ["quantity", "max", "mean", "count"], agg, tag)
    for a in agg:
        print(f"{a[0]:>12}: max {a[1]:.4e}  mean {a[2]:.4e}  (n={a[3]})")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    written = run_study(args.study_id, cfg, cfg.out_dir, progress=print)
    for k, p in written.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    head = read_header(args.basis)
    basis = load_basis(args.basis)
    for k in sorted(head):
        if k != "supremizer_flags":
            print(f"{k} = {head[k]}")
    print(f"supremizers = {int(sum(basis.supremizer_flags))} of {basis.N_V} columns")
    print("k, mu, n_k, score, angle, N_V, N_W")
    for p in basis.provenance:
        print(f"{p.k}, {' '.join(f'{x:.6g}' for x in p.params)}, {p.n}, {p.score}, {p.angle}, {p.N_V}, {p.N_W}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbprice", description="Certified reduced basis option pricing.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        if workers:
            p.add_argument("--workers", type=int, help="process pool size for detailed solves")
            p.add_argument("--seed", type=int, help="seed of the random test set")

    p = sub.add_parser("detailed-solve", help="detailed trajectory for one parameter")
    common(p, workers=False)
    p.add_argument("--mu", help="comma separated parameter vector (all or active coordinates)")
    p.set_defaults(func=cmd_detailed_solve)

    p = sub.add_parser("train", help="POD-Angle-Greedy training")
    common(p)
    p.add_argument("--basis", help="output container path (default OUT/basis.rbb)")
    p.add_argument("--measure", choices=[m.value for m in ErrorMeasure])
    p.add_argument("--no-supremizers", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="errors, bounds and effectivities for a trained basis")
    common(p)
    p.add_argument("--basis", required=True)
    p.add_argument("--mu", action="append", help="parameter vector; repeat for several")
    p.add_argument("--no-detailed", action="store_true", help="skip true errors")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="run a named study at configured scale")
    p.add_argument("study_id", choices=sorted(STUDIES))
    common(p)
    p.add_argument("--measure", choices=[m.value for m in ErrorMeasure])
    p.add_argument("--no-supremizers", action="store_true")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("inspect-basis", help="print a basis container header and provenance")
    p.add_argument("basis")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownStudy) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatchError as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (SolverError, TrainingError, CertificationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
