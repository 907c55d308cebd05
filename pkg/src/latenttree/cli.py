"""Command line interface: ``latenttree <command> ...``.

JSON results go to stdout and a one-line summary to stderr.  Exit codes:
0 compatible / not rejected, 1 incompatible / rejected, 2 usage or input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
import warnings

import numpy as np

from . import geometry, inference, simlab
from .io import FormatError, read_data_csv, read_matrix_csv, read_tree, write_data_csv
from .numerics import NumericalError, make_rng
from .trees import NewickError, Quartet, serialize_newick

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(payload: dict, summary: str) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, default=_jsonable) + "\n")
    sys.stderr.write(summary + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2 ** 63)
        sys.stderr.write(f"seed: {args.seed}\n")
    return args.seed


def _scatter(args) -> tuple[geometry.SymMatrix, float]:
    """Scatter matrix and degrees of freedom from ``--data`` or ``--scatter/--n``."""
    if getattr(args, "data", None):
        x, names = read_data_csv(args.data)
        s, n = inference.scatter_from_data(x, center=args.center)
        return geometry.SymMatrix(s, "scatter", names), n
    if getattr(args, "scatter", None):
        if args.n is None:
            raise UsageError("--scatter needs --n")
        return read_matrix_csv(args.scatter, role="scatter"), args.n
    raise UsageError("one of --data or --scatter is required")


# ---------------------------------------------------------------------------
# commands


def cmd_check(args) -> int:
    role = args.role
    if role == "auto":
        try:
            m, role = read_matrix_csv(args.matrix, role="correlation"), "correlation"
        except FormatError:
            raise
        except ValueError:  # not unit diagonal
            m, role = read_matrix_csv(args.matrix, role="covariance"), "covariance"
    else:
        m = read_matrix_csv(args.matrix, role=role)
    # correlation files are judged on the inequalities alone so the failing
    # constraint is reported even for indefinite input
    require_psd = role != "correlation"
    if args.tree:
        t = read_tree(args.tree)
        v = geometry.T_compatible(m, t, tol=args.tol, require_psd=require_psd)
        target = serialize_newick(t)
    else:
        v = geometry.tree_compatible(m, tol=args.tol, mode=args.mode, require_psd=require_psd)
        target = None
    payload = {"command": "check", "mode": args.mode, "tree": target, **v.to_dict()}
    if v.member:
        summary = "compatible"
    else:
        w = v.witness or {}
        summary = f"incompatible: {w.get('kind')} on {','.join(w.get('leaves', []))}"
    _emit(payload, summary)
    return EXIT_OK if v.member else EXIT_REJECT


def cmd_test(args) -> int:
    s, n = _scatter(args)
    t = read_tree(args.tree)
    if args.quartet:
        rep = inference.quartet_test(s, n, Quartet.parse(args.quartet))
    else:
        rep = inference.confirmatory_test(s, n, t)
    reject = rep.p_value < args.alpha
    payload = {"command": "test", "tree": serialize_newick(t), "alpha": args.alpha,
               "rejected": reject, **rep.to_dict()}
    _emit(payload, f"T = {rep.statistic:.4g}, dof = {rep.dof}, p = {rep.p_value:.4g}"
                   f" -> {'rejected' if reject else 'not rejected'} at {args.alpha}")
    return EXIT_REJECT if reject else EXIT_OK


def cmd_explore(args) -> int:
    s, n = _scatter(args)
    rep = inference.exploratory_scan(s, n, alpha=args.alpha, cap=args.cap)
    payload = {"command": "explore", "n": n, **rep.to_dict()}
    cand = serialize_newick(rep.candidate) if rep.candidate else "none"
    _emit(payload, f"candidate {cand} ({len(rep.surviving)} of {len(rep.ranked)} trees survive"
                   f" at {rep.bonferroni_alpha:.4g})")
    return EXIT_OK if rep.candidate is not None else EXIT_REJECT


def cmd_screen(args) -> int:
    s, n = _scatter(args)
    rep = inference.quartet_screen(s, n, alpha=args.alpha)
    payload = {"command": "screen", "n": n, **rep.to_dict()}
    _emit(payload, f"{len(rep.resolved())} of {len(rep.classification)} subsets resolved")
    return EXIT_OK


def cmd_bayes(args) -> int:
    s, n = _scatter(args)
    seed = _seed(args)
    triple = args.triple.split(",") if args.triple else None
    rep = inference.bayes_compatibility(s, n, args.draws, seed, mode=args.mode,
                                        triple=triple, quartet=args.quartet)
    payload = {"command": "bayes", **rep.to_dict()}
    verdict = ""
    code = EXIT_OK
    if args.threshold is not None:
        code = EXIT_OK if rep.probability >= args.threshold else EXIT_REJECT
        verdict = f" ({'passes' if code == EXIT_OK else 'fails'} threshold {args.threshold})"
    _emit(payload, f"posterior probability {rep.probability:.4g} from {rep.draws} draws{verdict}")
    return code


def _weight_law(args) -> simlab.WeightLaw:
    if args.rho is not None and args.rho_range is not None:
        raise UsageError("give --rho or --rho-range, not both")
    if args.rho_range is not None:
        try:
            lo, hi = (float(x) for x in args.rho_range.split(","))
        except ValueError:
            raise UsageError("--rho-range must be LO,HI") from None
        return simlab.WeightLaw.uniform(lo, hi)
    if args.rho is not None:
        return simlab.WeightLaw.fixed(args.rho)
    return simlab.WeightLaw.uniform(0.5, 1.0)


def cmd_simulate(args) -> int:
    seed = _seed(args)
    os.makedirs(args.out, exist_ok=True)
    exp = args.experiment
    if exp == "volume":
        est = simlab.volume_ratio_tripod(args.draws, seed, psd_filter=not args.no_psd_filter)
        path = os.path.join(args.out, "volume.csv")
        with open(path, "w") as fh:
            fh.write("estimate,stderr,kept,total,psd_filter\n")
            fh.write(f"{est.estimate!r},{est.stderr!r},{est.kept},{est.total},{est.psd_filter}\n")
        config = {"draws": args.draws, "seed": seed, "psd_filter": est.psd_filter}
        result = est.to_dict()
        summary = f"volume ratio {est.estimate:.4f} +- {est.stderr:.4f}"
    else:
        if not args.tree:
            raise UsageError(f"--experiment {exp} needs --tree")
        t = read_tree(args.tree)
        if exp == "recovery":
            rho = 0.7 if args.rho is None else args.rho
            res = simlab.recovery_experiment(t, rho, args.n, args.reps, args.alpha, seed)
            path = os.path.join(args.out, "recovery.csv")
            with open(path, "w") as fh:
                fh.write("fraction,successes,reps,alpha\n")
                fh.write(f"{res.fraction!r},{res.successes},{res.reps},{res.alpha!r}\n")
            config = {"tree": serialize_newick(t), "rho": rho, "n": args.n, "reps": args.reps,
                      "alpha": args.alpha, "seed": seed}
            result = res.to_dict()
            summary = f"recovered the tree in {res.successes}/{res.reps} replicates"
        else:
            quartets = args.quartets.split(",") if args.quartets else "testing"
            if quartets in (["testing"], ["determining"]):
                quartets = quartets[0]
            cfg = simlab.ExperimentConfig(t, _weight_law(args), args.n, args.reps, seed, quartets)
            if exp == "null":
                hist = simlab.null_distribution_experiment(cfg, workers=args.workers)
                result = hist.to_dict()
                summary = f"KS distance to chi2({hist.dof}) = {hist.ks:.4f}"
            else:
                res = simlab.power_experiment(cfg, alpha=args.alpha, workers=args.workers)
                hist = res.histogram
                result = res.to_dict()
                summary = f"rejection rate {res.rejection_rate:.3f} at {args.alpha}"
            path = os.path.join(args.out, "histogram.csv")
            hist.to_csv(path)
            config = cfg.to_dict()
    result["output"] = os.path.basename(path)
    simlab.write_manifest(args.out, exp, config, result)
    _emit({"command": "simulate", "experiment": exp, "config": config, "result": result,
           "seed": seed}, summary)
    return EXIT_OK


def cmd_gen(args) -> int:
    seed = _seed(args)
    t = read_tree(args.tree)
    w = geometry.constant_edge_weights(t, args.rho)
    x = simlab.gen_tree_data(t, w, args.n, make_rng(seed))
    write_data_csv(args.out, x, t.leaves)
    _emit({"command": "gen", "tree": serialize_newick(t), "rho": args.rho, "n": args.n,
           "seed": seed, "out": args.out}, f"wrote {args.n} x {t.n_leaves} data to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_data(p, scatter: bool = True) -> None:
    p.add_argument("--data", help="CSV with one observation per row")
    if scatter:
        p.add_argument("--scatter", help="CSV scatter matrix X'X")
        p.add_argument("--n", type=float, help="degrees of freedom of --scatter")
    p.add_argument("--center", dest="center", action="store_true", default=True,
                   help="subtract column means from --data (default)")
    p.add_argument("--no-center", dest="center", action="store_false",
                   help="data already have mean zero")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latenttree", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="semialgebraic membership of a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--tree")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--mode", choices=["triples", "full"], default="full")
    p.add_argument("--role", choices=["auto", "correlation", "covariance"], default="auto")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("test", help="tetrad test of a quartet or a whole tree")
    _add_data(p)
    p.add_argument("--tree", required=True)
    p.add_argument("--quartet")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("explore", help="rank all binary trees by tetrad p-value")
    _add_data(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--cap", type=int, default=7)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("screen", help="classify every 4-subset")
    _add_data(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("bayes", help="posterior probability of tree compatibility")
    _add_data(p)
    p.add_argument("--draws", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["triples", "quartet-full"], default="triples")
    p.add_argument("--quartet")
    p.add_argument("--triple", help="three comma-separated leaf names")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_bayes)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--experiment", choices=["null", "power", "recovery", "volume"], required=True)
    p.add_argument("--tree")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--rho-range")
    p.add_argument("--quartets", help="comma-separated quartets, or testing / determining")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--draws", type=int, default=1_000_000, help="volume experiment sample size")
    p.add_argument("--no-psd-filter", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen", help="simulate data from a tree")
    p.add_argument("--tree", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            code = args.func(args)
        for w in caught:
            sys.stderr.write(f"warning: {w.message}\n")
        return code
    except NumericalError as exc:
        sys.stderr.write(f"numerical error: {exc}\n")
        return EXIT_NUMERIC
    except (FormatError, NewickError, UsageError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
