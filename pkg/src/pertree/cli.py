"""Command-line front end.

Exit codes: 0 success (feasible / all checks pass), 2 infeasible or failed
checks, 1 errors (bad input, solver breakdown).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys as _sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import benchmarks
from .sdp import SolveOptions
from .synthesis import (
    DEFAULT_EPSILON,
    ControllerCertificate,
    EllipsoidFamily,
    synthesize,
    volume_ratio,
)
from .system import (
    constraints_from_dict,
    load_constraints,
    load_system,
    sample_realization,
    system_from_dict,
)

log = logging.getLogger("pertree")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
MODES = {"static": "static", "litpc": "litpc", "baseline": "baseline-tied"}


class UsageError(Exception):
    pass


def _load(system: str, constraints: str | None, constrained: bool):
    """Read a system from a file or a ``builtin:NAME`` benchmark."""
    if system.startswith("builtin:"):
        d = benchmarks.definition(system.split(":", 1)[1])
        sys = system_from_dict(d)
        cons = constraints_from_dict(d["constraints"], sys.n_x, sys.n_u) if "constraints" in d else None
    else:
        path = Path(system)
        if not path.exists():
            raise UsageError(f"system file {system} not found")
        try:
            sys, cons = load_system(path)
        except (ValueError, KeyError, TypeError) as err:
            raise UsageError(f"cannot parse system file {system}: {err}") from err
    if constraints is not None:
        try:
            cons = load_constraints(constraints, sys)
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise UsageError(f"cannot parse constraints file {constraints}: {err}") from err
    elif not constrained:
        cons = None
    if constrained and cons is None:
        raise UsageError("--constrained given but the system defines no constraints")
    return sys, cons


def _periods(args) -> list[int]:
    if args.period is not None:
        Ns = [args.period]
    else:
        try:
            lo, hi = (int(v) for v in args.period_range.replace("..", ":").split(":"))
        except ValueError:
            raise UsageError(f"bad period range {args.period_range!r}, expected LO:HI") from None
        Ns = list(range(lo, hi + 1))
    if not Ns or min(Ns) < 1:
        raise UsageError("period range must be nonempty and start at 1 or above")
    return Ns


def _options(args) -> SolveOptions:
    return SolveOptions(max_iters=getattr(args, "max_iters", None))


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1))


# --- synthesize ---------------------------------------------------------------

def cmd_synthesize(args) -> int:
    sys, cons = _load(args.system, args.constraints, args.constrained)
    kind = MODES[args.mode]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    any_feasible = False
    errors = False
    for N in _periods(args):
        res = synthesize(sys, N, kind, cons, args.epsilon, options=_options(args))
        line = f"{args.mode} N={N}: {res.status}"
        if res.margin is not None:
            line += f" (margin {res.margin:.3e})"
        if res.message:
            line += f" [{res.message}]"
        if res.feasible:
            path = out / f"certificate_{args.mode}_N{N}.json"
            res.certificate.save(path)
            line += f" -> {path}"
            if cons is not None:
                line += f", vol(P0) {EllipsoidFamily(res.certificate).volume():.6g}"
        print(line)
        any_feasible |= res.feasible
        errors |= res.status == "numerical-failure"
        if res.feasible and args.first:
            break
    if any_feasible:
        return EXIT_OK
    return EXIT_ERROR if errors else EXIT_INFEASIBLE


# --- verify -------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verification import verify_certificate

    sys, cons = _load(args.system, args.constraints, args.constrained)
    try:
        cert = ControllerCertificate.load(args.certificate)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot read certificate {args.certificate}: {err}") from err
    if cons is None and cert.constrained and not args.system.startswith("builtin:"):
        log.info("certificate was synthesized with constraints; pass --constraints to check them")
    report = verify_certificate(sys, cert, cons, seed=args.seed)
    out = Path(args.out)
    target = out if out.suffix == ".json" else out / "verification.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    report.save(target)
    status = "pass" if report.passed else "FAIL"
    print(f"{status}: fslf min margin {report.fslf.min_margin:.3e} over {report.fslf.margins.size} "
          f"scenarios{'' if report.fslf.exhaustive else ' (sampled)'}, "
          f"edge min margin {report.edges.min_margin:.3e} over {report.edges.n_edges} edges")
    for s in report.fslf.failing[:10]:
        print(f"  failing scenario {list(s)}")
    for e in report.edges.failing()[:10]:
        print(f"  failing edge t={e[0]} j={e[1]} vertex={e[2]}")
    if report.containment is not None:
        print(f"  containment min slack {report.containment.min_slack:.3e}")
    print(f"report -> {target}")
    return EXIT_OK if report.passed else EXIT_INFEASIBLE


# --- simulate -------------------------------------------------------------------

def _parse_x0(text: str, cert: ControllerCertificate, rng) -> np.ndarray:
    if text.startswith("boundary"):
        # boundary or boundary:ANGLE, a point on the root ellipse
        n = cert.n_x
        if ":" in text:
            th = float(text.split(":", 1)[1])
            if n != 2:
                raise UsageError("an angle only makes sense for planar systems")
            d = np.array([np.cos(th), np.sin(th)])
        else:
            d = rng.standard_normal(n)
            d /= np.linalg.norm(d)
        w, V = np.linalg.eigh(cert.S0)
        return V @ np.diag(np.sqrt(w)) @ V.T @ d
    try:
        x0 = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse initial state {text!r}") from None
    if x0.shape[0] != cert.n_x:
        raise UsageError(f"initial state has {x0.shape[0]} entries, expected {cert.n_x}")
    return x0


def cmd_simulate(args) -> int:
    from .runtime import run_closed_loop
    from .tree import build_index, simulate_tree

    sys, _ = _load(args.system, None, False)
    cert = ControllerCertificate.load(args.certificate)
    if (cert.n_x, cert.n_u, cert.n_d) != (sys.n_x, sys.n_u, sys.n_d):
        raise UsageError("certificate does not match the system dimensions")
    rng = np.random.default_rng(args.seed)
    x0 = _parse_x0(args.x0, cert, rng)
    horizon = args.horizon if args.horizon is not None else 10 * cert.N
    real = sample_realization(sys, horizon, args.realization, seed=args.seed)
    traj = run_closed_loop(sys, cert, x0, real)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    traj.to_json(out / "trajectory.json")
    if args.dump_tree:
        if cert.kind != "litpc":
            raise UsageError("only litpc certificates store a tree")
        simulate_tree(sys, build_index(sys.n_d, cert.N), x0, cert).dump(out / "tree.json")
    V = traj.period_values()
    print(f"simulated {horizon} steps: V(x_mN) = " + ", ".join(f"{v:.4g}" for v in V[:12])
          + (" ..." if V.size > 12 else ""))
    print(f"interpolation failures {traj.failures}; log -> {out / 'trajectory.csv'}")
    return EXIT_OK if traj.failures == 0 else EXIT_INFEASIBLE


# --- compare --------------------------------------------------------------------

def _compare_job(job):
    system, constraints, constrained, mode, N, eps = job
    sys, cons = _load(system, constraints, constrained)
    return mode, N, synthesize(sys, N, MODES[mode], cons, eps)


def _parse_methods(text: str) -> list[tuple[str, int]]:
    """``static:2,4;litpc:2,4`` or ``baseline:20``."""
    jobs = []
    for part in filter(None, text.split(";")):
        mode, _, Ns = part.partition(":")
        mode = mode.strip()
        if mode not in MODES or not Ns:
            raise UsageError(f"bad method spec {part!r}, expected MODE:N[,N...]")
        jobs += [(mode, int(n)) for n in Ns.split(",")]
    if not jobs:
        raise UsageError("no methods to compare")
    return jobs


def cmd_compare(args) -> int:
    sys, cons = _load(args.system, args.constraints, args.constrained)
    jobs = _parse_methods(args.methods)
    ref = _parse_methods(args.reference)[0] if args.reference else jobs[0]
    todo = list(dict.fromkeys(jobs + [ref]))
    payload = [(args.system, args.constraints, args.constrained, m, N, args.epsilon) for m, N in todo]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_compare_job, payload))
    else:
        results = [_compare_job(p) for p in payload]
    by_key = {(m, N): r for m, N, r in results}
    if not by_key[ref].feasible:
        print(f"reference {ref[0]} N={ref[1]} is {by_key[ref].status}")
        return EXIT_INFEASIBLE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref_cert = by_key[ref].certificate
    rows = []
    print(f"{'method':<10}{'N':>4}  {'status':<18}{'sqrt det S0':>14}{'ratio':>10}")
    for m, N in jobs:
        r = by_key[(m, N)]
        row = {"method": m, "N": N, "status": r.status, "sqrt_det_S0": None, "ratio": None}
        if r.feasible:
            cert = r.certificate
            row["sqrt_det_S0"] = float(np.sqrt(np.linalg.det(cert.S0)))
            row["ratio"] = volume_ratio(cert, ref_cert)
            cert.save(out / f"certificate_{m}_N{N}.json")
            if sys.n_x == 2:
                _export_boundaries(cert, out / "boundaries" / f"{m}_N{N}", args.points)
        rows.append(row)
        sd = "-" if row["sqrt_det_S0"] is None else f"{row['sqrt_det_S0']:.6g}"
        ra = "-" if row["ratio"] is None else f"{row['ratio']:.4f}"
        print(f"{m:<10}{N:>4}  {r.status:<18}{sd:>14}{ra:>10}")
    _write_json(out / "compare.json", {"reference": {"method": ref[0], "N": ref[1]}, "rows": rows})
    with open(out / "ratios.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"table -> {out / 'ratios.csv'}")
    return EXIT_OK


def _export_boundaries(cert: ControllerCertificate, folder: Path, n_points: int) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    fam = EllipsoidFamily(cert)
    for t, j in cert.nodes():
        pts = fam.boundary(t, j, n_points)
        np.savetxt(folder / f"t{t}_j{j}.csv", pts, delimiter=",", header="x0,x1", comments="")


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pertree", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, constraints=True):
        sp.add_argument("--system", required=True,
                        help="system file (JSON/TOML) or builtin:example1|example2|example3")
        if constraints:
            sp.add_argument("--constraints", help="constraint file (JSON/TOML)")
            sp.add_argument("--constrained", action="store_true",
                            help="use the constraints embedded in the system file")
        sp.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")

    s = sub.add_parser("synthesize", help="solve a synthesis program")
    common(s)
    s.add_argument("--mode", choices=sorted(MODES), required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--period", type=int)
    g.add_argument("--period-range", help="LO:HI, inclusive")
    s.add_argument("--first", action="store_true", help="stop at the first feasible period")
    s.add_argument("--max-iters", type=int, default=None)
    s.set_defaults(func=cmd_synthesize)

    v = sub.add_parser("verify", help="check a certificate independently")
    common(v)
    v.add_argument("--certificate", required=True)
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("simulate", help="run the closed loop under the runtime controller")
    common(m, constraints=False)
    m.add_argument("--certificate", required=True)
    m.add_argument("--x0", default="boundary", help="comma-separated state, 'boundary' or 'boundary:ANGLE'")
    m.add_argument("--horizon", type=int, default=None)
    m.add_argument("--realization", choices=["interior", "vertices"], default="interior")
    m.add_argument("--dump-tree", action="store_true", help="also write the first stored tree")
    m.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="root-volume ratios across methods and periods")
    common(c)
    c.add_argument("--methods", default="static:2,4;litpc:2,4",
                   help="MODE:N[,N...] separated by ';'")
    c.add_argument("--reference", default="baseline:20", help="MODE:N used as the denominator")
    c.add_argument("--points", type=int, default=256, help="boundary points per ellipse")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=_sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=_sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    _sys.exit(main())
