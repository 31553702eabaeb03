"""Command-line entry point: simulate, fit, solve, verify, scan.

Every output file is deterministic given the arguments (the worker count
excluded), and each run writes a JSON file that embeds the arguments, the
seed and the library versions.  ``--config FILE`` replays the arguments
embedded in such a file.

Exit codes: 0 success, 1 verification failure, 2 statistical or property
gate failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

log = logging.getLogger("interlacements")

EXIT_OK, EXIT_VERIFY, EXIT_GATE, EXIT_USAGE = 0, 1, 2, 64
OUT_ENV = "INTERLACEMENTS_OUT"
NOT_EMBEDDED = ("workers", "out", "config", "verbose", "func")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_levels(text: str) -> list[float]:
    """``a:b:step`` (endpoints inclusive within 1e-12), comma lists, or a single value."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"bad level grid {text!r}; expected a:b:step")
        a, b, s = (float(p) for p in parts)
        if s <= 0 or b < a:
            raise UsageError(f"bad level grid {text!r}")
        n = int(math.floor((b - a) / s + 1e-12))
        out = [round(a + i * s, 12) for i in range(n + 1)]
        if abs(out[-1] - b) > 1e-12 and abs(a + (n + 1) * s - b) <= 1e-12:
            out.append(b)
        return out
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"bad level list {text!r}") from None


def parse_radii(text: str) -> list[int]:
    if ":" in text:
        a, b = text.split(":")[:2]
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",") if x]


def versions() -> dict:
    import numba
    import scipy

    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"interlacements": own, "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def embedded(args, command: str) -> dict:
    a = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_EMBEDDED}
    return {"command": command, "args": a, "seed": a.get("seed"), "versions": versions()}


def out_dir(args) -> Path:
    p = Path(args.out or os.environ.get(OUT_ENV, "."))
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


# --- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .percolation import Probe, SoupConfig, coupling_audit, nlf_scan, run_soups, theta_curve

    levels = parse_levels(args.levels)
    if not levels or any(u < 0 for u in levels) or sorted(levels) != levels:
        raise UsageError("levels must be nonnegative and ascending")
    if not 0 <= args.L <= args.N:
        raise UsageError(f"need 0 <= L <= N, got L={args.L}, N={args.N}")
    radii = parse_radii(args.nlf_radii) if args.nlf_radii else list(range(1, args.N // 2 + 1))
    nlf_u = max(levels) if args.nlf_level is None else args.nlf_level
    if 2 * max(radii) > args.N:
        raise UsageError("NLF outer radius 2L exceeds the window radius")
    u_max = max(max(levels), nlf_u)
    if u_max <= 0:
        u_max = 1.0
    cfg = SoupConfig(d=args.d, N=args.N, u_max=u_max, n_soups=args.soups, seed=args.seed, guard=args.guard, eq_samples=args.eq_samples)
    probes = [Probe(levels, (args.L,)), Probe((nlf_u,), (args.N,))]
    batch = run_soups(cfg, probes, args.workers)
    curve = theta_curve(batch, args.L)
    scan = nlf_scan(batch, nlf_u, radii, probe=1)
    audit = coupling_audit(batch)
    out = out_dir(args)
    write_text(out / "theta.csv", curve.to_csv())
    write_text(out / "nlf.csv", scan.to_csv())
    fit = None if scan.fit is None else {"c0": scan.fit.c0, "gamma": scan.fit.gamma, "c3": scan.fit.c3, "radii": list(scan.fit.radii), "residual": scan.fit.residual}
    summary = {
        "config": embedded(args, "simulate"),
        "files": ["theta.csv", "nlf.csv"],
        "capacity": batch.cap_estimate.to_dict(),
        "intensity": batch.intensity,
        "mean_trajectories": float(batch.counts.mean()),
        "coupling_audit": audit,
        "nlf": {"level": nlf_u, "counts": scan.counts.tolist(), "fit": fit, "message": scan.fit_message},
    }
    write_json(out / "simulate.json", summary)
    if audit["u_violations"] or audit["L_violations"]:
        log.error("coupling monotonicity violated: %s", audit)
        return EXIT_GATE
    return EXIT_OK


# --- fit --------------------------------------------------------------------------


def cmd_fit(args) -> int:
    from .percolation import ThetaCurve
    from .theta import ProfileError, build_smoothed_theta, check_profile, fit_base, parse_toy

    if not 0 < args.u0 < args.u1 < args.u_star:
        raise UsageError(f"need 0 < u0 < u1 < u_star, got u0={args.u0}, u1={args.u1}, u_star={args.u_star}")
    if args.toy:
        try:
            base = parse_toy(args.toy)
        except ValueError as e:
            raise UsageError(str(e)) from None
    elif args.curve:
        with open(args.curve, encoding="utf-8") as f:
            curve = ThetaCurve.from_csv(f.read())
        lv = np.asarray(curve.levels)
        inside = lv[lv <= args.u0 + 1e-12]
        if len(inside) < 8 or inside.min() > 1e-12 or inside.max() < args.u0 - 1e-12:
            raise UsageError(f"curve must cover [0, u0={args.u0}] with at least 8 levels")
        base = fit_base(curve.levels, curve.estimates, args.u0, source=f"curve:{Path(args.curve).name}")
    else:
        raise UsageError("give --curve or --toy")
    out = out_dir(args)
    try:
        st = build_smoothed_theta(base, args.u0, args.u1, args.u_star)
    except ProfileError as e:
        log.error("profile checks failed: %s", e)
        write_json(out / args.name, {"config": embedded(args, "fit"), "error": str(e)})
        return EXIT_GATE
    doc = {"config": embedded(args, "fit"), "profile": st.to_dict(), "digest": st.digest(), "checks": _jsonable(check_profile(st))}
    write_json(out / args.name, doc)
    return EXIT_OK


def _jsonable(x):
    from .verification import _plain

    return _plain(x)


# --- solve ------------------------------------------------------------------------


def _load_profile(args):
    from .theta import AffineToy, load_profile

    if args.affine:
        try:
            th, kappa, us = (float(v) for v in args.affine.split(","))
        except ValueError:
            raise UsageError("--affine takes THETA_U,KAPPA,U_STAR") from None
        return AffineToy(args.u, th, kappa, us)
    if not args.profile:
        raise UsageError("give --profile or --affine")
    with open(args.profile, encoding="utf-8") as f:
        doc = json.load(f)
    return load_profile(doc.get("profile", doc))


def _domain(args):
    from .variational import BoxDomain, RadialBall

    if args.domain == "ball":
        return RadialBall(args.radius, 3, args.h, args.r_max)
    return BoxDomain(args.radius, args.d, args.box_n, args.box_pad)


def cmd_solve(args) -> int:
    from .variational import SmallExcessError, failed_checks, result_to_dict, solve_min, write_profile_csv

    st = _load_profile(args)
    dom = _domain(args)
    th = float(st.theta(args.u))
    if args.nu_grid:
        nus = parse_levels(args.nu_grid)
    elif args.nu is not None:
        nus = [args.nu]
    elif args.excess is not None:
        nus = [th + args.excess]
    else:
        raise UsageError("give --nu, --excess or --nu-grid")
    out = out_dir(args)
    results, code = [], EXIT_OK
    for nu in nus:
        try:
            r = solve_min(args.u, nu, st, dom, omega=args.omega, tol=args.tol)
        except SmallExcessError as e:
            results.append({"nu": nu, "error": str(e), "best_constraint": e.best_constraint})
            code = EXIT_GATE
            continue
        bad = failed_checks(r.properties)
        if bad:
            code = EXIT_GATE
        results.append(result_to_dict(r, include_profile=len(nus) == 1) | {"failed_checks": bad})
        if len(nus) == 1:
            with open(out / "phi.csv", "w", encoding="utf-8", newline="\n") as f:
                write_profile_csv(r, f)
    Js = [x["energy"] for x in results if "energy" in x]
    mono = all(b > a for a, b in zip(Js, Js[1:]))
    if not mono:
        code = EXIT_GATE
    doc = {
        "config": embedded(args, "solve"),
        "profile": st.to_dict(),
        "profile_digest": st.digest(),
        "mesh": dom.describe(),
        "theta_u": th,
        "results": _jsonable(results),
        "j_monotone": mono,
    }
    write_json(out / "solve.json", doc)
    if len(nus) > 1:
        rows = ["nu,lambda,J"] + [f"{x['nu']!r},{x['lambda']!r},{x['energy']!r}" for x in results if "energy" in x]
        write_text(out / "j_curve.csv", "\n".join(rows) + "\n")
    return code


# --- verify and scan ---------------------------------------------------------------


def cmd_verify(args) -> int:
    from dataclasses import replace

    from .verification import QUICK, SUITES, Budget, run_suite

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    budget = replace(QUICK if args.quick else Budget(), workers=args.workers)
    rep = run_suite(args.suite, args.seed, budget)
    rep["config"] = embedded(args, "verify")
    out = out_dir(args)
    write_json(out / f"verify-{args.suite}.json", _jsonable(rep))
    for c in rep["criteria"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {args.suite}:{c['criterion']}")
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def cmd_scan(args) -> int:
    from .percolation import Probe, SoupConfig, nlf_scan, run_soups

    radii = parse_radii(args.radii)
    if 2 * max(radii) > args.N:
        raise UsageError("outer radius 2L exceeds the window radius")
    cfg = SoupConfig(d=args.d, N=args.N, u_max=args.u, n_soups=args.soups, seed=args.seed, guard=args.guard)
    batch = run_soups(cfg, [Probe((args.u,), (args.N,))], args.workers)
    scan = nlf_scan(batch, args.u, radii, probe=0)
    out = out_dir(args)
    write_text(out / "nlf.csv", scan.to_csv())
    fit = None if scan.fit is None else {"c0": scan.fit.c0, "gamma": scan.fit.gamma, "c3": scan.fit.c3, "L0": scan.fit.L0, "residual": scan.fit.residual}
    write_json(out / "scan.json", {"config": embedded(args, "scan"), "counts": scan.counts.tolist(), "fit": fit, "message": scan.fit_message})
    return EXIT_OK if fit is not None else EXIT_GATE


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="interlacements", description="Vacant-set percolation and the constrained energy problem.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        sp.add_argument("--config", help="replay the arguments embedded in an output JSON")
        sp.add_argument("--workers", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="theta curve and finite-cluster scan from coupled soups")
    s.add_argument("--d", type=int, default=3)
    s.add_argument("--N", type=int, default=32)
    s.add_argument("--L", type=int, default=16)
    s.add_argument("--levels", default="0:2:0.1")
    s.add_argument("--soups", type=int, default=10_000)
    s.add_argument("--guard", type=int, default=8)
    s.add_argument("--eq-samples", type=int, default=None)
    s.add_argument("--nlf-level", type=float, default=None)
    s.add_argument("--nlf-radii", default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="smoothed profile from a theta curve")
    f.add_argument("--curve")
    f.add_argument("--toy", help="closed-form base, linear:s or exp:c")
    f.add_argument("--u0", type=float, required=True)
    f.add_argument("--u1", type=float, required=True)
    f.add_argument("--u-star", type=float, required=True)
    f.add_argument("--name", default="profile.json")
    common(f, seed=False)
    f.set_defaults(func=cmd_fit)

    v = sub.add_parser("solve", help="constrained energy minimizer")
    v.add_argument("--profile")
    v.add_argument("--affine", help="THETA_U,KAPPA,U_STAR for the affine toy")
    v.add_argument("--u", type=float, required=True)
    v.add_argument("--nu", type=float)
    v.add_argument("--excess", type=float, help="target nu = theta(u) + excess")
    v.add_argument("--nu-grid")
    v.add_argument("--domain", choices=("ball", "box"), default="ball")
    v.add_argument("--d", type=int, default=3)
    v.add_argument("--radius", type=float, default=1.0)
    v.add_argument("--h", type=float, default=None)
    v.add_argument("--r-max", type=float, default=None)
    v.add_argument("--box-n", type=int, default=12)
    v.add_argument("--box-pad", type=int, default=3)
    v.add_argument("--tol", type=float, default=1e-10)
    v.add_argument("--omega", type=float, default=1.0)
    common(v, seed=False)
    v.set_defaults(func=cmd_solve)

    c = sub.add_parser("verify", help="run a verification suite")
    c.add_argument("suite")
    c.add_argument("--quick", action="store_true", help="small sample sizes (smoke run)")
    common(c)
    c.set_defaults(func=cmd_verify)

    n = sub.add_parser("scan", help="finite-cluster decay scan at one level")
    n.add_argument("--d", type=int, default=3)
    n.add_argument("--N", type=int, default=32)
    n.add_argument("--u", type=float, default=1.5)
    n.add_argument("--radii", default="1:16")
    n.add_argument("--soups", type=int, default=10_000)
    n.add_argument("--guard", type=int, default=8)
    common(n)
    n.set_defaults(func=cmd_scan)
    return p


def _replay(args, parser):
    with open(args.config, encoding="utf-8") as f:
        doc = json.load(f)
    cfg = doc.get("config", doc)
    if cfg.get("command") != args.command:
        raise UsageError(f"config was written by {cfg.get('command')!r}, not {args.command!r}")
    for k, val in cfg["args"].items():
        setattr(args, k, val)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _replay(args, parser)
        return args.func(args)
    except UsageError as e:
        print(f"interlacements: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as e:
        print(f"interlacements: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"interlacements: error: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
