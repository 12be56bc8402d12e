"""Command-line interface.

Subcommands ``check``, ``secondvar``, ``continue``, ``oracle``, ``plot`` and
``families``.  Exit codes: 0 when every check passes, 1 when a mathematical
check fails, 2 on usage, configuration or I/O errors.  The worker thread
count is read from ``DOUBLESWITCH_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys as _sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import DoubleSwitchError, InvalidArgument, UniquenessViolation

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _dump(path: Path, obj):
    from .verify import _jsonable

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config(args):
    if args.config and args.family:
        raise InvalidArgument("use either --config or --family, not both")
    if args.config:
        return load_config(args.config)
    if args.family:
        return load_config({"family": args.family})
    raise InvalidArgument("one of --config or --family is required")


def _say(args, msg):
    if not args.quiet:
        print(msg)


# -- subcommands -------------------------------------------------------------------

def cmd_check(args):
    from .verify import run_all_checks

    cfg = _config(args)
    sys, bounds, ext = cfg.fixture
    report = run_all_checks(sys, bounds, ext)
    out = Path(args.out) / "check_report.json"
    _dump(out, report.to_dict())
    for name, ok in report.verdicts().items():
        _say(args, f"{name:20s} {'PASS' if ok else 'FAIL'}")
    failed = [c.check for c in report.failed()]
    if failed:
        _say(args, "failed: " + ", ".join(failed))
    _say(args, f"report: {out}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_secondvar(args):
    from .secondvar import analyze

    cfg = _config(args)
    sys, bounds, ext = cfg.fixture
    nus = (1, 2) if args.nu == "both" else (int(args.nu),)
    res = analyze(sys, bounds, ext, nus=nus, tol_eig=cfg.tolerances["eig"])
    out = Path(args.out)
    _dump(out / "secondvar_report.json", res.to_dict())
    for label, group in (("V0", res.constrained), ("V", res.extended)):
        for nu, rep in group.items():
            _dump(out / f"form_{label}_nu{nu}.json", dict(rep.to_dict(), matrix=rep.matrix,
                                                             reduced_spectrum=rep.reduced_spectrum))
            _say(args, f"nu={nu} {label:2s} dim={rep.dim} min_eig={rep.min_eig:.6g} coercive={rep.coercive}")
    _say(args, f"rho={res.rho} hestenes_ok={res.hestenes_ok}")
    return EXIT_OK if res.coercive and res.hestenes_ok else EXIT_FAIL


def _r_path(cfg, args, param_dim):
    from .continuation import parse_r_path

    spec = args.r_path if args.r_path is not None else cfg.sweep["r_path"]
    if args.steps is not None:
        if not isinstance(spec, str):
            raise InvalidArgument("--steps needs a string r-path")
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise InvalidArgument(f"r-path must look like 'start:stop[:steps]', got {spec!r}")
        spec = f"{parts[0]}:{parts[1]}:{args.steps}"
    elif isinstance(spec, str) and len(spec.split(":")) == 2:
        spec = spec + ":20"
    return parse_r_path(spec, param_dim)


def _samples(n_records, k):
    return sorted(set(np.linspace(0, n_records - 1, min(k, n_records)).round().astype(int).tolist()))


def cmd_continue(args):
    from .continuation import export_sweep_csv, sweep, uniqueness_tube_check
    from .oracle import direct_min_time

    cfg = _config(args)
    sys, bounds, ext = cfg.fixture
    path = _r_path(cfg, args, sys.param_dim)
    res = sweep(sys, bounds, path, ext, predictor=cfg.sweep["predictor"], tol=cfg.tolerances["newton"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = res.to_dict()
    ok = res.complete and all(r.accepted and r.certificate.get("certified") for r in res.records)
    if res.records:
        export_sweep_csv(out / "sweep.csv", res.records)
    _say(args, f"records: {len(res.records)}  complete: {res.complete}")
    for rec in res.records:
        _say(args, f"r={rec.r.tolist()} nu={rec.nu} tau=({rec.tau[0]:.10f}, {rec.tau[1]:.10f}) "
                   f"T={rec.T:.10f} res={rec.residual_norm:.2e} certified={rec.certificate.get('certified')}")
    if res.failure:
        _say(args, f"sweep failure: {res.failure}")
    if args.tube_check and res.records:
        tube = []
        for k in _samples(len(res.records), cfg.tube["samples"]):
            rec = res.records[k]
            try:
                t = uniqueness_tube_check(sys, bounds, rec, ext, cfg.tube["delta"], cfg.tube["n_starts"],
                                          seed=cfg.seed + k)
            except UniquenessViolation as exc:
                t = {"verdict": False, "error": str(exc)}
            t["r"] = rec.r
            tube.append(t)
            ok = ok and t["verdict"]
            _say(args, f"tube r={rec.r.tolist()} verdict={t['verdict']}")
        report["tube"] = tube
    if args.oracle_validate and res.records:
        orc = []
        res_grid = cfg.oracle["resolution"]
        for k in _samples(len(res.records), cfg.oracle["samples"]):
            rec = res.records[k]
            entry = {"r": rec.r, "T": rec.T}
            try:
                o = direct_min_time(sys, bounds, rec.r, (rec.tau[0], rec.tau[1], rec.T),
                                    half_width=cfg.oracle["half_width"], T_half_width=cfg.oracle["T_half_width"],
                                    resolution=res_grid, coarse=cfg.oracle["coarse"],
                                    x0=rec.unknowns.x if bounds.initial.kind != "point" else None)
                entry.update(o.to_dict())
                entry["difference"] = abs(o.best_T - rec.T)
                entry["ok"] = entry["difference"] <= 2.0 * res_grid
            except DoubleSwitchError as exc:
                entry.update(ok=False, error=str(exc))
            ok = ok and entry["ok"]
            orc.append(entry)
            _say(args, f"oracle r={rec.r.tolist()} ok={entry['ok']} diff={entry.get('difference')}")
        report["oracle"] = orc
    report["passed"] = bool(ok)
    _dump(out / "sweep.json", report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oracle(args):
    from .oracle import direct_min_time

    cfg = _config(args)
    sys, bounds, ext = cfg.fixture
    r = np.full(sys.param_dim, 0.0) if args.r is None else np.array(args.r, float)
    center = (ext.tau1, ext.tau2, ext.T)
    o = direct_min_time(sys, bounds, r, center, half_width=cfg.oracle["half_width"],
                        T_half_width=cfg.oracle["T_half_width"],
                        resolution=args.resolution or cfg.oracle["resolution"], coarse=cfg.oracle["coarse"],
                        x0=ext.ell0.x if bounds.initial.kind != "point" else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "oracle.json", dict(o.to_dict(), r=r))
    with open(out / "oracle.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"r{i + 1}" for i in range(r.size)] + ["best_T", "s1", "s2", "endpoint_error", "resolution"])
        w.writerow([f"{v:.17g}" for v in (*r, o.best_T, *o.best_switches, o.endpoint_error, o.grid_resolution)])
    _say(args, f"best_T={o.best_T:.12g} switches={o.best_switches} endpoint_error={o.endpoint_error:.2e}")
    return EXIT_OK


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.sweep)
    if not src.is_file():
        raise InvalidArgument(f"no such file: {src}")
    with open(src, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidArgument(f"no records in {src}")
    try:
        r = np.array([float(row["r1"]) for row in rows])
        tau1 = np.array([float(row["tau1"]) for row in rows])
        tau2 = np.array([float(row["tau2"]) for row in rows])
        T = np.array([float(row["T"]) for row in rows])
    except (KeyError, ValueError) as exc:
        raise InvalidArgument(f"malformed sweep file {src}: {exc}") from None
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].plot(r, tau1, "o-", label=r"$\tau_1$")
    ax[0].plot(r, tau2, "s-", label=r"$\tau_2$")
    ax[0].plot(r, T, "^-", label="T")
    ax[0].set_xlabel("r")
    ax[0].legend()
    ax[1].plot(r, tau2 - tau1, "o-")
    ax[1].axhline(0.0, color="0.6", lw=0.8)
    ax[1].set_xlabel("r")
    ax[1].set_ylabel(r"$\tau_2 - \tau_1$")
    fig.tight_layout()
    out = Path(args.out) if args.out.endswith(".png") else Path(args.out) / "sweep.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    _say(args, f"plot: {out}")
    return EXIT_OK


def cmd_families(args):
    from .families import family_ids, make_nominal

    for fid in family_ids():
        fx = make_nominal(fid)
        bad = [k for k, v in fx.expected.items() if not v]
        _say(args, f"{fid:22s} n={fx.ext.n}  expected failures: {', '.join(bad) or 'none'}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="doubleswitch",
                                     description="Verify and continue bang-bang extremals with a double switch.")
    sub = parser.add_subparsers(dest="command", required=True)

    def quiet(p):
        p.add_argument("-q", "--quiet", action="store_true", help="suppress console output")

    def problem(p):
        quiet(p)
        p.add_argument("--config", help="JSON problem configuration")
        p.add_argument("--family", help="built-in family id (shortcut for a minimal configuration)")
        p.add_argument("--out", default=".", help="output directory (default: current)")

    p = sub.add_parser("check", help="run the assumption battery on the nominal extremal")
    problem(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("secondvar", help="second-variation coercivity")
    problem(p)
    p.add_argument("--nu", choices=["1", "2", "both"], default="both")
    p.set_defaults(func=cmd_secondvar)

    p = sub.add_parser("continue", help="continue the extremal in the parameter r")
    problem(p)
    p.add_argument("--r-path", dest="r_path", help="'start:stop:steps' (first parameter component)")
    p.add_argument("--steps", type=int, help="number of steps (overrides the count in --r-path)")
    p.add_argument("--tube-check", dest="tube_check", action="store_true", help="run the uniqueness-tube probe")
    p.add_argument("--oracle-validate", dest="oracle_validate", action="store_true",
                   help="compare sampled records with the brute-force oracle")
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("oracle", help="brute-force minimum time near the nominal")
    problem(p)
    p.add_argument("--r", type=float, nargs="+", help="parameter value (default 0)")
    p.add_argument("--resolution", type=float, help="final-time grid step")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("plot", help="plot switching times and gap from a sweep CSV")
    quiet(p)
    p.add_argument("sweep", help="sweep.csv written by 'continue'")
    p.add_argument("--out", default=".", help="output directory or .png path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("families", help="list built-in families")
    quiet(p)
    p.set_defaults(func=cmd_families)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidArgument, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except DoubleSwitchError as exc:
        print(f"failure: {exc}", file=_sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    _sys.exit(main())
