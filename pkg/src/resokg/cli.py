"""Command-line entry point.

Scenario files are INI text (``configparser``)::

    [scenario]
    name = small-em          ; output file prefix
    system = em              ; kg | em | none

    [params]
    b = 1.0, 2.0             ; masses (kg / none)
    c = 1.0, 0.5             ; speeds (kg / none); for em: light speed
    A = 4
    D = 10
    T = 1                    ; em only

    [grid]
    n = 32
    L = 8*pi                 ; numbers, pi, + - * / and parentheses

    [data]
    kind = noise             ; bump | noise (kg)
    amplitude = 1e-3
    width = 2
    kmin = 0.2
    kmax = 2.0

    [run]
    t_end = 10
    dt = 0.1                 ; omitted: stability default
    N = 3
    record_every = 1
    nonlinear = true
    coupling = random        ; random | zeros (kg); nonlinear = false implies zeros
    coupling_scale = 1.0
    diagnostics = energy, sobolev, zprime, constraints, wsup
    snapshots = true

    [verify]
    suites = nonresonance, spheres, psi, almost_resonant, control, pinning
    samples = 100000
    pinning_samples = 2000
    pinning_delta = 2**-20

    [output]
    dir = out

Exit codes: 0 success or all checks passed, 1 a check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import datetime
import math
import operator
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .fields import Grid, GridError, read_snapshot, set_threads, write_snapshot
from .simulate import DomainError, InsufficientSpanError, IntegrationError
from .params import ParameterError, ParameterTable, check_nonresonance

SYSTEMS = ("kg", "em", "none")
SUITES = ("nonresonance", "spheres", "psi", "almost_resonant", "control", "pinning")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    """Malformed or inconsistent scenario file."""


# -- scenario ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def parse_number(text: str) -> float:
    """Arithmetic on numeric literals and ``pi``."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        raise ConfigError(f"cannot evaluate {text!r}")
    try:
        return ev(ast.parse(str(text).strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError, OverflowError) as exc:
        raise ConfigError(f"cannot evaluate {text!r}: {exc}") from None


def _floats(text: str) -> tuple[float, ...]:
    return tuple(parse_number(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass
class Scenario:
    name: str = "scenario"
    system: str = "none"
    table: ParameterTable | None = None
    T: float = 1.0
    c_light: float = 1.0
    grid: Grid | None = None
    data: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    suites: tuple[str, ...] = SUITES
    verify: dict = field(default_factory=dict)
    out: Path = Path("out")
    seed: int = 0


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    sc = Scenario()
    get = lambda sec, key, default=None: cp.get(sec, key, fallback=default)
    try:
        sc.name = get("scenario", "name", path.stem)
        sc.system = get("scenario", "system", "none").strip().lower()
        if sc.system not in SYSTEMS:
            raise ConfigError(f"unknown system {sc.system!r}; choose from {', '.join(SYSTEMS)}")
        sc.seed = int(get("scenario", "seed", "0"))
        if cp.has_section("params"):
            p = cp["params"]
            if sc.system == "em":
                sc.T = parse_number(p.get("T", "1"))
                sc.c_light = parse_number(p.get("c", "1"))
            elif "b" in p or "c" in p:
                if "b" not in p or "c" not in p:
                    raise ConfigError("[params] needs both b and c")
                sc.table = ParameterTable(_floats(p["b"]), _floats(p["c"]),
                                          A=parse_number(p.get("A", "10")),
                                          D=parse_number(p.get("D", "10")))
        if cp.has_section("grid"):
            g = cp["grid"]
            sc.grid = Grid(int(g.get("n", "32")), parse_number(g.get("L", "2*pi")))
        if cp.has_section("data"):
            d = cp["data"]
            sc.data = {"kind": d.get("kind", "bump")}
            for key, dflt in (("amplitude", "1e-3"), ("width", "2"), ("kmin", "0.2"), ("kmax", "2")):
                sc.data[key] = parse_number(d.get(key, dflt))
        r = cp["run"] if cp.has_section("run") else {}
        sc.run = {
            "t_end": parse_number(r.get("t_end", "1")),
            "dt": parse_number(r["dt"]) if "dt" in r else None,
            "N": int(r.get("N", "3" if sc.system == "kg" else "2")),
            "record_every": int(r.get("record_every", "1")),
            "nonlinear": _bool(r.get("nonlinear", "true")),
            "coupling": r.get("coupling", "random").strip(),
            "coupling_scale": parse_number(r.get("coupling_scale", "1")),
            "snapshots": _bool(r.get("snapshots", "true")),
        }
        if "diagnostics" in r:
            sc.run["diagnostics"] = _names(r["diagnostics"])
        v = cp["verify"] if cp.has_section("verify") else {}
        if "suites" in v:
            sc.suites = _names(v["suites"])
        unknown = [s for s in sc.suites if s not in SUITES]
        if unknown:
            raise ConfigError(f"unknown verification suites: {', '.join(unknown)}")
        sc.verify = {
            "samples": int(parse_number(v.get("samples", "100000"))),
            "pinning_samples": int(parse_number(v.get("pinning_samples", "2000"))),
            "pinning_delta": parse_number(v.get("pinning_delta", "2**-20")),
        }
        sc.out = Path(get("output", "dir", "out"))
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    if sc.system == "kg" and (sc.table is None or sc.grid is None):
        raise ConfigError("system kg needs [params] b, c and a [grid] section")
    if sc.system == "em" and sc.grid is None:
        raise ConfigError("system em needs a [grid] section")
    return sc


# -- output -----------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path, header, rows, command: str) -> Path:
    """CSV with a timestamp comment line, a header row and 17-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_stamp(command)}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _stamp(command: str) -> str:
    now = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return f"resokg {__version__} {command} {now}"


def _need_table(sc: Scenario) -> ParameterTable:
    if sc.table is None:
        raise ConfigError("this command needs [params] b and c")
    return sc.table


# -- commands -----------------------------------------------------------------------------

def cmd_check_params(sc: Scenario) -> int:
    table = _need_table(sc)
    rep = check_nonresonance(table)
    path = write_csv(sc.out / f"{sc.name}_conditions.csv", ("condition", "indices", "value"),
                     rep.rows(), "check-params")
    for v in rep.violations:
        print(f"violation {v.condition} at {v.indices}: {v.value:.6g}")
    print(f"{'PASS' if rep.passed else 'FAIL'} non-resonance conditions ({path})")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_resonances(sc: Scenario) -> int:
    from .resonance import ResonanceSphere, sphere_table_report

    table = _need_table(sc)
    cond, spheres, skipped, bad = sphere_table_report(table)
    path = write_csv(sc.out / f"{sc.name}_spheres.csv", ResonanceSphere.CSV_HEADER,
                     (sp.row() for sp in spheres), "resonances")
    write_csv(sc.out / f"{sc.name}_skipped.csv", ("sigma", "mu", "nu", "reason"),
              ([s, str(m), str(n), "curve undefined"] for s, m, n in skipped), "resonances")
    for s, m, n in skipped:
        print(f"skipped ({s}; {m}, {n}): curve undefined")
    print(f"{len(spheres)} resonant spheres, {len(bad)} degenerate ({path})")
    return EXIT_OK if not bad else EXIT_FAIL


def _kg_system(sc: Scenario, rng):
    from .simulate import KGSystemSpec

    if sc.run["coupling"] == "zeros" or not sc.run["nonlinear"]:
        return KGSystemSpec.zeros(sc.table)
    if sc.run["coupling"] != "random":
        raise ConfigError(f"unknown coupling {sc.run['coupling']!r}")
    return KGSystemSpec.random(sc.table, rng, sc.run["coupling_scale"])


def cmd_simulate(sc: Scenario) -> int:
    from . import simulate as sim

    if sc.system == "none":
        raise ConfigError("simulate needs system = kg or em")
    rng = np.random.default_rng(sc.seed)
    run = sc.run
    diag = run.get("diagnostics", sim.ALL_DIAGNOSTICS)
    data = {"amplitude": 1e-3, "kind": "bump", "width": 2.0, "kmin": 0.2, "kmax": 2.0, **sc.data}
    if sc.system == "kg":
        spec = _kg_system(sc, rng)
        init = sim.kg_initial_data(sc.table, sc.grid, rng, data["amplitude"], data["kind"],
                                   data["width"], data["kmin"], data["kmax"])
        report = sim.kg_run(spec, init, run["t_end"], run["dt"], run["N"], run["record_every"],
                            diag, linear=not run["nonlinear"])
        fields = {f"u{s + 1}": report.final.u[s] for s in range(sc.table.d)}
        fields.update({f"udot{s + 1}": report.final.udot[s] for s in range(sc.table.d)})
    else:
        init = sim.em_initial_data(sc.grid, rng, data["amplitude"], data["kmin"], data["kmax"],
                                   sc.T, sc.c_light)
        report = sim.em_run(init, run["t_end"], run["dt"], run["N"], run["record_every"],
                            diag, nonlinear=run["nonlinear"])
        st = report.final
        fields = {"n": st.n}
        for name in ("v", "E", "B"):
            fields.update({f"{name}{j + 1}": getattr(st, name)[j] for j in range(3)})
    sc.out.mkdir(parents=True, exist_ok=True)
    path = sc.out / f"{sc.name}_run.csv"
    report.to_csv(path, _stamp("simulate"))
    if run["snapshots"]:
        from .fields import SpectralField

        for key, arr in fields.items():
            write_snapshot(sc.out / f"{sc.name}_{key}.rkg", SpectralField(sc.grid, arr))
    print(f"{len(report.rows)} records to t={report.t[-1]:.6g} "
          f"(dt={report.meta.get('dt', float('nan')):.6g}) ({path})")
    return EXIT_OK


def cmd_znorm(snapshot, out: Path, thresholds: int = 8, j_max=None) -> int:
    from .dyadic import NormProfile, frequency_range, norm_profiles, spatial_range

    f = read_snapshot(snapshot)
    profiles = norm_profiles(f, j_max=j_max, thresholds=thresholds)
    if profiles:
        rows = [p.row() for p in profiles]
    else:
        k0, k1 = frequency_range(f.grid)
        jm = spatial_range(f.grid) if j_max is None else j_max
        rows = [[k, j] + [0.0] * 6 for k in range(k0, k1 + 1) for j in range(max(-k, 0), jm + 1)]
    z = max((r[4] for r in rows), default=0.0)
    path = write_csv(out / f"{Path(snapshot).stem}_znorm.csv", NormProfile.CSV_HEADER, rows, "znorm")
    print(f"Z norm {z:.17g} over {len(rows)} atoms ({path})")
    return EXIT_OK


def _verify_reports(sc: Scenario):
    from . import resonance as res
    from .resonance import LemmaReport

    table = _need_table(sc)
    v = sc.verify
    reports = []
    if "nonresonance" in sc.suites:
        cond = check_nonresonance(table)
        worst = min((viol.value for viol in cond.violations), default=math.inf)
        reports.append(LemmaReport("nonresonance", 1, worst, cond.passed, len(cond.violations)))
    spheres = None
    if "spheres" in sc.suites or "control" in sc.suites:
        _, spheres, _, bad = res.sphere_table_report(table)
    if "spheres" in sc.suites:
        worst = min((min(sp.hessian_margin, sp.dr_ds) for sp in spheres), default=math.inf)
        reports.append(LemmaReport("sphere-nondegenerate", len(spheres), worst, not bad, len(bad)))
    if "psi" in sc.suites:
        agg = LemmaReport("psi-monotone", 0, math.inf, True)
        for sigma, mu, nu in res.interaction_triples(table):
            if res.classify(table, mu, nu).case_tag == res.UNDEFINED:
                continue
            r = res.psi_monotonicity(table, sigma, mu, nu)
            agg.samples += r.samples
            agg.worst_margin = min(agg.worst_margin, r.worst_margin)
            agg.passed &= r.passed
            agg.hits += int(not r.passed)
        reports.append(agg)
    if "almost_resonant" in sc.suites:
        # (k, k1, k2, delta1, delta2) meeting the two sets of emptiness hypotheses
        small_k = (-8, 0, 0, 2.0 ** -8, 2.0 ** -8)
        large_k = (0, 10, 10, 2.0 ** -60, 2.0 ** -30)
        for tag, args in (("almost-resonant-low", small_k), ("almost-resonant-high", large_k)):
            agg = LemmaReport(tag, 0, math.inf, True)
            for sigma, mu, nu in res.interaction_triples(table):
                r = res.verify_almost_resonant_empty(table, sigma, mu, nu, *args,
                                                     samples=v["samples"], seed=sc.seed)
                agg.samples += r.samples
                agg.worst_margin = min(agg.worst_margin, r.worst_margin)
                agg.hits += r.hits
                agg.passed &= r.passed
            reports.append(agg)
    if "control" in sc.suites and spheres:
        # a seeded point on a true resonance must be detected
        sp = spheres[0]
        e = np.array([[0.6, 0.0, 0.8]])
        k = round(math.log2(sp.r_xi))
        k2 = round(math.log2(abs(sp.r_eta)))
        gap = abs(sp.r_xi - sp.r_eta)
        k1 = round(math.log2(gap)) if gap > 0 else k
        r = res.verify_almost_resonant_empty(table, sp.sigma, sp.mu, sp.nu, k, k1, k2, 1.0, 1.0,
                                             samples=1000, seed=sc.seed,
                                             seeds=(sp.r_xi * e, sp.r_eta * e))
        reports.append(LemmaReport("almost-resonant-control", r.samples, r.worst_margin,
                                   r.hits > 0, r.hits))
    if "pinning" in sc.suites:
        agg = LemmaReport("eta-pinning", 0, 0.0, True)
        seen = set()
        for _, mu, nu in res.interaction_triples(table):
            if (mu, nu) in seen or res.classify(table, mu, nu).case_tag == res.UNDEFINED:
                continue
            seen.add((mu, nu))
            r = res.verify_eta_pinning(table, 1, mu, nu, 0, 0, 0, v["pinning_delta"],
                                       samples=v["pinning_samples"], seed=sc.seed)
            agg.samples += r.samples
            agg.worst_margin = max(agg.worst_margin, r.worst_margin)
            agg.passed &= r.passed
            agg.hits += int(not r.passed)
        reports.append(agg)
    return reports


def cmd_verify(sc: Scenario) -> int:
    from .resonance import LemmaReport

    reports = _verify_reports(sc)
    path = write_csv(sc.out / f"{sc.name}_verify.csv", LemmaReport.CSV_HEADER,
                     (r.row() for r in reports), "verify")
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.lemma_id}: samples={r.samples} "
              f"worst={r.worst_margin:.6g} hits={r.hits}")
    ok = all(r.passed for r in reports)
    print(f"{'all suites passed' if ok else 'some suites failed'} ({path})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_decay(run_csv, out: Path, column: str = "linf", window=None, min_decades: float = 1.0,
              expect=None, tol: float = 0.15) -> int:
    from .simulate import RunReport, decay_report

    run = RunReport.from_csv(run_csv)
    if column not in run.columns:
        raise ConfigError(f"{run_csv}: no column {column!r}")
    fit = decay_report(run, column, window, min_decades)
    path = write_csv(out / f"{Path(run_csv).stem}_decay.csv",
                     ("column", "slope", "intercept", "stderr", "ci_low", "ci_high", "points",
                      "t_low", "t_high"),
                     [[column, fit.slope, fit.intercept, fit.stderr, fit.ci_low, fit.ci_high,
                       fit.points, *fit.window]], "decay")
    print(f"decay exponent {fit.slope:.6g} [{fit.ci_low:.6g}, {fit.ci_high:.6g}] ({path})")
    if expect is not None and abs(fit.slope - expect) > tol:
        print(f"FAIL exponent differs from {expect} by more than {tol}")
        return EXIT_FAIL
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, default):
    p.add_argument("--config", metavar="PATH", default=default, help="scenario INI file")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("--threads", metavar="N", type=int, default=default,
                   help="transform threads (fallback: RESOKG_THREADS)")
    p.add_argument("--seed", metavar="N", type=int, default=default, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resokg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"resokg {__version__}")
    _global_flags(parser, None)
    # flags may also follow the subcommand; SUPPRESS keeps them from clobbering
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check-params", parents=[common], help="check the non-resonance conditions")
    sub.add_parser("resonances", parents=[common], help="tabulate resonant spheres")
    sub.add_parser("simulate", parents=[common], help="run a kg or em scenario")
    z = sub.add_parser("znorm", parents=[common], help="Z norm profile of a snapshot")
    z.add_argument("snapshot")
    z.add_argument("--thresholds", type=int, default=8)
    z.add_argument("--j-max", type=int, default=None)
    sub.add_parser("verify", parents=[common], help="run the lemma verification suites")
    d = sub.add_parser("decay", parents=[common], help="fit a decay exponent to a run CSV")
    d.add_argument("run_csv")
    d.add_argument("--column", default="linf")
    d.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"), default=None)
    d.add_argument("--min-decades", type=float, default=1.0)
    d.add_argument("--expect", type=float, default=None, help="expected exponent")
    d.add_argument("--tol", type=float, default=0.15)
    return parser


def _scenario(args) -> Scenario:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config PATH")
    sc = load_scenario(args.config)
    if args.out is not None:
        sc.out = Path(args.out)
    if args.seed is not None:
        sc.seed = args.seed
    return sc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    set_threads(args.threads)
    out = Path(args.out) if args.out is not None else Path("out")
    try:
        if args.command == "znorm":
            return cmd_znorm(args.snapshot, out, args.thresholds, args.j_max)
        if args.command == "decay":
            return cmd_decay(args.run_csv, out, args.column, args.window, args.min_decades,
                             args.expect, args.tol)
        sc = _scenario(args)
        return {"check-params": cmd_check_params, "resonances": cmd_resonances,
                "simulate": cmd_simulate, "verify": cmd_verify}[args.command](sc)
    except (FileNotFoundError, ConfigError, ParameterError, GridError) as exc:
        print(f"resokg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IntegrationError, DomainError, InsufficientSpanError) as exc:
        print(f"resokg: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"resokg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
