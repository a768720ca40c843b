"""Command-line front end.

Every subcommand reads one YAML/JSON document, writes its results into
``--out`` and a ``manifest.json`` next to them.  Exit status is 0 on
success, 1 when a checked property fails and 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, SpectrumError
from .galerkin import SCHEMES, SdeRunConfig, energy_inequality_check, simulate_ensemble
from .io import (config_hash, env_threads, load_config, parse_field, parse_spectrum, require, write_csv,
                 write_json, write_manifest)
from .moments import (build_q_matrix, integrate_moments, moments_vs_montecarlo, stationarity_check,
                      write_comparison_csv, write_q_triplets)
from .noise import (SpectrumSequence, corrector_constant, epsilon_for_nu, validate_spectrum)
from .one_dim import RealSpectralField1D, Spectrum1D, run_friction_limit
from .parabolic import picard_mild_check, solve_parabolic
from .scaling import TestFunctionSet, run_scaling_experiment

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Ctx:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.quiet = args.quiet
        self.threads = args.threads if args.threads is not None else env_threads()
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        try:
            self.seed = int(seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"expected an integer, got {seed!r}", "seed") from exc
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must fit in an unsigned 64-bit integer", "seed")

    def say(self, msg: str):
        if not self.quiet:
            print(msg)


def _mode(k) -> str:
    return ";".join(str(int(c)) for c in k)


def _epsilon(cfg, spectrum) -> float:
    """Noise amplitude from an explicit ``epsilon`` or from ``nu``."""
    if "epsilon" in cfg and "nu" in cfg:
        raise ConfigError("give either epsilon or nu, not both", "epsilon")
    if "epsilon" in cfg:
        return require(cfg, "epsilon", float)
    nu = require(cfg, "nu", float)
    return epsilon_for_nu(spectrum, nu)


def _drift(cfg, dim):
    if cfg.get("drift") is None:
        return None
    return parse_field(cfg["drift"], dim, "drift", vector=True)


def _sde_config(cfg, ctx, spectrum, **over) -> SdeRunConfig:
    scheme = cfg.get("scheme", "euler_maruyama")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}", "scheme")
    kw = dict(spectrum=spectrum, cutoff=require(cfg, "cutoff", float), epsilon=_epsilon(cfg, spectrum),
              T=require(cfg, "T", float), dt=require(cfg, "dt", float), drift=_drift(cfg, spectrum.dim),
              scheme=scheme, seed=ctx.seed, output_every=int(cfg.get("output_every", 1)),
              div_free=bool(cfg.get("div_free", False)))
    kw.update(over)
    return SdeRunConfig(**kw)


# subcommands ---------------------------------------------------------------


def cmd_validate_spectrum(ctx: _Ctx) -> int:
    s = parse_spectrum(ctx.cfg.get("spectrum", ctx.cfg), "")
    rep = validate_spectrum(s)
    write_json(ctx.out / "validation.json", rep.as_dict())
    write_manifest(ctx.out, "validate-spectrum", ctx.cfg, None)
    ctx.say(f"support {len(s)} modes, sum theta^2 = {rep.sum_sq:.17g}")
    for f in rep.failures:
        print(f"FAIL {f}", file=sys.stderr)
    ctx.say("spectrum valid" if rep.passed else "spectrum INVALID")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_corrector(ctx: _Ctx) -> int:
    s = parse_spectrum(ctx.cfg.get("spectrum", ctx.cfg), "")
    rep = validate_spectrum(s)
    if not rep.passed:
        for f in rep.failures:
            print(f"FAIL {f}", file=sys.stderr)
        return EXIT_FAIL
    c = corrector_constant(s)
    nus = [1.0] + ([float(ctx.cfg["nu"])] if "nu" in ctx.cfg and float(ctx.cfg["nu"]) != 1.0 else [])
    result = {"c": c, "sum_sq": s.sum_sq, "ratio": s.ratio,
              "epsilon": {f"{nu:g}": epsilon_for_nu(s, nu) for nu in nus}}
    write_json(ctx.out / "corrector.json", result)
    write_manifest(ctx.out, "corrector", ctx.cfg, None)
    ctx.say(f"c = {c:.17g}")
    for nu in nus:
        ctx.say(f"epsilon(nu={nu:g}) = {epsilon_for_nu(s, nu):.17g}")
    return EXIT_OK


def cmd_simulate(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    s = parse_spectrum(require(cfg, "spectrum"))
    config = _sde_config(cfg, ctx, s)
    u0 = parse_field(require(cfg, "u0"), s.dim, "u0")
    M = require(cfg, "paths", int)
    ens = simulate_ensemble(config, u0, M, threads=ctx.threads)
    rows = []
    for p in range(len(ens)):
        for ti, t in enumerate(ens.times):
            for k, v in zip(ens.lattice.modes, ens.coeffs[p, ti]):
                if v != 0:
                    rows.append((int(ens.path_ids[p]), float(t), _mode(k), float(v.real), float(v.imag)))
    write_csv(ctx.out / "trajectories.csv", ["path", "t", "k", "re", "im"], rows)
    energy = ens.energy
    write_csv(ctx.out / "energy.csv", ["path", "t", "energy"],
              [(int(ens.path_ids[p]), float(t), float(energy[p, i]))
               for p in range(len(ens)) for i, t in enumerate(ens.times)])
    reports = [energy_inequality_check(ens.path(p)) for p in range(len(ens))]
    ok = all(r.passed for r in reports)
    write_json(ctx.out / "energy_check.json",
               {"passed": ok, "worst_slack": max(r.slack for r in reports), "tol": reports[0].tol})
    write_manifest(ctx.out, "simulate", cfg, ctx.seed, ens.path_ids,
                   {"epsilon": config.epsilon, "nu": config.nu, "n_steps": config.n_steps})
    ctx.say(f"{M} paths, {config.n_steps} steps, eps = {config.epsilon:.6g}, nu = {config.nu:.6g}")
    ctx.say(f"energy inequality {'holds' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_moments(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    s = parse_spectrum(require(cfg, "spectrum"))
    eps = _epsilon(cfg, s)
    K = require(cfg, "K", float)
    q = build_q_matrix(s, eps, K)
    T, dt = require(cfg, "T", float), require(cfg, "dt", float)
    times = cfg.get("times")
    if "x0" in cfg:
        x0 = {tuple(int(c) for c in require(e, "k", list, f"x0[{i}].")): require(e, "value", float, f"x0[{i}].")
              for i, e in enumerate(cfg["x0"])}
    else:
        u0 = parse_field(require(cfg, "u0"), s.dim, "u0")
        x0 = {tuple(k): abs(complex(v[0])) ** 2 for k, v in zip(u0.modes.tolist(), u0.values) if any(k)}
    traj = integrate_moments(q, x0, T, dt, times)
    write_q_triplets(q, ctx.out / "q_matrix.csv")
    write_csv(ctx.out / "moments.csv", ["k", "t", "x"],
              [(_mode(k), float(t), float(traj.x[i, j]))
               for i, t in enumerate(traj.times) for j, k in enumerate(q.modes)])
    write_csv(ctx.out / "totals.csv", ["t", "total", "outflux"],
              [(float(t), float(a), float(b)) for t, a, b in zip(traj.times, traj.total, traj.outflux)])
    stat = stationarity_check(q)
    inner = q.interior_mask
    row_err = float(np.abs(q.row_sums()[inner]).max(initial=0.0))
    col_err = float(np.abs(q.col_sums()[inner]).max(initial=0.0))
    offdiag_ok = bool((q.q - np.diag(np.diag(q.q)) >= 0).all())
    checks = {"offdiag_nonnegative": offdiag_ok, "interior_row_sum_max": row_err,
              "interior_col_sum_max": col_err, "stationarity": stat.as_dict()}
    write_json(ctx.out / "q_checks.json", checks)
    write_manifest(ctx.out, "moments", cfg, None, extra={"epsilon": eps})
    ok = offdiag_ok and row_err < 1e-10 and col_err < 1e-10
    ctx.say(f"{len(q)} modes, {int(inner.sum())} interior; row/col sum residuals {row_err:.2e}/{col_err:.2e}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_compare_moments(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    s = parse_spectrum(require(cfg, "spectrum"))
    config = _sde_config(cfg, ctx, s)
    u0 = parse_field(require(cfg, "u0"), s.dim, "u0")
    M = require(cfg, "paths", int)
    z_max = float(cfg.get("z_max", 4.0))
    cmp = moments_vs_montecarlo(config, u0, M, cfg.get("checkpoints"), threads=ctx.threads)
    write_comparison_csv(cmp, ctx.out / "comparison.csv")
    worst = cmp.max_abs_z()
    write_json(ctx.out / "comparison_summary.json",
               {"max_abs_z_interior": worst, "z_max": z_max, "passed": worst <= z_max,
                "total_energy_mc": cmp.total_energy_mc, "total_energy_stderr": cmp.total_energy_stderr})
    write_manifest(ctx.out, "compare-moments", cfg, ctx.seed, np.arange(M))
    ctx.say(f"max interior |z| = {worst:.3f} (limit {z_max:g})")
    return EXIT_OK if worst <= z_max else EXIT_FAIL


def cmd_parabolic(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    dim = require(cfg, "dim", int)
    u0 = parse_field(require(cfg, "u0"), dim, "u0")
    b = _drift(cfg, dim)
    nu, T, dt = require(cfg, "nu", float), require(cfg, "T", float), require(cfg, "dt", float)
    N = float(cfg.get("N", u0.radius()))
    traj = solve_parabolic(u0, b, nu, T, dt, N, cfg.get("output_times"))
    write_csv(ctx.out / "solution.csv", ["t", "k", "re", "im"],
              [(float(t), _mode(k), float(v.real), float(v.imag))
               for i, t in enumerate(traj.times) for k, v in zip(traj.lattice.modes, traj.coeffs[i])])
    ok = True
    extra = {}
    if cfg.get("picard"):
        pc = cfg["picard"]
        rep = picard_mild_check(u0, b, nu, require(pc, "T", float, "picard."), require(pc, "dt", float, "picard."),
                                N, int(pc.get("iterations", 30)))
        tol = float(pc.get("tol", 1e-6))
        ok = rep.distance_to_solver <= tol
        extra = {"picard": rep.as_dict() | {"tol": tol, "passed": ok}}
        write_json(ctx.out / "picard.json", extra["picard"])
        ctx.say(f"picard: {len(rep.iterate_distances)} iterations, distance to solver "
                f"{rep.distance_to_solver:.3e}")
    write_manifest(ctx.out, "parabolic", cfg, None)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_scaling(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    dim = require(cfg, "dim", int)
    nu = require(cfg, "nu", float)
    seq = SpectrumSequence.from_family(require(cfg, "family", str), require(cfg, "Ns", list), dim, nu,
                                       cfg.get("params"))
    u0 = parse_field(require(cfg, "u0"), dim, "u0")
    tests = TestFunctionSet.default(dim, float(cfg.get("test_radius", 2.0)))
    table = run_scaling_experiment(seq, _drift(cfg, dim), u0, nu, require(cfg, "T", float),
                                   require(cfg, "paths", int), tests, n_out=int(cfg.get("n_out", 10)),
                                   cfl=float(cfg.get("cfl", 0.25)), dt=cfg.get("dt"),
                                   scheme=cfg.get("scheme", "euler_maruyama"), seed=ctx.seed,
                                   threads=ctx.threads)
    table.write_csv(ctx.out / "convergence.csv")
    table.write_summary(ctx.out / "summary.json")
    table.write_long(ctx.out / "pairings_long.dat")
    write_manifest(ctx.out, "scaling", cfg, ctx.seed, np.arange(require(cfg, "paths", int)))
    ok = all(r["passed"] for r in table.summary["rules"].values())
    for name, r in table.summary["rules"].items():
        ctx.say(f"{'PASS' if r['passed'] else 'FAIL'} {name}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oned(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    nu = require(cfg, "nu", float)
    Ns = require(cfg, "Ns", list)
    value = float(cfg.get("lambda", 1.0))
    seq = [(int(N), Spectrum1D.shell(int(N), value)) for N in Ns]
    raw = require(cfg, "u0")
    if not isinstance(raw, dict):
        raise ConfigError("must map mode index to amplitude", "u0")
    u0 = RealSpectralField1D.from_dict({int(k): float(v) for k, v in raw.items()})
    table = run_friction_limit(seq, nu, u0, require(cfg, "T", float), require(cfg, "dt", float),
                               require(cfg, "paths", int), n_out=int(cfg.get("n_out", 10)),
                               scheme=cfg.get("scheme", "euler_maruyama"), seed=ctx.seed,
                               threads=ctx.threads)
    table.write_csv(ctx.out / "convergence.csv")
    table.write_summary(ctx.out / "summary.json")
    table.write_long(ctx.out / "pairings_long.dat")
    write_manifest(ctx.out, "oned", cfg, ctx.seed, np.arange(require(cfg, "paths", int)))
    ok = all(r["passed"] for r in table.summary["rules"].values())
    for name, r in table.summary["rules"].items():
        ctx.say(f"{'PASS' if r['passed'] else 'FAIL'} {name}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "validate-spectrum": (cmd_validate_spectrum, "check symmetry, isotropy and finiteness of a spectrum"),
    "corrector": (cmd_corrector, "print the corrector constant c and eps(nu)"),
    "simulate": (cmd_simulate, "simulate Galerkin paths"),
    "moments": (cmd_moments, "build and integrate the second-moment system"),
    "compare-moments": (cmd_compare_moments, "Monte Carlo second moments against the moment system"),
    "parabolic": (cmd_parabolic, "solve the limit equation (optionally with the Picard check)"),
    "scaling": (cmd_scaling, "run the scaling-limit experiment over a spectrum sequence"),
    "oned": (cmd_oned, "run the one-dimensional friction-limit experiment"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stlesim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stlesim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML or JSON document")
        p.add_argument("--out", default="stlesim-out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: $STLESIM_THREADS or 1)")
        p.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    return parser


def _unwrap_manifest(doc: dict, args) -> dict:
    """A manifest written by an earlier run can stand in for its config; the
    recorded seed is reused unless ``--seed`` is given."""
    if "config_sha256" not in doc or "config" not in doc:
        return doc
    cfg = doc["config"]
    if config_hash(cfg) != doc["config_sha256"]:
        raise ConfigError("embedded config does not match its recorded hash", "config")
    if doc.get("command") not in (None, args.command):
        raise ConfigError(f"manifest was written by {doc['command']!r}", "command")
    if args.seed is None and doc.get("seed") is not None:
        args.seed = int(doc["seed"])
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = _unwrap_manifest(load_config(args.config), args)
        ctx = _Ctx(args, cfg)
        ctx.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command][0](ctx)
    except ConfigError as exc:
        print(f"stlesim: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpectrumError, ContractError) as exc:
        print(f"stlesim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
