"""Command-line entry point.

Every subcommand reads a YAML config (see :mod:`skscontrol.config`), writes
its tables as CSV and its summary as JSON into ``--out``, and finishes with a
``manifest.json`` that lists the full config, seed, library versions and a
SHA-256 of every emitted file.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 a checked
property failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ConstructionError, DomainError, NumericalFailure, PropertyFailure

log = logging.getLogger("skscontrol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROPERTY = 0, 1, 2, 3
CALCULUS_TOL = 1e-12
LEDGER_TOL = 1e-12


class Emitter:
    """Serializes all file writes and remembers them for the manifest."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name) -> Path:
        self.files.append(name)
        return self.out / name

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def json(self, name, data):
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True)

    def manifest(self, command, cfg):
        import scipy
        import yaml
        entries = []
        for name in self.files:
            digest = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
            entries.append({"file": name, "sha256": digest})
        data = {"command": command, "config": cfg.raw, "seed": cfg.seed,
                "rng": "numpy PCG64 seeded with [seed, stream]",
                "versions": {"skscontrol": __version__, "python": platform.python_version(),
                             "numpy": np.__version__, "scipy": scipy.__version__,
                             "pyyaml": yaml.__version__},
                "files": entries}
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _field_rows(tgrid, sgrid, seq, points):
    x = sgrid.x
    for n, t in enumerate(points):
        for i, xi in enumerate(x):
            yield n, float(t), float(xi), float(seq[n, i])


# subcommands -------------------------------------------------------------------

def cmd_simulate(cfg, em, args):
    from .spacedisc import pair_norm
    from .system import forward_solve
    P, sg, tg = cfg.system(), cfg.sgrid(), cfg.tgrid()
    u0, v0 = cfg.initial_data()
    traj = forward_solve(u0, v0, None, P, sg, tg)
    traj.to_csv(em.path("trajectory.csv"))
    U, V = traj.u.values, traj.v.values
    em.json("summary.json", {
        "initial_L2": pair_norm(sg, u0, v0), "final_L2": pair_norm(sg, U[-1], V[-1]),
        "final_Hm1xHm2": pair_norm(sg, U[-1], V[-1], "Hm1xHm2"), "N": sg.N, "M": tg.M})
    return EXIT_OK


def cmd_adjoint(cfg, em, args):
    from .spacedisc import pair_norm
    from .system import adjoint_solve, energy_estimate_check
    P, sg, tg = cfg.system(), cfg.sgrid(), cfg.tgrid()
    pT, qT = cfg.final_data()
    traj = adjoint_solve(pT, qT, P, sg, tg)
    traj.to_csv(em.path("adjoint.csv"))
    summary = {"final_L2": pair_norm(sg, pT, qT),
               "initial_L2": pair_norm(sg, traj.p.values[0], traj.q.values[0])}
    if np.any(pT) or np.any(qT):
        summary["energy"] = vars(energy_estimate_check(pT, qT, P, sg, tg))
    em.json("summary.json", summary)
    return EXIT_OK


def cmd_calculus_check(cfg, em, args):
    from .timegrid import calculus_suite
    ex = cfg.raw["experiment"]
    rows = calculus_suite(int(ex["calculus_instances"]), tuple(ex["calculus_M"]), cfg.rng(3),
                          T=cfg.T)
    em.csv("calculus.csv", ["M", "instance", "identity", "absolute", "relative"],
           ([r["M"], r["instance"], r["identity"], r["absolute"], r["relative"]] for r in rows))
    worst = {}
    for r in rows:
        worst[r["identity"]] = max(worst.get(r["identity"], 0.0), r["relative"])
    ok = all(v <= CALCULUS_TOL for v in worst.values())
    em.json("summary.json", {"max_relative": worst, "tolerance": CALCULUS_TOL, "passed": ok})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_carleman_check(cfg, em, args):
    from .carleman import (CarlemanWeights, build_beta, check_discrete_weight_lemmas,
                           check_theta_bounds, conjugation_order, parameter_ledger,
                           smooth_test_profile, time_conjugation_residual)
    from .timegrid import DualSeq
    wp = cfg.weights()
    c = cfg.raw["carleman"]
    tg = cfg.tgrid()
    beta = build_beta(tuple(c["omega0"]))
    W = CarlemanWeights(beta, wp)
    theta = check_theta_bounds(wp)
    lemmas = check_discrete_weight_lemmas(W, tg)
    conj = conjugation_order(W, float(c["s"]), N=cfg.sgrid().N)
    x = np.linspace(0.05, 0.95, 7)
    z = DualSeq(tg, np.cos(np.outer(tg.dual_points, 1 + x)) * smooth_test_profile(x))
    tconj = time_conjugation_residual(W, tg, z, x)
    tconj.pop("remainder")
    ledger = parameter_ledger(wp, tg.dt)
    em.csv("conditions.csv", ["name", "value", "bound", "pass"],
           ([k, v["value"], v["bound"], v["pass"]]
            for k, v in {**ledger.conditions, **ledger.admissibility}.items()))
    em.json("ledger.json", ledger.as_dict())
    ok = (theta["max_ok"] and theta["plus_ok"] and conj["order"] >= 2
          and ledger.identities["scaled_tau"]["relative_error"] <= LEDGER_TOL)
    em.json("summary.json", {"theta_bounds": theta, "weight_lemmas": lemmas,
                             "conjugation": conj, "time_conjugation": tconj,
                             "critical_gap": beta.delta_crit, "bump_degree": beta.degree_k,
                             "passed": ok})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_control(cfg, em, args):
    from .hum import solve_hum
    P, sg, tg = cfg.system(), cfg.sgrid(), cfg.tgrid()
    u0, v0 = cfg.initial_data()
    res = solve_hum(u0, v0, cfg.penalty(), cfg.hum(), P, sg, tg)
    em.csv("control.csv", ["n", "t", "x", "h"],
           _field_rows(tg, sg, res.control.values[:tg.M], tg.dual_points[:tg.M]))
    res.trajectory.to_csv(em.path("trajectory.csv"))
    res.write_history_csv(em.path("history.csv"))
    em.json("summary.json", res.summary())
    if not res.converged:
        log.error("conjugate gradient did not converge in %d iterations", res.iterations)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_two_stage(cfg, em, args):
    from .hum import two_stage_control
    P, sg, tg = cfg.system(), cfg.sgrid(), cfg.tgrid()
    u0, v0 = cfg.initial_data()
    rep = two_stage_control(u0, v0, cfg.penalty(), cfg.hum(), P, sg, tg)
    rep.trajectory.to_csv(em.path("trajectory.csv"))
    em.csv("control.csv", ["n", "t", "x", "h"],
           _field_rows(tg, sg, rep.control.values[:tg.M], tg.dual_points[:tg.M]))
    em.json("summary.json", rep.summary())
    return EXIT_OK if rep.converged else EXIT_NUMERICAL


def cmd_observability(cfg, em, args):
    from .obs import ct_time_sweep, estimate_CT
    P, sg, tg = cfg.system(), cfg.sgrid(), cfg.tgrid()
    ex = cfg.raw["experiment"]
    C1 = float(ex["C1_obs"])
    est = estimate_CT(P, sg, tg, int(ex["samples"]), C1, rng=cfg.rng(4))
    em.csv("samples.csv", ["sample", "ratio"], enumerate(est.sampled))
    em.csv("power_iteration.csv", ["iteration", "rayleigh"], enumerate(est.rayleigh_trace))
    sweep = ct_time_sweep(P, sg, tg.dt, tuple(ex["T_sweep"]), C1, samples=int(ex["samples"]),
                          seed=cfg.seed)
    em.csv("T_sweep.csv", ["T", "M", "CT", "CT2"],
           ([r["T"], r["M"], r["CT"], r["CT2"]] for r in sweep["rows"]))
    ok = est.monotone and est.CT2 >= est.sampled_max
    em.json("summary.json", {"CT2": est.CT2, "CT": est.CT, "sampled_max": est.sampled_max,
                             "eig_max": est.eig_max, "remainder": est.remainder, "C1": C1,
                             "power_monotone": est.monotone, "T_sweep": sweep, "passed": ok})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_decay_study(cfg, em, args):
    from .obs import decay_study, dt_sweep_points, phi_sweep_points
    P, sg = cfg.system(), cfg.sgrid()
    ex = cfg.raw["experiment"]
    if ex["sweep"] == "phi":
        points = phi_sweep_points(cfg.raw["grid"]["M"], cfg.T, [float(p) for p in ex["phis"]])
    else:
        points = dt_sweep_points([int(M) for M in ex["Ms"]], cfg.penalty().C1)
    u0, v0 = cfg.initial_data()
    study = decay_study(points, P, sg, cfg.T, cfg.hum(), u0, v0, threads=args.threads,
                        cost_check=bool(ex["cost_check"]))
    study.write_csv(em.path("decay.csv"))
    study.write_json(em.path("decay.json"))
    holds = study.cost_bound.get("holds", True)
    return EXIT_OK if holds else EXIT_PROPERTY


COMMANDS = {
    "simulate": cmd_simulate,
    "adjoint": cmd_adjoint,
    "calculus-check": cmd_calculus_check,
    "carleman-check": cmd_carleman_check,
    "control": cmd_control,
    "two-stage": cmd_two_stage,
    "observability": cmd_observability,
    "decay-study": cmd_decay_study,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skscontrol", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config file (defaults if omitted)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="parallel sweep points")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    from .config import RunConfig
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if overrides:
            cfg = RunConfig.from_dict({**cfg.raw, **overrides})
        if args.threads < 1:
            raise ConfigError("--threads: must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    em = Emitter(Path(cfg.raw["out"]))
    try:
        code = COMMANDS[args.command](cfg, em, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PropertyFailure as exc:
        print(f"property check failed: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    except (NumericalFailure, ConstructionError, DomainError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        diag = getattr(exc, "diagnostics", None)
        print(f"numerical failure: {exc}" + (f" {diag}" if diag else ""), file=sys.stderr)
        return EXIT_NUMERICAL
    em.manifest(args.command, cfg)
    if code:
        log.warning("%s finished with exit code %d", args.command, code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
