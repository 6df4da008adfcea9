"""Command line entry point.

    spdelab {simulate,pullback,extinction,oracle,converge} --config FILE [--out DIR] [--jobs N] [--seed U64]

Exit codes: 0 success, 1 configuration error, 2 solver failure, 3 a checked
invariant failed.  The output directory defaults to ``$SPDELAB_OUT`` or
``./spdelab-out``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import comparison as cmp
from . import config as cfgmod
from . import dynamics as dyn
from . import lab
from .grid import lambda_floor

log = logging.getLogger("spdelab")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INVARIANT = 0, 1, 2, 3


class _Run:
    """Collects output files and calibration values for the manifest."""

    def __init__(self, out: Path, built: cfgmod.Built):
        self.out = out
        self.built = built
        self.outputs = []
        self.calibration = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        self.write_json("config.json", self.built.raw)
        manifest = {
            "config_hash": cfgmod.config_hash(self.built.raw),
            "master_seed": self.built.seed,
            "tool_version": __version__,
            "calibration": lab._jsonable(self.calibration),
            "outputs": sorted(self.outputs + ["manifest.json"]),
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _base_calibration(exp: lab.ExperimentConfig) -> dict:
    spec = exp.drift
    out = {"embedding_floor": dyn.embedding_floor(spec, exp.grid)}
    if spec.equation == "sfde":
        out["lambda_floor"] = spec.lambda_floor or lambda_floor(exp.grid, spec.alpha)
    c = dyn.analytic_energy_constant(spec)
    if c is not None:
        out["energy_C_analytic"] = c
    return out


def cmd_simulate(run: _Run, args) -> int:
    exp = run.built.experiment
    opts = run.built.raw.get("simulate", {})
    s = float(opts.get("s", exp.pullback_starts[0]))
    t = float(opts.get("t", exp.target_time))
    omega = int(opts.get("omega", 0))
    x = lab.members(exp)[int(opts.get("member", 0))]
    path = lab.noise_path(exp, omega, (s, t) if t > s else (s, s + exp.solver.dt))
    traj = dyn.flow(exp.drift, exp.solver, exp.grid, x, s, t, path)
    with open(run.path("trajectory.csv"), "w") as fh:
        dyn.write_trajectory_csv(traj, fh, int(opts.get("state_every", 0)))
    run.calibration.update(_base_calibration(exp))
    return EXIT_OK


def _write_report(run: _Run, rep: lab.PullbackReport, extra: dict = None) -> int:
    with open(run.path("report.csv"), "w") as fh:
        rep.write_csv(fh)
    summary = rep.summary()
    if extra:
        summary.update(lab._jsonable(extra))
    run.write_json("summary.json", summary)
    run.calibration.update(rep.calibration)
    return EXIT_OK if rep.passed else EXIT_INVARIANT


def cmd_pullback(run: _Run, args) -> int:
    exp = run.built.experiment
    rep = lab.run_pullback(exp, jobs=args.jobs)
    run.calibration.update(_base_calibration(exp))
    return _write_report(run, rep, {"median_decay_ratio": rep.calibration.get("median_decay_ratio")})


def cmd_extinction(run: _Run, args) -> int:
    exp = run.built.experiment
    rep = lab.run_extinction(exp, jobs=args.jobs)
    run.calibration.update(_base_calibration(exp))
    return _write_report(run, rep)


def cmd_converge(run: _Run, args) -> int:
    exp = run.built.experiment
    opts = run.built.raw.get("converge", {})
    eps = [float(e) for e in opts.get("epsilons", [1e-2, 1e-3, 1e-4, 1e-5])]
    ref = float(opts.get("ref_epsilon", 1e-6))
    rep = lab.regularization_report(exp, eps, ref, omega=int(opts.get("omega", 0)))
    run.calibration.update(_base_calibration(exp))
    return _write_report(run, rep)


def cmd_oracle(run: _Run, args) -> int:
    opts = run.built.raw.get("oracle", {})
    dt = float(opts.get("dt", 1e-4))
    horizon = float(opts.get("horizon", 2.0))
    tol = float(opts.get("tolerance", 1e-6))
    cases = cmp.random_cases(int(opts.get("cases", 200)), int(opts.get("seed", run.built.seed)), dt, horizon)
    res = cmp.comparison_sweep(cases, dt, horizon)
    with open(run.path("oracle.csv"), "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "beta", "q0", "deviation", "excess"])
        for i in range(len(cases)):
            w.writerow([i] + [f"{res[k][i]:.17g}" for k in ("beta", "q0", "deviation", "excess")])
    dev_ok = bool(np.all(res["deviation"] <= tol))
    dom_ok = bool(np.all(res["excess"] <= tol))
    run.write_json("summary.json", {
        "experiment": "oracle",
        "passed": dev_ok and dom_ok,
        "invariants": {"exact_matches_closed_form": dev_ok, "subsolution_dominated": dom_ok},
        "max_deviation": float(res["deviation"].max()),
        "max_excess": float(res["excess"].max()),
    })
    return EXIT_OK if dev_ok and dom_ok else EXIT_INVARIANT


COMMANDS = {
    "simulate": cmd_simulate,
    "pullback": cmd_pullback,
    "extinction": cmd_extinction,
    "oracle": cmd_oracle,
    "converge": cmd_converge,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdelab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps over omega")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = cfgmod.load(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise cfgmod.ConfigError("seed: must be an unsigned 64-bit integer")
            raw = copy.deepcopy(raw)
            raw["seed"] = args.seed
        built = cfgmod.build(raw)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out or os.environ.get("SPDELAB_OUT", "spdelab-out"))
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out, built)
    try:
        code = COMMANDS[args.command](run, args)
    except dyn.NonConvergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run.finish()
    log.info("%s finished with exit code %d; outputs in %s", args.command, code, out)
    return code


if __name__ == "__main__":
    sys.exit(main())
