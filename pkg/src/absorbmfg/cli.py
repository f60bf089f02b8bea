"""Command-line experiment runner: ``absorbmfg run --scenario bankrun --stage both``.

Every numeric output is a pure function of the config and seed.  Wall times
and timestamps go to ``timings.json`` only, so re-running a manifest gives
byte-identical files everywhere else.
"""
from __future__ import annotations

import argparse
import csv
import importlib.util
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import PolynomialBasis
from .config import SCHEMA_VERSION, ExperimentConfig, config_hash, default_config_path, load_config, parse_config
from .dynamics import StateModel, bankrun_model, draw_noise, simulate_paths
from .errors import ConfigError, InvalidParameterError, MFGError, ToleranceBelowNoiseFloorError
from .fixed_point import solve_equilibrium, write_history_csv
from .measure_flow import default_battery
from .noise_grid import conditional_atoms
from .nplayer import EquilibriumPolicy, best_response_gap, gap_trend_ok, simulate_approx_game

logger = logging.getLogger("absorbmfg")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_FLOOR = 0, 1, 2, 3


def build_model(cfg: ExperimentConfig) -> StateModel:
    if cfg.scenario == "bankrun":
        try:
            return bankrun_model(**cfg.model)
        except InvalidParameterError as exc:
            raise ConfigError("model", str(exc)) from None
    path = Path(cfg.scenario)
    if not path.is_file():
        raise ConfigError("scenario", f"scenario file {str(path)!r} not found")
    spec = importlib.util.spec_from_file_location("absorbmfg_user_scenario", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "build_model"):
        raise ConfigError("scenario", "scenario file must define build_model(params: dict) -> StateModel")
    model = module.build_model(dict(cfg.model))
    if not isinstance(model, StateModel):
        raise ConfigError("scenario", "build_model must return a StateModel")
    if model.n_steps % 2**cfg.grid.n_time:
        raise ConfigError("grid.n_time", f"2**n_time must divide the scenario's n_steps = {model.n_steps}")
    return model


def _derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _dump(path: Path, obj) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


class Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.model = build_model(cfg)
        self.results: dict = {
            "schema_version": SCHEMA_VERSION,
            "scenario": cfg.scenario,
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "timings_file": "timings.json",
        }
        self.timings: dict = {}
        self.outputs: list[str] = []
        self.iterate = None

    def _record(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def equilibrium(self, export: bool = True):
        cfg, model = self.cfg, self.model
        t0 = time.perf_counter()
        fp, grid = cfg.fixed_point, cfg.grid
        iterate, history = solve_equilibrium(
            model, n_time=grid.n_time, n_quant=grid.n_quant, n_paths=fp.n_paths, damping=fp.damping,
            tol=fp.tol, max_iter=fp.max_iter, seed=cfg.seed, grid_sample=grid.grid_sample,
            min_occupancy=grid.min_occupancy, basis=PolynomialBasis(cfg.bsde.degree), mode=fp.mode,
            check_floor=fp.check_floor, workers=cfg.workers,
        )
        self.iterate = iterate
        self.timings["equilibrium_total"] = time.perf_counter() - t0
        self.timings["equilibrium_iterations"] = [h["wall_time"] for h in history]
        if not export:
            return
        battery = default_battery(model, model.battery_radius)
        iterate.flow.to_csv(self._record("equilibrium_flow.csv"), battery)
        write_history_csv(self._record("history.csv"), history)
        iterate.grid.to_csv(self._record("atoms.csv"))
        for atom, sol in sorted(iterate.solutions.items()):
            sol.dump_json(self._record(f"bsde_atom{atom}.json"))
        self.results["equilibrium"] = {
            "converged": bool(iterate.converged),
            "iterations": len(history),
            "best_iteration": iterate.iteration,
            "residual": iterate.residual,
            "residual_history": [h["residual"] for h in history],
            "tol": fp.tol,
            "noise_floor": iterate.noise_floor,
            "n_atoms": iterate.grid.n_atoms,
            "atom_probabilities": iterate.grid.probabilities.tolist(),
            "value_y0": {str(a): s.y0 for a, s in sorted(iterate.solutions.items())},
        }

    def dump_paths(self, n_paths: int) -> None:
        """Sample equilibrium paths per atom, written as CSV (zip-based formats embed timestamps)."""
        it, model = self.iterate, self.model
        rng = np.random.default_rng(_derived_seed(self.cfg.seed, 4))
        rows = []
        for atom in it.flow.atoms:
            common = it.grid.sample_atom_increments(atom, n_paths, model.n_steps, rng)
            noise = draw_noise(model, n_paths, rng, common=common)
            batch = simulate_paths(model, it.flow, it.policies[atom], noise, atom=atom)
            alive = batch.alive_mask()
            for i in range(n_paths):
                for j in range(model.n_steps + 1):
                    a = batch.controls[i, j] if j < model.n_steps else np.zeros(model.control_dim)
                    rows.append([atom, i, j, repr(float(model.times[j])), *map(repr, batch.values[i, j].tolist()),
                                 int(alive[i, j]), *map(repr, np.asarray(a, dtype=float).tolist())])
        header = (["atom", "path", "step", "time"] + [f"x{i}" for i in range(model.dim)] + ["alive"]
                  + [f"a{i}" for i in range(model.control_dim)])
        _write_rows(self._record("paths.csv"), header, rows)

    def gap(self):
        cfg, model = self.cfg, self.model
        if self.iterate is None:
            self.equilibrium(export=False)
        npc = cfg.nplayer
        estimates, rows = [], []
        for n in npc.n_players:
            t0 = time.perf_counter()
            seed = _derived_seed(cfg.seed, 1, n)
            est = best_response_gap(model, self.iterate, n, reps=npc.reps, seed=seed,
                                    br_paths_per_rep=npc.br_paths_per_rep, n_randomized=npc.n_randomized)
            self.timings[f"gap_N{n}"] = time.perf_counter() - t0
            logger.info("N=%d: gap %.4g, CI [%.4g, %.4g]", n, est.gap, *est.ci)
            estimates.append(est)
            rows.append([n, repr(est.gap), repr(est.gap_clipped), repr(est.ci[0]), repr(est.ci[1]),
                         est.candidate, npc.reps, seed])
        _write_rows(self._record("gap.csv"),
                    ["N", "gap", "gap_clipped", "ci_low", "ci_high", "best_candidate", "reps", "seed"], rows)

        ap = cfg.approx
        policy = EquilibriumPolicy(self.iterate.grid, self.iterate.policies, model.n_steps)
        fine_rng = np.random.default_rng(_derived_seed(cfg.seed, 2))
        fine = fine_rng.standard_normal((ap.grid_sample, model.n_steps, model.noise_dim)) * np.sqrt(model.dt)
        approx, arows = [], []
        for level in ap.levels:
            t0 = time.perf_counter()
            seed = _derived_seed(cfg.seed, 3, level)
            grid = conditional_atoms(fine, level, level, model.horizon, min_occupancy=1)
            run = simulate_approx_game(model, policy, ap.n_players, grid, seed=seed, reps=ap.reps,
                                       inner_batch=ap.inner_batch)
            diff = np.abs(run.rho_m - run.m).mean(axis=1)
            self.timings[f"approx_n{level}"] = time.perf_counter() - t0
            entry = {"n": level, "N": ap.n_players, "discrepancy": float(diff.mean()),
                     "se": float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0,
                     "n_atoms": grid.n_atoms, "seed": seed}
            approx.append(entry)
            arows.append([level, ap.n_players, repr(entry["discrepancy"]), repr(entry["se"]), grid.n_atoms, seed])
        _write_rows(self._record("approx.csv"), ["n", "N", "discrepancy", "se", "n_atoms", "seed"], arows)

        self.results["gap"] = {
            "estimates": [e.to_dict() for e in estimates],
            "trend_non_increasing": gap_trend_ok(estimates),
            "note": "gaps are lower bounds: deviations are searched over a finite candidate battery",
        }
        self.results["approx"] = approx


def _manifest(cfg: ExperimentConfig, stage: str, status: dict, outputs: list[str], dump_paths: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "stage": stage,
        "dump_paths": dump_paths,
        "status": status,
        "outputs": sorted(outputs),
    }


def run(cfg: ExperimentConfig, stage: str = "both", out: Path | None = None, dump_paths: int = 0) -> int:
    out = Path(out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    status: dict[str, str] = {}
    started = datetime.now(timezone.utc).isoformat()
    runner = None
    code = EXIT_OK
    try:
        runner = Runner(cfg, out)
        if stage in ("equilibrium", "both"):
            runner.equilibrium()
            status["equilibrium"] = "ok" if runner.iterate.converged else "not converged"
            if dump_paths:
                runner.dump_paths(dump_paths)
        if stage in ("gap", "both"):
            runner.gap()
            status["gap"] = "ok"
    except ToleranceBelowNoiseFloorError as exc:
        status["equilibrium"] = f"failed: {exc}"
        logger.error("%s; raise fixed_point.tol or fixed_point.n_paths", exc)
        code = EXIT_FLOOR
    except ConfigError as exc:
        status["config"] = f"failed: {exc}"
        logger.error("invalid config: %s", exc)
        code = EXIT_CONFIG
    except MFGError as exc:
        status[stage] = f"failed: {type(exc).__name__}: {exc}"
        logger.error("%s: %s", type(exc).__name__, exc)
        code = EXIT_FAILED
    outputs = []
    if runner is not None:
        outputs = list(runner.outputs)
        runner.results["status"] = status
        _dump(out / "results.json", runner.results)
        outputs.append("results.json")
        timings = dict(runner.timings, started=started, finished=datetime.now(timezone.utc).isoformat())
        _dump(out / "timings.json", timings)
    _dump(out / "manifest.json", _manifest(cfg, stage, status, outputs, dump_paths))
    return code


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="absorbmfg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the equilibrium and/or gap stages")
    r.add_argument("--scenario", help="'bankrun' or a .py file defining build_model(params)")
    r.add_argument("--config", help="JSON config (lines starting with // are comments)")
    r.add_argument("--manifest", help="re-run the exact config and seed recorded in a manifest")
    r.add_argument("--stage", choices=["equilibrium", "gap", "both"])
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, help="cap on worker threads")
    r.add_argument("--out", help="output directory")
    r.add_argument("--dump-paths", type=int, metavar="N",
                   help="also write N sample equilibrium paths per atom to paths.csv")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.manifest:
            if args.config:
                raise ConfigError("--manifest", "cannot be combined with --config")
            manifest = json.loads(Path(args.manifest).read_text())
            cfg = parse_config(manifest["config"])
            stage = args.stage or manifest.get("stage", "both")
            dump_paths = manifest.get("dump_paths", 0) if args.dump_paths is None else args.dump_paths
        else:
            cfg = load_config(args.config or default_config_path())
            stage = args.stage or "both"
            dump_paths = args.dump_paths or 0
        if args.scenario:
            cfg.scenario = args.scenario
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        cfg = parse_config(cfg.to_dict())  # re-validate after overrides
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if dump_paths < 0:
        print("config error: --dump-paths: must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg, stage, args.out, dump_paths)
    if code == EXIT_FLOOR:
        print("tolerance is below the Monte Carlo noise floor; see results.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
