"""Command-line experiments on distributed averaging.

Subcommands::

    pdmm-sim run      one method, one seed; per-iteration CSV
    pdmm-sim sweep    iterations to tolerance over a grid of penalty pairs
    pdmm-sim loss     PDMM under packet loss, averaged over seeds
    pdmm-sim compare  PDMM against gossip / broadcast / ADMM baselines

Exit status: 0 converged (or experiment completed as expected), 1 bad
configuration, 2 iteration budget exhausted (or expected ordering not met).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import averaging as avg
from .diagnostics import averaging_certificate, lemma5_gap
from .engine import check_condition, scalar_penalty
from .problem import (GraphProblem, build_averaging_problem, draw_measurements, grid_topology,
                      load_averaging_problem)

log = logging.getLogger("pdmm")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2
CSV_HEADER = ("k", "mse", "primal_res", "dual_res", "lemma5_slack", "tx")
SWEEP_GAMMAS = (0.25, 0.5, 1.0, 2.0, 4.0)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not argparse's 2
    def error(self, message):
        raise ConfigError(message)


@dataclass
class ExperimentConfig:
    method: str = "pdmm-sync"
    gamma_p: float = 1.0
    gamma_d: float = 1.0
    loss: float = 0.0  # percent
    seeds: list = field(default_factory=lambda: [0])
    tol: float = 1e-4
    max_iter: int = 10_000
    init: str | None = None  # "t" everywhere except the loss study, which needs "zeros"
    out: str | None = None
    log_every: int = 1
    problem: str | None = None
    rows: int = 10
    cols: int = 10
    data_seed: int = 0
    scheme: str = "sync"
    transport: str = "p2p"
    rho: float = 1.0
    gamma_b: float = 0.5
    losses: list = field(default_factory=lambda: [0.0, 20.0, 40.0])
    gammas: list = field(default_factory=lambda: list(SWEEP_GAMMAS))
    methods: list = field(default_factory=lambda: ["pdmm-two-node", "gossip", "broadcast", "admm-async"])
    lemma5: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.init == "x=t":
            self.init = "t"
        if self.method not in avg.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(avg.METHODS)}")
        for m in self.methods:
            if m not in avg.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if not (self.gamma_p > 0 and self.gamma_d > 0):
            raise ConfigError("--gamma-p and --gamma-d must be positive")
        if any(g <= 0 for g in self.gammas):
            raise ConfigError("sweep values must be positive")
        for v in [self.loss, *self.losses]:
            if not 0.0 <= v <= 100.0:
                raise ConfigError("loss is a percentage in [0, 100]")
        if self.loss and self.method not in avg.PDMM_METHODS:
            raise ConfigError(f"packet loss is only simulated for PDMM methods, not {self.method}")
        if not self.tol > 0:
            raise ConfigError("--tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("--max-iter must be positive")
        if self.log_every < 1:
            raise ConfigError("--log-every must be at least 1")
        if self.init not in (None, "t", "zeros"):
            raise ConfigError("--init must be 't' (x = t) or 'zeros'")
        if self.transport not in ("p2p", "broadcast"):
            raise ConfigError("--transport must be 'p2p' or 'broadcast'")
        if self.transport == "broadcast" and self.loss:
            raise ConfigError("broadcast transport cannot model packet loss; use --transport p2p")
        if self.scheme not in ("sync", "async"):
            raise ConfigError("--scheme must be 'sync' or 'async'")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.rho > 0:
            raise ConfigError("ADMM penalty must be positive")
        if not 0.0 < self.gamma_b < 1.0:
            raise ConfigError("broadcast weight must lie strictly between 0 and 1")
        if self.problem is None and (self.rows < 1 or self.cols < 1):
            raise ConfigError("grid dimensions must be positive")
        return self

    def build_problem(self) -> GraphProblem:
        if self.problem:
            try:
                return load_averaging_problem(self.problem)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load problem {self.problem}: {exc}") from exc
        topo = grid_topology(self.rows, self.cols)
        return build_averaging_problem(draw_measurements(topo.node_count, self.data_seed), topo)


@dataclass(frozen=True)
class RunRecord:
    k: int
    mse: float
    primal_res: float
    dual_res: float | None
    lemma5_slack: float | None
    tx: int

    def row(self) -> list:
        return [self.k, repr(float(self.mse)), repr(float(self.primal_res)),
                "" if self.dual_res is None else repr(float(self.dual_res)),
                "" if self.lemma5_slack is None else repr(float(self.lemma5_slack)), self.tx]


# --------------------------------------------------------------------------
# helpers


def parse_seeds(text: str) -> list[int]:
    """``"100"`` -> 0..99, ``"3,7"`` -> [3, 7], ``"5:8"`` -> [5, 6, 7]."""
    text = str(text).strip()
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        if ":" in text:
            a, b = text.split(":")
            return list(range(int(a), int(b)))
        return list(range(int(text)))
    except ValueError as exc:
        raise ConfigError(f"bad seed specification {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def _targets(problem: GraphProblem) -> np.ndarray:
    return problem.meta["t"]


def make_sim(cfg: ExperimentConfig, problem: GraphProblem, method: str, seed: int, *,
             loss: float | None = None, gammas=None, index=None):
    t = _targets(problem)
    gp, gd = gammas if gammas else (cfg.gamma_p, cfg.gamma_d)
    return avg.make_simulator(method, problem.topology, t, gamma_p=gp, gamma_d=gd, seed=seed,
                              loss=(cfg.loss if loss is None else loss) / 100.0,
                              x0=avg.initial_values(t, cfg.init or "t"), rho=cfg.rho,
                              gamma_b=cfg.gamma_b, index=index,
                              transport=cfg.transport if method in avg.PDMM_METHODS else "p2p")


def run_once(cfg: ExperimentConfig, problem: GraphProblem, method: str, seed: int, *,
             loss: float | None = None, max_iter: int | None = None, gammas=None,
             index=None, callback=None) -> avg.RunResult:
    sim = make_sim(cfg, problem, method, seed, loss=loss, gammas=gammas, index=index)
    return avg.run_to_tolerance(sim, cfg.tol, cfg.max_iter if max_iter is None else max_iter,
                                callback=callback)


def _curve(cfg, problem, method, loss, index, budget, unit=1) -> float:
    sims = [make_sim(cfg, problem, method, s, loss=loss, index=index) for s in cfg.seeds]
    k = avg.averaged_curve_crossing(sims, cfg.tol, budget)
    return math.inf if k is None else float(math.ceil(k / unit))


# --------------------------------------------------------------------------
# subcommands


def cmd_run(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    method, seed = cfg.method, cfg.seeds[0]
    records: list[RunRecord] = []
    track_gap = (cfg.lemma5 and method == "pdmm-sync" and cfg.loss == 0
                 and problem.topology.edges
                 and check_condition(scalar_penalty(cfg.gamma_p, cfg.gamma_d, problem)).holds)
    if track_gap:
        pen = scalar_penalty(cfg.gamma_p, cfg.gamma_d, problem)
        cert = averaging_certificate(problem)
    prev = {}

    def observe(sim):
        k = sim.iteration
        slack = None
        if track_gap:
            cur = sim.iterate_state()
            if k % cfg.log_every == 0 and "state" in prev:
                slack = lemma5_gap(prev["state"], cur, cert, problem, pen)
            prev["state"] = cur
        if k % cfg.log_every == 0:
            records.append(RunRecord(k, sim.mse(), sim.primal_residual(), sim.dual_residual(),
                                     slack, sim.transmissions))
        prev["sim"] = sim

    result = run_once(cfg, problem, method, seed, callback=observe)
    sim = prev["sim"]
    if not records or records[-1].k != sim.iteration:
        records.append(RunRecord(sim.iteration, sim.exact_mse(), sim.primal_residual(),
                                 sim.dual_residual(), None, sim.transmissions))
    fh = _open_out(cfg.out)
    try:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())
    finally:
        if cfg.out:
            fh.close()
    status = "converged" if result.converged else ("diverged" if result.diverged else "not converged")
    log.info("%s seed %d: %s after %d iterations, mse %.3e", method, seed, status,
             sim.iteration, result.final_mse)
    return EXIT_OK if result.converged else EXIT_BUDGET


def sweep_grid(cfg: ExperimentConfig, problem: GraphProblem | None = None) -> list[dict]:
    """Iterations to tolerance (rounds or segments) for every penalty pair."""
    problem = problem or cfg.build_problem()
    method = "pdmm-sync" if cfg.scheme == "sync" else "pdmm-async-cyclic"
    m = problem.node_count
    unit = 1 if cfg.scheme == "sync" else m
    index = avg.DirectedIndex(problem.topology)
    rows = []
    for gp in cfg.gammas:
        for gd in cfg.gammas:
            r = run_once(cfg, problem, method, cfg.seeds[0], loss=0.0,
                         max_iter=cfg.max_iter * unit, gammas=(gp, gd), index=index)
            count = None if r.iterations is None else math.ceil(r.iterations / unit)
            rows.append({"gamma_p": gp, "gamma_d": gd, "product": gp * gd,
                         "iterations": count, "converged": r.converged, "diverged": r.diverged})
    return rows


def sweep_argmin(rows: list[dict]) -> dict | None:
    done = [r for r in rows if r["converged"]]
    return min(done, key=lambda r: (r["iterations"], abs(math.log(r["product"])))) if done else None


def cmd_sweep(cfg: ExperimentConfig) -> int:
    rows = sweep_grid(cfg)
    fh = _open_out(cfg.out)
    try:
        w = csv.writer(fh)
        w.writerow(["gamma_p", "gamma_d", "product", "iterations", "converged", "diverged"])
        for r in rows:
            w.writerow([r["gamma_p"], r["gamma_d"], r["product"],
                        "" if r["iterations"] is None else r["iterations"],
                        int(r["converged"]), int(r["diverged"])])
    finally:
        if cfg.out:
            fh.close()
    best = sweep_argmin(rows)
    if best is None:
        log.info("no cell converged")
        return EXIT_BUDGET
    log.info("fastest cell: gamma_p=%g gamma_d=%g (product %g), %d %s", best["gamma_p"],
             best["gamma_d"], best["product"], best["iterations"],
             "rounds" if cfg.scheme == "sync" else "segments")
    return EXIT_OK


def _summarize(results: list[avg.RunResult], unit: int = 1) -> dict:
    its = [math.ceil(r.iterations / unit) for r in results if r.converged]
    n = len(results)
    return {
        "seeds": n,
        "converged": len(its),
        "mean_iterations": float(np.mean(its)) if len(its) == n and n else math.inf,
        "mean_converged": float(np.mean(its)) if its else math.inf,
        "median_iterations": float(np.median(its)) if its else math.inf,
        "mean_tx": float(np.mean([r.transmissions for r in results])) if n else 0.0,
    }


def loss_study(cfg: ExperimentConfig, problem: GraphProblem | None = None) -> list[dict]:
    problem = problem or cfg.build_problem()
    method = "pdmm-sync" if cfg.scheme == "sync" else "pdmm-async-cyclic"
    unit = 1 if cfg.scheme == "sync" else problem.node_count
    index = avg.DirectedIndex(problem.topology)
    rows = []
    for loss in cfg.losses:
        res = [run_once(cfg, problem, method, s, loss=loss, max_iter=cfg.max_iter * unit, index=index)
               for s in cfg.seeds]
        rows.append({"loss": loss, **_summarize(res, unit),
                     "curve_iterations": _curve(cfg, problem, method, loss, index,
                                                cfg.max_iter * unit, unit)})
    return rows


def cmd_loss(cfg: ExperimentConfig) -> int:
    if cfg.init == "t":
        raise ConfigError("the loss study starts from zeros (--init zeros); x = t needs exact neighbour data")
    if cfg.transport == "broadcast" and any(cfg.losses):
        raise ConfigError("broadcast transport cannot model packet loss; use --transport p2p")
    cfg.init = "zeros"
    rows = loss_study(cfg)
    _write_table(cfg.out, ["loss", "seeds", "converged", "mean_iterations", "mean_converged",
                           "median_iterations", "curve_iterations", "mean_tx"], rows)
    means = [r["mean_iterations"] for r in rows]
    ordered = all(a < b for a, b in zip(means, means[1:]))
    log.info("mean iterations by loss: %s (%s)", ", ".join(f"{r['loss']:g}%: {r['mean_iterations']:.1f}"
                                                         for r in rows),
             "increasing" if ordered else "NOT increasing")
    return EXIT_OK if ordered else EXIT_BUDGET


def compare_methods(cfg: ExperimentConfig, problem: GraphProblem | None = None) -> list[dict]:
    problem = problem or cfg.build_problem()
    index = avg.DirectedIndex(problem.topology)
    rows = []
    for method in cfg.methods:
        res = [run_once(cfg, problem, method, s, loss=0.0, index=index) for s in cfg.seeds]
        rows.append({"method": method, **_summarize(res),
                     "curve_iterations": _curve(cfg, problem, method, 0.0, index, cfg.max_iter)})
    return rows


def cmd_compare(cfg: ExperimentConfig) -> int:
    rows = compare_methods(cfg)
    _write_table(cfg.out, ["method", "seeds", "converged", "mean_iterations", "mean_converged",
                           "median_iterations", "curve_iterations", "mean_tx"], rows)
    for r in rows:
        log.info("%-18s %3d/%d converged, mean %s", r["method"], r["converged"], r["seeds"],
                 f"{r['mean_converged']:.1f}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_BUDGET


def _write_table(path, columns, rows):
    fh = _open_out(path)
    try:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    finally:
        if path:
            fh.close()


# --------------------------------------------------------------------------
# argument handling

COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "loss": cmd_loss, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdmm-sim", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--method", choices=avg.METHODS)
        p.add_argument("--gamma-p", type=float)
        p.add_argument("--gamma-d", type=float)
        p.add_argument("--loss", type=float, help="packet loss in percent")
        p.add_argument("--seeds", help="count N, list a,b,c or range a:b")
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", type=int,
                       help="iteration budget (sweep/loss: rounds or segments of m iterations)")
        p.add_argument("--init", help="'t' (x = t) or 'zeros'")
        p.add_argument("--out", help="output CSV (default stdout)")
        p.add_argument("--log-every", type=int)
        p.add_argument("--problem", help="JSON problem file (default: random grid)")
        p.add_argument("--rows", type=int)
        p.add_argument("--cols", type=int)
        p.add_argument("--data-seed", type=int)
        p.add_argument("--scheme", choices=("sync", "async"))
        p.add_argument("--transport", choices=("p2p", "broadcast"),
                       help="PDMM message model; broadcast requires zero loss")
        p.add_argument("--losses", help="comma-separated loss percentages")
        p.add_argument("--gammas", help="comma-separated sweep values")
        p.add_argument("--methods", help="comma-separated methods to compare")
        p.add_argument("--no-lemma5", dest="lemma5", action="store_false", default=None,
                       help="skip the per-iteration bound check in 'run'")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if isinstance(data.get("seeds"), (int, str)):
            data["seeds"] = parse_seeds(data["seeds"])
    cfg = ExperimentConfig(**data)
    for name in ("method", "gamma_p", "gamma_d", "loss", "tol", "max_iter", "out", "log_every",
                 "problem", "rows", "cols", "data_seed", "scheme", "transport", "lemma5"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.init is not None:
        cfg.init = "t" if args.init in ("t", "x=t") else args.init
    if args.seeds is not None:
        cfg.seeds = parse_seeds(args.seeds)
    if args.losses is not None:
        cfg.losses = _floats(args.losses)
    if args.gammas is not None:
        cfg.gammas = _floats(args.gammas)
    if args.methods is not None:
        cfg.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    return cfg.validate()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"pdmm-sim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
