"""``rfsos`` command line: gen-data, train, propagate, evaluate.

Exit codes: 0 success, 2 validation or I/O failure, 3 numeric failure.
Log verbosity comes from ``RFSOS_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .belief import Belief, PropagationEngine, eval_belief, integrate_belief, marginal_grid, moments, propagate_many
from .config import ConfigError, RunConfig, load_config
from .quadratic_forms import NumericError
from .rf_cde import ModelCorruptError, ModelInvalidError, RationalFactorCDE, count_parameters, initial_param_count
from .systems import BoxTransform, Dataset, evaluate_llh, get_system, make_datasets, simulate
from .training import TrainingError, train_cde, train_initial

log = logging.getLogger("rfsos")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

INITIAL_CSV = "initial.csv"
TRANSITION_CSV = "transitions.csv"
TRANSFORM_JSON = "transform.json"
MODEL_JSON = "model.json"
INITIAL_BELIEF_JSON = "initial_belief.json"
REPORT_CSV = "train_report.csv"
METRICS_CSV = "metrics.csv"


def write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def write_grid_csv(path: Path, xs, ys, grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "density"])
        for i, xv in enumerate(xs):
            for j, yv in enumerate(ys):
                w.writerow([repr(float(xv)), repr(float(yv)), repr(float(grid[i, j]))])


def load_model(out: Path) -> tuple[RationalFactorCDE, PropagationEngine, Belief]:
    cde = RationalFactorCDE.from_dict(read_json(out / MODEL_JSON))
    b0_data = read_json(out / INITIAL_BELIEF_JSON)
    b0 = Belief.from_dict(b0_data, cde)
    return cde, PropagationEngine(cde, b0.h_basis), b0


def cmd_gen_data(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    system = get_system(cfg.system.name, **cfg.system.params)
    dc = cfg.data
    initial, trans, t = make_datasets(system, dc.N0, dc.N, cfg.seed, dc.horizon, dc.burn_in,
                                      dc.explore_frac, dc.explore_box, dc.sigma_inflation, dc.clamp_eps)
    initial.to_csv(out / INITIAL_CSV)
    trans.to_csv(out / TRANSITION_CSV)
    write_json(out / TRANSFORM_JSON, t.to_dict())
    print(f"initial rows: {len(initial)}")
    print(f"transition rows: {len(trans)}")


def _split(n: int, frac: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    nv = int(round(frac * n))
    return perm[nv:], perm[:nv]


def cmd_train(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    t = BoxTransform.from_dict(read_json(out / TRANSFORM_JSON))
    trans = Dataset.from_csv(out / TRANSITION_CSV, t)
    initial = Dataset.from_csv(out / INITIAL_CSV, t)
    if len(trans) == 0:
        raise ConfigError("transition dataset is empty")
    tr, va = _split(len(trans), cfg.data.val_frac, cfg.seed)
    if len(va) == 0:
        va = tr
    cde, report = train_cde((trans.x[tr], trans.x_next[tr]), (trans.x[va], trans.x_next[va]), cfg.train)
    itr, iva = _split(len(initial), cfg.data.val_frac, cfg.seed + 1)
    b0, _, _ = train_initial(initial.x[itr], cde, cfg.train, val=initial.x[iva])
    write_json(out / MODEL_JSON, cde.to_dict())
    write_json(out / INITIAL_BELIEF_JSON, b0.to_dict())
    report.write_csv(out / REPORT_CSV)
    if cfg.plots and report.epochs:
        from .plotting import plot_training
        plot_training(report.epochs, out / "train_report.png")
    last = report.epochs[-1] if report.epochs else None
    print(f"conditional parameters: {count_parameters(cde)}")
    print(f"initial-belief parameters: {initial_param_count(cde.n, cde.d)}")
    print(f"normalization residual: {cde.residual():.3e}")
    if last is not None:
        print(f"final val_nll: {last.val_nll:.4f}")


def cmd_propagate(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    cde, engine, b0 = load_model(out)
    beliefs = propagate_many(b0, engine, cfg.propagate.K)
    bdir = out / "beliefs"
    bdir.mkdir(exist_ok=True)
    for b in beliefs:
        write_json(bdir / f"belief_{b.step}.json", b.to_dict())
        mean, var = moments(b)
        print(f"k={b.step} mass={integrate_belief(b, engine):.12f} "
              f"mean={np.array2string(mean, precision=4)} var={np.array2string(var, precision=5)}")
    m = cfg.propagate.grid_points
    axis = (np.arange(m) + 0.5) / m
    mdir = out / "marginals"
    mdir.mkdir(exist_ok=True)
    if cde.d == 1:
        # no pairs to take; export the full 1-D density instead
        for b in beliefs:
            dens = eval_belief(b, axis[:, None])
            with open(mdir / f"density_k{b.step}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "density"])
                w.writerows([repr(float(x)), repr(float(v))] for x, v in zip(axis, dens))
        return
    for dims in cfg.propagate.marginals:
        grids = []
        for b in beliefs:
            grid = marginal_grid(b, dims, axis)
            grids.append(grid)
            write_grid_csv(mdir / f"marginal_{dims[0]}_{dims[1]}_k{b.step}.csv", axis, axis, grid)
        if cfg.plots:
            from .plotting import plot_marginals
            plot_marginals(grids, axis, dims, mdir / f"marginal_{dims[0]}_{dims[1]}.png")


def cmd_evaluate(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    cde, engine, b0 = load_model(out)
    t = BoxTransform.from_dict(read_json(out / TRANSFORM_JSON))
    system = get_system(cfg.system.name, **cfg.system.params)
    if system.d != cde.d:
        raise ConfigError(f"system dimension {system.d} does not match model dimension {cde.d}")
    s_init, s_sim = np.random.SeedSequence([cfg.seed, 7]).spawn(2)
    x0 = system.sample_initial(cfg.evaluate.mc_particles, np.random.Generator(np.random.Philox(s_init)))
    mc = simulate(system, x0, cfg.propagate.K, s_sim)
    beliefs = propagate_many(b0, engine, cfg.propagate.K)
    llh, excluded = evaluate_llh(beliefs, mc, t)
    with open(out / METRICS_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "avg_llh", "excluded"])
        for k, (v, e) in enumerate(zip(llh, excluded)):
            w.writerow([k, repr(float(v)), int(e)])
    if cfg.plots:
        from .plotting import plot_llh
        plot_llh(llh, out / "metrics.png")
    for k, v in enumerate(llh):
        print(f"k={k} avg_llh={v:.4f} excluded={excluded[k]}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "propagate": cmd_propagate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfsos", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        s.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
        s.add_argument("--out", type=str, default=None, help="run directory (overrides the config)")
        s.add_argument("--no-plots", action="store_true", help="skip PNG rendering")
    return p


def main(argv=None) -> int:
    level = os.environ.get("RFSOS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.no_plots:
            cfg.plots = False
        COMMANDS[args.command](cfg)
    except (TrainingError, NumericError, ModelInvalidError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        history = getattr(exc, "history", None)
        if history:
            print(f"infeasibility history (epoch, feasible, r_min_eig): {history}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc.strerror or exc} ({exc.filename})", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, ModelCorruptError, ValueError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
