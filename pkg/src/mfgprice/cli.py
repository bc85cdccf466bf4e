"""Experiment driver.

One INI config file describes a run; subcommands consume it:

    train      adversarial training with logging, checkpoints, residuals
    oracle     closed-form quadratic benchmark curves and trajectories
    nplayer    finite-population dual-ascent benchmark
    residuals  certify a trajectory CSV produced by any of the above

Every value a run depends on is either in the config or a documented
default, and the resolved configuration is hashed into the summary, so
identical configs produce byte-identical summary files.  Wall-clock
readings go to a separate, unhashed side file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .estimator import ResidualReport, residuals
from .model import (
    CONSTANT_MEAN,
    OSCILLATING_MEAN,
    QUADRATIC,
    QUARTIC,
    CostSpec,
    DomainError,
    InitialDist,
    NonConvergenceError,
    SupplySpec,
    TimeGrid,
    sample_initial_positions,
    supply_on_grid,
)
from .networks import mlp_eval, rnn_hidden_step_eval, save_params, zero_hidden_state
from .oracle import (
    WrongCostKind,
    lq_coefficients,
    lq_density,
    lq_feedback,
    lq_price,
    nplayer_solve,
)
from .rollout import (
    NonFiniteError,
    TrajectoryBatch,
    batch_from_csv,
    batch_to_csv,
    input_scales,
    price_curve,
)
from .training import TrainConfig, Trainer, run_loop


class ConfigError(Exception):
    """Bad or missing configuration; the message names section.field."""


_REQUIRED = object()

# section -> key -> (type tag, default); every key here is semantic and
# enters the config hash except the output section
_SCHEMA = {
    "experiment": {
        "name": ("str", "run"),
        "arch": ("choice:mlp,rnn", "mlp"),
    },
    "cost": {
        "kind": (f"choice:{QUADRATIC},{QUARTIC}", QUADRATIC),
        "eta": ("float", 1.0),
        "kappa": ("float", 1.0),
        "c": ("float", 1.0),
        "gamma": ("float", math.exp(-1.0)),
        "zeta": ("float", 1.0),
    },
    "supply": {
        "kind": (f"choice:{CONSTANT_MEAN},{OSCILLATING_MEAN}", CONSTANT_MEAN),
        "q0": ("float", 0.1),
    },
    "init": {
        "mean": ("float", -0.25),
        "std": ("float", 0.4),
    },
    "grid": {
        "horizon": ("float", 1.0),
        "steps": ("int", 30),
    },
    "train": {
        "iterations": ("int", 200_000),
        "sample_size": ("int", 10),
        "epoch_length": ("int", 500),
        "lr_control": ("float", 1e-3),
        "lr_price": ("float", 1e-3),
        "seed": ("int", 0),
        "input_scaling": ("bool", False),
    },
    "nplayer": {
        "players": ("int", 50),
        "tolerance": ("float", 1e-8),
        "seed": ("int", 1234),
        "rho": ("float", 0.0),  # 0 means c/2 with halving
        "max_outer": ("int", 500),
    },
    "output": {
        "directory": ("str", ""),
    },
}

_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(section: str, key: str, tag: str, raw):
    if not isinstance(raw, str):
        return raw  # already a default
    raw = raw.strip()
    try:
        if tag == "float":
            return float(raw)
        if tag == "int":
            return int(raw)
        if tag == "bool":
            return _BOOL_WORDS[raw.lower()]
        if tag.startswith("choice:"):
            choices = tag.split(":", 1)[1].split(",")
            if raw not in choices:
                raise KeyError
            return raw
        return raw
    except (ValueError, KeyError):
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {tag.split(':')[0]}")


@dataclass
class RunConfig:
    name: str
    arch: str
    cost: CostSpec
    supply: SupplySpec
    init: InitialDist
    grid: TimeGrid
    train: dict
    nplayer: dict
    out_dir: str
    config_hash: str
    resolved: dict


def _canon(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(resolved: dict) -> str:
    lines = sorted(
        f"{s}.{k}={_canon(v)}"
        for s, kv in resolved.items()
        if s != "output"
        for k, v in kv.items()
    )
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def load_run_config(path, out=None, seed=None, iterations=None) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")

    resolved = {}
    for section, keys in _SCHEMA.items():
        resolved[section] = {}
        for key, (tag, default) in keys.items():
            raw = parser.get(section, key, fallback=default)
            resolved[section][key] = _convert(section, key, tag, raw)

    if seed is not None:
        resolved["train"]["seed"] = int(seed)
    if iterations is not None:
        if iterations < 1:
            raise ConfigError("train.iterations: must be at least 1 (--iterations)")
        resolved["train"]["iterations"] = int(iterations)

    try:
        cost = CostSpec(
            kind=resolved["cost"]["kind"],
            eta=resolved["cost"]["eta"],
            kappa=resolved["cost"]["kappa"],
            c=resolved["cost"]["c"],
            gamma=resolved["cost"]["gamma"],
            zeta=resolved["cost"]["zeta"],
        )
    except (DomainError, ValueError) as err:
        raise ConfigError(f"cost: {err}") from err
    try:
        supply = SupplySpec(kind=resolved["supply"]["kind"], q0=resolved["supply"]["q0"])
    except (DomainError, ValueError) as err:
        raise ConfigError(f"supply: {err}") from err
    try:
        init = InitialDist(mean=resolved["init"]["mean"], std=resolved["init"]["std"])
    except (DomainError, ValueError) as err:
        raise ConfigError(f"init: {err}") from err
    try:
        grid = TimeGrid(horizon=resolved["grid"]["horizon"], steps=resolved["grid"]["steps"])
    except (DomainError, ValueError) as err:
        raise ConfigError(f"grid: {err}") from err

    tr = resolved["train"]
    if tr["iterations"] < 1 or tr["sample_size"] < 1 or tr["epoch_length"] < 1:
        raise ConfigError("train: iterations, sample_size, and epoch_length must be positive")
    npl = resolved["nplayer"]
    if npl["players"] < 1:
        raise ConfigError("nplayer.players: must be at least 1")
    if npl["tolerance"] <= 0.0:
        raise ConfigError("nplayer.tolerance: must be positive")
    if npl["rho"] < 0.0:
        raise ConfigError("nplayer.rho: must be nonnegative (0 selects the default)")

    out_dir = out or resolved["output"]["directory"] or os.path.join(
        "runs", resolved["experiment"]["name"]
    )
    return RunConfig(
        name=resolved["experiment"]["name"],
        arch=resolved["experiment"]["arch"],
        cost=cost,
        supply=supply,
        init=init,
        grid=grid,
        train=dict(tr),
        nplayer=dict(npl),
        out_dir=out_dir,
        config_hash=config_hash(resolved),
        resolved=resolved,
    )


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


class _DirLock:
    """One run per output directory, enforced by an exclusive marker file."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run (remove {self.path} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def _dump_residuals(out_dir: str, report: ResidualReport):
    n, m_int = report.eps_run.shape
    rows = []
    for i in range(n):
        rows.append((i, 0, _fmt(report.eps_run0[i])))
        for k in range(m_int):
            rows.append((i, k + 1, _fmt(report.eps_run[i, k])))
    _write_csv(os.path.join(out_dir, "eps_run.csv"), ("agent", "k", "eps_run"), rows)
    _write_csv(
        os.path.join(out_dir, "eps_T.csv"),
        ("agent", "eps_T"),
        [(i, _fmt(report.eps_t[i])) for i in range(n)],
    )
    q_rows = [(0, _fmt(report.eps_q0))] + [
        (k + 1, _fmt(report.eps_q[k])) for k in range(m_int)
    ]
    _write_csv(os.path.join(out_dir, "eps_q.csv"), ("k", "eps_q"), q_rows)


def _residual_summary(report: ResidualReport) -> dict:
    return {
        "eps_run_norm": report.eps_run_norm,
        "eps_T_norm": report.eps_t_norm,
        "eps_q_norm": report.eps_q_norm,
        "estimate": report.estimate,
    }


def _write_meta(out_dir: str, t0: float, aborted: bool = False):
    _write_json(
        os.path.join(out_dir, "run_meta.json"),
        {"elapsed_seconds": time.perf_counter() - t0, "aborted": aborted},
    )


# ---------------------------------------------------------------------------
# control field evaluation for the error grid


def _control_on_grid(run: RunConfig, theta_v, prices: np.ndarray, xs: np.ndarray):
    """Network control at every (node, x) pair, (M+1, len(xs))."""
    grid, q = run.grid, supply_on_grid(run.supply, run.grid)
    st, sq = input_scales(grid, q, run.train["input_scaling"])
    t = grid.nodes
    nx = xs.size
    out = np.empty((grid.steps + 1, nx))
    if run.arch == "rnn":
        a = np.empty(grid.steps + 1)
        h = zero_hidden_state()
        for k in range(grid.steps + 1):
            ak, h = rnn_hidden_step_eval(theta_v, q[k] * sq, h)
            a[k] = ak[0, 0]
    for k in range(grid.steps + 1):
        base = [np.full(nx, t[k] * st), xs, np.full(nx, prices[k])]
        if run.arch == "rnn":
            base.append(np.full(nx, a[k]))
        out[k] = mlp_eval(theta_v, np.vstack(base))[0]
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(run: RunConfig) -> int:
    t0 = time.perf_counter()
    out = run.out_dir
    q_nodes = supply_on_grid(run.supply, run.grid)
    m = run.grid.steps

    if run.cost.kind == QUADRATIC:
        reference = lq_price(run.cost, run.supply, run.grid, run.init.mean)
    else:
        x0_bench = sample_initial_positions(
            run.init, run.nplayer["players"], run.nplayer["seed"]
        )
        bench = nplayer_solve(
            run.cost,
            x0_bench,
            run.supply,
            run.grid,
            tol=run.nplayer["tolerance"],
            rho=run.nplayer["rho"] or None,
            max_outer=run.nplayer["max_outer"],
        )
        batch_to_csv(bench.to_batch(), os.path.join(out, "benchmark.csv"))
        # the terminal multiplier is a different object; compare before it
        reference = bench.price[:m]

    tc = TrainConfig(
        cost=run.cost,
        supply=run.supply,
        init=run.init,
        grid=run.grid,
        arch=run.arch,
        iterations=run.train["iterations"],
        sample_size=run.train["sample_size"],
        epoch_length=run.train["epoch_length"],
        lr_control=run.train["lr_control"],
        lr_price=run.train["lr_price"],
        seed=run.train["seed"],
        input_scaling=run.train["input_scaling"],
        reference_price=reference,
    )
    trainer = Trainer(tc)

    ckpt = os.path.join(out, "checkpoints")
    os.makedirs(ckpt, exist_ok=True)

    def on_epoch(rec, tv, tw):
        save_params(tv, os.path.join(ckpt, f"theta_v_epoch{rec.epoch:04d}.json"))
        save_params(tw, os.path.join(ckpt, f"theta_w_epoch{rec.epoch:04d}.json"))

    aborted = False
    try:
        log = run_loop(trainer, on_epoch)
    except NonFiniteError as err:
        log = err.partial_log
        aborted = True

    _write_csv(
        os.path.join(out, "trainlog.csv"),
        ("epoch", "iter", "loss", "eps_run_norm", "eps_T_norm", "eps_q_norm",
         "estimate", "price_l2_err", "price_linf_err", "seconds"),
        [
            (r.epoch, r.iteration, _fmt(r.loss), _fmt(r.eps_run_norm),
             _fmt(r.eps_t_norm), _fmt(r.eps_q_norm), _fmt(r.estimate),
             _fmt(r.price_l2_err), _fmt(r.price_linf_err), _fmt(r.seconds))
            for r in log.records
        ],
    )
    _write_csv(
        os.path.join(out, "residual_trace.csv"),
        ("epoch", "eps_run_norm", "eps_T_norm", "eps_q_norm", "estimate"),
        [
            (r.epoch, _fmt(r.eps_run_norm), _fmt(r.eps_t_norm),
             _fmt(r.eps_q_norm), _fmt(r.estimate))
            for r in log.records
        ],
    )
    save_params(trainer.theta_v, os.path.join(out, "theta_v.json"))
    save_params(trainer.theta_w, os.path.join(out, "theta_w.json"))

    nn_price = price_curve(
        trainer.theta_w, run.arch, run.grid, q_nodes, run.train["input_scaling"]
    )
    t = run.grid.nodes
    n_ref = len(reference)
    _write_csv(
        os.path.join(out, "price_curve.csv"),
        ("t", "price_oracle", "price_nn", "abs_err"),
        [
            (_fmt(t[k]), _fmt(reference[k]), _fmt(nn_price[k]),
             _fmt(abs(reference[k] - nn_price[k])))
            for k in range(n_ref)
        ],
    )

    if run.cost.kind == QUADRATIC and not aborted:
        coeffs = lq_coefficients(run.cost, reference, run.grid)
        dens = lq_density(run.init, coeffs, reference, run.grid)
        xs = np.linspace(-1.0, 1.0, 21)
        v_nn = _control_on_grid(run, trainer.theta_v, nn_price, xs)
        rows = []
        for k in range(m + 1):
            v_or = lq_feedback(coeffs, reference, k, xs)
            weight = np.exp(-((xs - dens.mean[k]) ** 2) / (2.0 * dens.std[k] ** 2)) / (
                dens.std[k] * math.sqrt(2.0 * math.pi)
            )
            for j, x in enumerate(xs):
                err = abs(v_or[j] - v_nn[k, j])
                rows.append(
                    (_fmt(t[k]), _fmt(x), _fmt(v_or[j]), _fmt(v_nn[k, j]),
                     _fmt(err), _fmt(err * weight[j]))
                )
        _write_csv(
            os.path.join(out, "control_error_grid.csv"),
            ("t", "x", "v_oracle", "v_nn", "abs_err", "m_weighted_err"),
            rows,
        )

    summary = {
        "experiment": run.name,
        "command": "train",
        "arch": run.arch,
        "config_hash": run.config_hash,
        "iterations_run": trainer.iteration,
        "aborted": aborted,
    }
    if log.records:
        last = log.records[-1]
        summary.update(
            final_loss=_finite_or_none(last.loss),
            eps_run_norm=_finite_or_none(last.eps_run_norm),
            eps_T_norm=_finite_or_none(last.eps_t_norm),
            eps_q_norm=_finite_or_none(last.eps_q_norm),
            estimate=_finite_or_none(last.estimate),
            price_l2_err=_finite_or_none(last.price_l2_err),
            price_linf_err=_finite_or_none(last.price_linf_err),
        )
    if trainer.last_batch is not None:
        _dump_residuals(out, residuals(trainer.last_batch, run.cost))
    _write_json(os.path.join(out, "summary.json"), summary)
    _write_meta(out, t0, aborted)
    return 3 if aborted else 0


def cmd_oracle(run: RunConfig) -> int:
    t0 = time.perf_counter()
    out = run.out_dir
    try:
        price = lq_price(run.cost, run.supply, run.grid, run.init.mean)
        coeffs = lq_coefficients(run.cost, price, run.grid)
        dens = lq_density(run.init, coeffs, price, run.grid)
    except WrongCostKind as err:
        raise ConfigError(f"cost.kind: {err}") from err

    grid = run.grid
    t = grid.nodes
    _write_csv(
        os.path.join(out, "price_curve.csv"),
        ("t", "price"),
        [(_fmt(t[k]), _fmt(price[k])) for k in range(grid.steps + 1)],
    )
    _write_csv(
        os.path.join(out, "coefficients.csv"),
        ("t", "a0", "a1", "a2"),
        [
            (_fmt(t[k]), _fmt(coeffs.a0[k]), _fmt(coeffs.a1[k]), _fmt(coeffs.a2[k]))
            for k in range(grid.steps + 1)
        ],
    )
    _write_csv(
        os.path.join(out, "density.csv"),
        ("t", "mean", "std"),
        [(_fmt(t[k]), _fmt(dens.mean[k]), _fmt(dens.std[k])) for k in range(grid.steps + 1)],
    )

    x0 = sample_initial_positions(run.init, run.train["sample_size"], run.train["seed"])
    n, m, dt = x0.size, grid.steps, grid.dt
    X = np.empty((n, m + 1))
    v = np.empty((n, m + 1))
    X[:, 0] = x0
    for k in range(m):
        v[:, k] = lq_feedback(coeffs, price, k, X[:, k])
        X[:, k + 1] = X[:, k] + dt * v[:, k]
    v[:, m] = lq_feedback(coeffs, price, m, X[:, m])
    batch = TrajectoryBatch(
        grid=grid, X=X, v=v, price=price.copy(), supply=supply_on_grid(run.supply, grid)
    )
    batch_to_csv(batch, os.path.join(out, "trajectories.csv"))

    _write_json(
        os.path.join(out, "summary.json"),
        {
            "experiment": run.name,
            "command": "oracle",
            "config_hash": run.config_hash,
            "price_t0": price[0],
            "price_T": price[-1],
            "a2_T": coeffs.a2[-1],
            "mean_T": dens.mean[-1],
            "std_T": dens.std[-1],
        },
    )
    _write_meta(out, t0)
    return 0


def cmd_nplayer(run: RunConfig) -> int:
    t0 = time.perf_counter()
    out = run.out_dir
    x0 = sample_initial_positions(run.init, run.nplayer["players"], run.nplayer["seed"])
    sol = nplayer_solve(
        run.cost,
        x0,
        run.supply,
        run.grid,
        tol=run.nplayer["tolerance"],
        rho=run.nplayer["rho"] or None,
        max_outer=run.nplayer["max_outer"],
    )
    batch_to_csv(sol.to_batch(), os.path.join(out, "benchmark.csv"))
    t = run.grid.nodes
    _write_csv(
        os.path.join(out, "price_curve.csv"),
        ("t", "price"),
        [(_fmt(t[k]), _fmt(sol.price[k])) for k in range(run.grid.steps + 1)],
    )
    _write_json(
        os.path.join(out, "summary.json"),
        {
            "experiment": run.name,
            "command": "nplayer",
            "config_hash": run.config_hash,
            "players": run.nplayer["players"],
            "tolerance": run.nplayer["tolerance"],
            "iterations": sol.iterations,
            "balance_residual": sol.balance_residual,
            "certified": sol.certified,
        },
    )
    _write_meta(out, t0)
    return 0


def cmd_residuals(run: RunConfig, batch_csv: str) -> int:
    t0 = time.perf_counter()
    out = run.out_dir
    if not os.path.isfile(batch_csv):
        raise ConfigError(f"batch file not found: {batch_csv}")
    batch = batch_from_csv(batch_csv)
    report = residuals(batch, run.cost)
    _dump_residuals(out, report)
    summary = {
        "experiment": run.name,
        "command": "residuals",
        "config_hash": run.config_hash,
        "batch_agents": batch.n_agents,
        "batch_steps": batch.grid.steps,
    }
    summary.update(_residual_summary(report))
    _write_json(os.path.join(out, "summary.json"), summary)
    _write_meta(out, t0)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgprice",
        description="Train and certify neural price-formation solvers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "run the adversarial training loop",
        "oracle": "emit the closed-form quadratic benchmark",
        "nplayer": "emit the finite-population benchmark",
        "residuals": "certify a trajectory CSV",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument(
            "--iterations", type=int, default=None, help="override train.iterations"
        )
        if name == "residuals":
            p.add_argument("batch_csv", help="trajectory CSV to certify")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = load_run_config(
            args.config, out=args.out, seed=args.seed, iterations=args.iterations
        )
        os.makedirs(run.out_dir, exist_ok=True)
        with _DirLock(run.out_dir):
            if args.command == "train":
                return cmd_train(run)
            if args.command == "oracle":
                return cmd_oracle(run)
            if args.command == "nplayer":
                return cmd_nplayer(run)
            return cmd_residuals(run, args.batch_csv)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (NonFiniteError, NonConvergenceError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
