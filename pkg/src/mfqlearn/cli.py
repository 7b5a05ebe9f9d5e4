"""Command line entry point: ``mfqlearn oracle|run|diagnose``."""
from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import config as cfgmod
from .diagnostics import first_order_check, martingale_loss, policy_improvement_check
from .params import family_for, state_args
from .qlearn import DivergenceError, run_offline, run_online

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _load(path, seed, episodes):
    try:
        exp = cfgmod.load(path)
    except cfgmod.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if seed is not None:
        exp.learning.seed = seed
    if episodes is not None:
        if episodes < 0:
            click.echo("config error: --episodes must be nonnegative", err=True)
            sys.exit(EXIT_CONFIG)
        exp.learning.N = episodes
    return exp


def _out_dir(out, exp):
    d = out or exp.out_dir or "."
    os.makedirs(d, exist_ok=True)
    return d


def _named(names, values):
    return {n: float(v) for n, v in zip(names, values)}


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


@click.group()
def main():
    """Continuous-time q-learning for mean-field control."""


@main.command()
@click.option("--config", "config_path", required=True, help="TOML/JSON config or preset name.")
@click.option("--out", default=None, help="Output directory.")
def oracle(config_path, out):
    """Print and save the closed-form optimal parameters."""
    exp = _load(config_path, None, None)
    fam = family_for(exp.model)
    theta, psi = fam.true_params()
    payload = {"model": exp.model.kind, "theta": _named(fam.theta_names, theta), "psi": _named(fam.psi_names, psi)}
    names = [*fam.theta_names, *fam.psi_names]
    click.echo(" ".join(f"{n:>12}" for n in names))
    click.echo(" ".join(f"{v:>12.6g}" for v in [*theta, *psi]))
    _write_json(os.path.join(_out_dir(out, exp), "oracle.json"), payload)


@main.command()
@click.option("--config", "config_path", required=True, help="TOML/JSON config or preset name.")
@click.option("--mode", type=click.Choice(["offline", "online"]), default="offline", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", default=None, help="Output directory.")
@click.option("--episodes", type=int, default=None, help="Override the number of episodes.")
def run(config_path, mode, seed, out, episodes):
    """Run offline or online q-learning and write history.csv and final.json."""
    exp = _load(config_path, seed, episodes)
    d = _out_dir(out, exp)
    lc = exp.learning
    if lc.checkpoint_every:
        lc.checkpoint_dir = os.path.join(d, "checkpoints")
    fam = family_for(exp.model)
    runner = run_offline if mode == "offline" else run_online
    status = "completed"
    try:
        history = runner(lc, exp.model)
    except DivergenceError as exc:
        history = exc.history
        status = "diverged"
        click.echo(str(exc), err=True)
    history.to_csv(os.path.join(d, "history.csv"))
    theta = history.theta if history.theta is not None else np.asarray(lc.theta0, dtype=float)
    psi = history.psi if history.psi is not None else np.asarray(lc.psi0, dtype=float)
    theta_star, psi_star = fam.true_params()
    _write_json(os.path.join(d, "final.json"), {
        "model": exp.model.kind,
        "mode": mode,
        "seed": lc.seed,
        "episodes": len(history),
        "status": status,
        "theta": _named(fam.theta_names, theta),
        "psi": _named(fam.psi_names, psi),
        "theta_true": _named(fam.theta_names, theta_star),
        "psi_true": _named(fam.psi_names, psi_star),
    })
    click.echo(" ".join(f"{n}={v:.6g}" for n, v in [*zip(fam.theta_names, theta), *zip(fam.psi_names, psi)]))
    if status == "diverged":
        sys.exit(EXIT_DIVERGED)


def _read_params(path, fam):
    try:
        with open(path) as fh:
            raw = json.load(fh)
        theta = np.array([raw["theta"][n] for n in fam.theta_names], dtype=float)
        psi = np.array([raw["psi"][n] for n in fam.psi_names], dtype=float)
    except FileNotFoundError:
        raise click.ClickException(f"parameter file not found: {path}")
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"malformed parameter file {path}: {exc}")
    return theta, psi


@main.command()
@click.option("--config", "config_path", required=True, help="TOML/JSON config or preset name.")
@click.option("--params", "params_path", default=None, help="JSON with theta/psi (e.g. final.json); default: oracle.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", default=None, help="Output directory.")
def diagnose(config_path, params_path, seed, out):
    """Martingale loss, first-order residuals and policy-improvement values."""
    exp = _load(config_path, seed, None)
    model, lc, dg = exp.model, exp.learning, exp.diagnostics
    fam = family_for(model)
    theta_star, psi_star = fam.true_params()
    if params_path is None:
        theta, psi = theta_star, psi_star
    else:
        theta, psi = _read_params(params_path, fam)
    if dg.n_test_policies < 1:
        click.echo("config error: [diagnostics] n_test_policies must be at least 1", err=True)
        sys.exit(EXIT_CONFIG)
    rng = np.random.default_rng(lc.seed)
    tests = psi * rng.uniform(*lc.bounds(1), size=(dg.n_test_policies, len(psi)))
    report = martingale_loss(theta, psi, tests, model, lc.dt, lc.K, lc.initial_state, psi_star=psi_star,
                             reward_variant=lc.reward_variant)
    residuals = first_order_check(model, theta, psi, dg.first_order_t, lc.initial_state, tests[0], dg.dt_list)
    improvement = policy_improvement_check(psi, model, dg.improvement_iters, lc.initial_state)
    j_star = float(fam.value(theta_star, 0.0, *state_args(lc.initial_state)))
    payload = {
        "model": model.kind,
        "theta": _named(fam.theta_names, theta),
        "psi": _named(fam.psi_names, psi),
        "loss": report.to_dict(),
        "first_order": {"t": dg.first_order_t, "dt": dg.dt_list, "residual": [float(r) for r in residuals]},
        "improvement": {"monotone": improvement.monotone, "values": improvement.values, "optimal_value": j_star},
    }
    _write_json(os.path.join(_out_dir(out, exp), "report.json"), payload)
    click.echo(f"martingale_loss={report.martingale_loss:.6g} l1_error={report.l1_error:.6g} "
               f"improvement_monotone={improvement.monotone}")


if __name__ == "__main__":
    main()
