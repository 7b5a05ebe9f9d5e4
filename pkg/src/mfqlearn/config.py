"""Experiment configuration: TOML (or JSON) to model + learning settings."""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .models import CONSUMPTION, MEAN_VARIANCE, LogMeanState, MeanVarianceState, ModelSpec
from .models import make_consumption, make_mean_variance
from .qlearn import LearningConfig, PiecewiseSchedule, PowerBounds


class ConfigError(ValueError):
    pass


@dataclass
class DiagnosticsConfig:
    n_test_policies: int = 10
    dt_list: List[float] = field(default_factory=lambda: [0.04, 0.02, 0.01])
    first_order_t: float = 0.3
    improvement_iters: int = 5


@dataclass
class ExperimentConfig:
    model: ModelSpec
    learning: LearningConfig
    diagnostics: DiagnosticsConfig
    out_dir: Optional[str] = None
    source: str = "<memory>"


def _get(d: Dict[str, Any], key: str, section: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"[{section}] missing required field '{key}'")
        return default
    return d[key]


def _floats(v, where):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected numbers, got {v!r}") from exc
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: values must be finite")
    return arr


def _model(d):
    kind = _get(d, "kind", "model", required=True)
    try:
        if kind == MEAN_VARIANCE:
            return make_mean_variance(
                b=float(_get(d, "b", "model", required=True)),
                sigma=float(_get(d, "sigma", "model", required=True)),
                lam=float(_get(d, "lam", "model", required=True)),
                gamma=float(_get(d, "gamma", "model", required=True)),
                beta=float(_get(d, "beta", "model", 0.0)),
                T=float(_get(d, "T", "model", 1.0)),
            )
        if kind == CONSUMPTION:
            return make_consumption(
                b=float(_get(d, "b", "model", required=True)),
                sigma=float(_get(d, "sigma", "model", required=True)),
                beta=float(_get(d, "beta", "model", required=True)),
                gamma=float(_get(d, "gamma", "model", required=True)),
                T=float(_get(d, "T", "model", 1.0)),
            )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[model] {exc}") from exc
    raise ConfigError(f"[model] kind must be '{MEAN_VARIANCE}' or '{CONSUMPTION}', got {kind!r}")


def _schedule(entries, name):
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"[rates] '{name}' must be a non-empty list of {{from, rates}} tables")
    try:
        return PiecewiseSchedule(tuple(
            (int(e["from"]), _floats(e["rates"], f"[rates.{name}]")) for e in entries
        ))
    except KeyError as exc:
        raise ConfigError(f"[rates.{name}] entry missing field {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"[rates.{name}] {exc}") from exc


def _bounds(d):
    lo = _floats(_get(d, "lower", "bounds", required=True), "[bounds] lower")
    hi = _floats(_get(d, "upper", "bounds", required=True), "[bounds] upper")
    if lo.ndim != 2 or lo.shape[1] != 2 or hi.shape != lo.shape:
        raise ConfigError("[bounds] lower/upper must be lists of [coef, power] pairs of equal length")
    return PowerBounds(tuple(lo[:, 0]), tuple(lo[:, 1]), tuple(hi[:, 0]), tuple(hi[:, 1]))


def _initial_state(d, model):
    if model.kind == MEAN_VARIANCE:
        return MeanVarianceState(float(_get(d, "mean", "initial_state", 0.0)),
                                 float(_get(d, "var", "initial_state", 1.0)))
    return LogMeanState(float(_get(d, "log_mean", "initial_state", 0.0)))


def from_dict(raw: Dict[str, Any], source: str = "<memory>") -> ExperimentConfig:
    model = _model(_get(raw, "model", "root", required=True))
    lr = _get(raw, "learning", "root", required=True)
    rates = _get(raw, "rates", "root", required=True)
    dt = float(_get(lr, "dt", "learning", required=True))
    if dt <= 0:
        raise ConfigError("[learning] dt must be positive")
    K = int(round(model.T / dt))
    if abs(K * dt - model.T) > 1e-9:
        raise ConfigError(f"[learning] dt={dt} does not divide T={model.T}")
    learning = LearningConfig(
        dt=dt,
        K=K,
        N=int(_get(lr, "episodes", "learning", required=True)),
        M=int(_get(lr, "test_policies", "learning", required=True)),
        theta0=_floats(_get(lr, "theta0", "learning", required=True), "[learning] theta0"),
        psi0=_floats(_get(lr, "psi0", "learning", required=True), "[learning] psi0"),
        rate_theta=_schedule(_get(rates, "theta", "rates", required=True), "theta"),
        rate_psi=_schedule(_get(rates, "psi", "rates", required=True), "psi"),
        bounds=_bounds(_get(raw, "bounds", "root", required=True)),
        initial_state=_initial_state(raw.get("initial_state", {}), model),
        seed=int(_get(lr, "seed", "learning", 0)),
        reward_variant=str(_get(lr, "reward_variant", "learning", "exact")),
        checkpoint_every=int(_get(lr, "checkpoint_every", "learning", 0)),
        track_l1=bool(_get(lr, "track_l1", "learning", True)),
    )
    if learning.reward_variant not in ("exact", "printed"):
        raise ConfigError("[learning] reward_variant must be 'exact' or 'printed'")
    try:
        learning.validate(model)
    except ValueError as exc:
        raise ConfigError(f"[learning] {exc}") from exc
    dg = raw.get("diagnostics", {})
    diagnostics = DiagnosticsConfig(
        n_test_policies=int(dg.get("n_test_policies", 10)),
        dt_list=[float(v) for v in dg.get("dt_list", [0.04, 0.02, 0.01])],
        first_order_t=float(dg.get("first_order_t", 0.3)),
        improvement_iters=int(dg.get("improvement_iters", 5)),
    )
    out = raw.get("output", {}).get("dir")
    return ExperimentConfig(model, learning, diagnostics, out, source)


def load(path) -> ExperimentConfig:
    """Load a config file; a bare preset name (``mv_benchmark``) resolves to the bundled preset."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and resources.files("mfqlearn.presets").joinpath(f"{p.name}.toml").is_file():
        text = resources.files("mfqlearn.presets").joinpath(f"{p.name}.toml").read_text()
        suffix = ".toml"
    elif not p.exists():
        raise ConfigError(f"config file not found: {path}")
    else:
        text = p.read_text()
        suffix = p.suffix.lower()
    try:
        raw = json.loads(text) if suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, str(path))
