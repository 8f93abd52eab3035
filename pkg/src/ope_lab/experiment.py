"""Sweeps over the action-space size: config parsing, execution and report files."""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import OPELabError
from .estimators import FeatureConfig
from .oracle import (
    CSV_FIELDS,
    ESTIMATOR_NAMES,
    EvalReport,
    EstimatorSummary,
    VisitationExpectation,
    format_value,
    monte_carlo_eval,
    true_value,
)
from .synthetic import EnvConfig, init_env

SEED_ENV_VAR = "OPE_LAB_SEED"


class ConfigError(OPELabError):
    code = "config"
    exit_code = 1


class ConfigNotFoundError(ConfigError):
    code = "missing_file"
    exit_code = 3


class ConfigSyntaxError(ConfigError):
    code = "syntax"


class ConfigValidationError(ConfigError):
    code = "constraint"


@dataclass(frozen=True)
class SweepConfig:
    action_space_grid: tuple[int, ...]
    n_samples: int = 10_000
    n_replications: int = 100
    estimators: tuple[str, ...] = ESTIMATOR_NAMES
    base_seed: int = 0
    pool_size: int | None = None
    truth_samples: int = 100_000
    dim_context: int = 10
    cardinalities: tuple[int, ...] = (10, 10, 10)
    beta: float = 0.0
    epsilon: float = 0.05
    reward_noise_sd: float = 1.0
    direct_effect_strength: float = 0.0
    ridge_lambda: float = 1.0
    context_features: bool = True
    embedding_features: bool = True
    action_features: bool = False
    refit: bool = True
    out_dir: str = "results"

    def __post_init__(self) -> None:
        grid = tuple(self.action_space_grid)
        if not grid:
            raise ConfigValidationError("action_space_grid must not be empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigValidationError("action_space_grid must be strictly ascending")
        if grid[0] < 2:
            raise ConfigValidationError("action_space_grid entries must be at least 2")
        if self.n_replications < 2:
            raise ConfigValidationError("n_replications must be at least 2")
        if self.n_samples < 1:
            raise ConfigValidationError("n_samples must be positive")
        if self.truth_samples < 2:
            raise ConfigValidationError("truth_samples must be at least 2")
        if not self.estimators:
            raise ConfigValidationError("estimators must not be empty")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown:
            raise ConfigValidationError(f"unknown estimators: {', '.join(unknown)}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigValidationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.ridge_lambda < 0:
            raise ConfigValidationError("ridge_lambda must be non-negative")
        try:
            self.env_config(grid[0])
        except OPELabError as exc:
            raise ConfigValidationError(str(exc)) from exc

    @property
    def dim_embedding(self) -> int:
        return len(self.cardinalities)

    def env_config(self, n_actions: int) -> EnvConfig:
        return EnvConfig(
            n_actions=n_actions,
            dim_context=self.dim_context,
            cardinalities=self.cardinalities,
            beta=self.beta,
            epsilon=self.epsilon,
            reward_noise_sd=self.reward_noise_sd,
            direct_effect_strength=self.direct_effect_strength,
            pool_size=self.pool_size,
        )

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.context_features, self.embedding_features, self.action_features)


# section -> (key -> field name); keys equal field names except where noted
_SECTIONS: dict[str, tuple[str, ...]] = {
    "sweep": ("action_space_grid", "n_samples", "n_replications", "estimators", "base_seed",
              "pool_mode", "truth_samples"),
    "env": ("dim_context", "dim_embedding", "cardinalities", "beta", "epsilon", "reward_noise_sd",
            "direct_effect_strength"),
    "model": ("ridge_lambda", "context_features", "embedding_features", "action_features", "refit"),
    "output": ("out_dir",),
}


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_INT = {"n_samples", "n_replications", "base_seed", "truth_samples", "dim_context", "dim_embedding"}
_FLOAT = {"beta", "epsilon", "reward_noise_sd", "direct_effect_strength", "ridge_lambda"}
_BOOL = {"context_features", "embedding_features", "action_features", "refit"}


def _convert(key: str, raw: str):
    if key in _INT:
        return int(raw)
    if key in _FLOAT:
        return float(raw)
    if key in _BOOL:
        return _bool(raw)
    if key in ("action_space_grid", "cardinalities"):
        return _int_list(raw)
    if key == "estimators":
        return tuple(v.strip().lower() for v in raw.split(",") if v.strip())
    if key == "pool_mode":
        return None if raw.strip().lower() in ("off", "none", "") else int(raw)
    return raw.strip()


def config_from_text(text: str) -> SweepConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigSyntaxError(str(exc)) from exc

    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigValidationError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigValidationError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigValidationError(f"bad value for {key!r}: {exc}") from exc

    if "action_space_grid" not in values:
        raise ConfigValidationError("missing required key 'action_space_grid' in [sweep]")
    d_e = values.pop("dim_embedding", None)
    cards = values.get("cardinalities")
    if cards is not None and len(cards) == 1 and d_e is not None:
        values["cardinalities"] = cards * d_e
    elif cards is None and d_e is not None:
        values["cardinalities"] = (10,) * d_e
    elif cards is not None and d_e is not None and len(cards) != d_e:
        raise ConfigValidationError("dim_embedding disagrees with the length of cardinalities")
    if "pool_mode" in values:
        values["pool_size"] = values.pop("pool_mode")
    try:
        return SweepConfig(**values)
    except TypeError as exc:
        raise ConfigValidationError(str(exc)) from exc


def parse_config(path: str | os.PathLike) -> SweepConfig:
    """Read and validate an INI-style sweep config; defaults fill every optional key."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigNotFoundError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigNotFoundError(f"cannot read config file {path}: {exc}") from exc
    config = config_from_text(text)
    seed = os.environ.get(SEED_ENV_VAR)
    if seed:
        try:
            config = replace(config, base_seed=int(seed))
        except ValueError as exc:
            raise ConfigValidationError(f"{SEED_ENV_VAR} must be an integer") from exc
    return config


def config_to_text(config: SweepConfig) -> str:
    def fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    values = {f.name: getattr(config, f.name) for f in fields(config)}
    values["pool_mode"] = "off" if values.pop("pool_size") is None else config.pool_size
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in _SECTIONS.items():
        parser[section] = {k: fmt(values[k]) for k in keys if k in values}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


@dataclass
class ResultTable:
    reports: list[EvalReport] = field(default_factory=list)

    def rows(self) -> list[dict]:
        rows = [row for report in self.reports for row in report.rows()]
        return sorted(rows, key=lambda r: (r["n_actions"], r["estimator"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: format_value(v) for k, v in row.items()})
        return buf.getvalue()

    def __len__(self) -> int:
        return len(self.rows())


def read_results_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for key, value in row.items():
            if key == "estimator":
                parsed[key] = value
            elif key in ("n_actions", "n_samples", "n_replications", "failures"):
                parsed[key] = int(value)
            else:
                parsed[key] = float(value)
        out.append(parsed)
    return out


def _log(msg: str, verbose: bool) -> None:
    if verbose:
        print(msg, file=sys.stderr, flush=True)


def cell_truth(config: SweepConfig, env) -> VisitationExpectation:
    if env.pool_mode:
        return VisitationExpectation("pool-exact")
    return VisitationExpectation("monte-carlo", n_samples=config.truth_samples, seed=config.base_seed)


def run_cell(config: SweepConfig, n_actions: int) -> EvalReport:
    env = init_env(config.env_config(n_actions), seed=(config.base_seed, n_actions))
    return monte_carlo_eval(
        env,
        config.estimators,
        n=config.n_samples,
        R=config.n_replications,
        base_seed=(config.base_seed, n_actions, 1),
        refit=config.refit,
        feature_config=config.feature_config,
        ridge_lambda=config.ridge_lambda,
        truth=cell_truth(config, env),
    )


def run_sweep(config: SweepConfig, verbose: bool = True) -> ResultTable:
    """Evaluate every requested estimator at every action-space size in the grid.

    A cell that fails outright is recorded with NaN statistics and
    ``failures = n_replications``; the sweep carries on.
    """
    table = ResultTable()
    for n_actions in config.action_space_grid:
        _log(f"[ope-lab] |A|={n_actions}: {config.n_replications} replications of n={config.n_samples}", verbose)
        try:
            report = run_cell(config, n_actions)
        except (OPELabError, ArithmeticError, MemoryError) as exc:
            _log(f"[ope-lab] |A|={n_actions} failed: {exc}", verbose)
            report = EvalReport(n_actions, config.n_samples, math.nan, math.nan)
            for name in config.estimators:
                report.summaries[name] = EstimatorSummary(name, np.zeros(0), math.nan, config.n_replications)
        table.reports.append(report)
    return table


def oracle_values(config: SweepConfig) -> list[tuple[int, float, float]]:
    out = []
    for n_actions in config.action_space_grid:
        env = init_env(config.env_config(n_actions), seed=(config.base_seed, n_actions))
        tv = true_value(env, mode=cell_truth(config, env))
        out.append((n_actions, tv.value, tv.standard_error))
    return out


PANELS = (("mse", "MSE"), ("bias", "|bias|"), ("variance", "variance"))
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def _svg_chart(rows: list[dict], metric: str, label: str) -> str:
    width, height = 480, 360
    left, right, top, bottom = 70, 110, 30, 50
    series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        y = abs(row[metric]) if metric == "bias" else row[metric]
        if math.isfinite(y):
            series.setdefault(row["estimator"], []).append((float(row["n_actions"]), y))
    xs = [x for pts in series.values() for x, _ in pts] or [1.0]
    ys = [y for pts in series.values() for _, y in pts if y > 0] or [1.0]
    floor = min(ys) / 10
    lx0, lx1 = math.log10(min(xs)), math.log10(max(xs))
    ly0, ly1 = math.floor(math.log10(floor)), math.ceil(math.log10(max(ys)))
    if lx1 - lx0 < 1e-12:
        lx0, lx1 = lx0 - 0.5, lx1 + 0.5
    if ly1 - ly0 < 1:
        ly1 = ly0 + 1

    def px(x: float) -> float:
        return left + (math.log10(x) - lx0) / (lx1 - lx0) * (width - left - right)

    def py(y: float) -> float:
        return top + (ly1 - math.log10(max(y, floor))) / (ly1 - ly0) * (height - top - bottom)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{(width - right + left) / 2:.1f}" y="18" text-anchor="middle" font-size="13">{label} vs |A|</text>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
    ]
    for x in sorted(set(xs)):
        out.append(f'<line x1="{px(x):.1f}" y1="{height - bottom}" x2="{px(x):.1f}" y2="{height - bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{px(x):.1f}" y="{height - bottom + 18}" text-anchor="middle">{int(x)}</text>')
    for p in range(int(ly0), int(ly1) + 1):
        y = py(10.0**p)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">1e{p}</text>')
    out.append(f'<text x="{(width - right + left) / 2:.1f}" y="{height - 10}" text-anchor="middle">number of actions</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(pts))
        out.append(f'<polyline class="series" data-estimator="{name}" points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in sorted(pts):
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 10 + 16 * i
        out.append(f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 35}" y="{ly + 4}">{name.upper()}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _summary(rows: list[dict]) -> str:
    lines = []
    for n_actions in sorted({r["n_actions"] for r in rows}):
        cell = [r for r in rows if r["n_actions"] == n_actions]
        ranked = sorted(cell, key=lambda r: (math.isnan(r["mse"]), r["mse"]))
        lines.append(f"|A| = {n_actions}  (true value {format_value(cell[0]['true_value'])})")
        for rank, r in enumerate(ranked, 1):
            lines.append(
                f"  {rank}. {r['estimator']:<5} mse={r['mse']:.6g} bias={r['bias']:.6g} "
                f"variance={r['variance']:.6g} failures={r['failures']}"
            )
    return "\n".join(lines) + "\n"


def emit_report(table: ResultTable | Sequence[dict], output_dir: str | os.PathLike) -> dict[str, Path]:
    """Write results.csv, summary.txt and one log-log SVG per metric (MSE, |bias|, variance)."""
    if isinstance(table, ResultTable):
        rows, csv_text = table.rows(), table.to_csv()
    else:
        rows = sorted(table, key=lambda r: (r["n_actions"], r["estimator"]))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_value(row[k]) for k in CSV_FIELDS})
        csv_text = buf.getvalue()
    if not rows:
        raise ValueError("cannot emit a report for an empty table")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "summary": out / "summary.txt"}
    paths["csv"].write_text(csv_text)
    paths["summary"].write_text(_summary(rows))
    for metric, label in PANELS:
        paths[metric] = out / f"{metric}.svg"
        paths[metric].write_text(_svg_chart(rows, metric, label))
    return paths
