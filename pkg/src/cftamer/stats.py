"""Evaluation protocol and statistics over completed runs.

Frozen-policy evaluation on fixed seeds, interquartile means with fractional
quartile trimming, percentile bootstrap intervals, and the pairwise
probability of improvement on optimality gaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tamer
from .envs import Environment, ScoreNorms, normalized_score

EVAL_SEEDS = tuple(range(1000, 1010))
DEFAULT_RESAMPLES = 2000


class GridMismatch(ValueError):
    """Runs with incompatible checkpoint grids cannot be aggregated."""


@dataclass
class RunRecord:
    env: str
    variant: str
    seed: int
    checkpoints: list  # list[tamer.Checkpoint], env_steps strictly increasing

    def scores(self) -> list:
        return [c.score for c in self.checkpoints]


@dataclass
class MetricSummary:
    point: float
    ci_low: float
    ci_high: float
    n_runs: int
    n_resamples: int


@dataclass
class ComparisonResult:
    variant_x: str
    variant_y: str
    poi: float
    ci_low: float
    ci_high: float


def _greedy_rollout(action_fn, env: Environment, seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    obs = env.reset(seed)
    total = 0.0
    while True:
        result = env.step(action_fn(obs, env.hidden_state, rng))
        total += result.reward
        obs = result.observation
        if result.done:
            return total


def evaluate_policy_fn(action_fn, env: Environment, eval_seeds, norms: ScoreNorms) -> float:
    """Mean normalized score of a frozen policy over the fixed eval seeds."""
    returns = [_greedy_rollout(action_fn, env, int(s)) for s in eval_seeds]
    return float(np.mean([normalized_score(r, norms) for r in returns]))


def evaluate_policy(model, env: Environment, eval_seeds, norms: ScoreNorms) -> float:
    """Frozen greedy evaluation of an H-model: no updates, no feedback."""
    return evaluate_policy_fn(
        lambda obs, hidden, rng: tamer.select_action(model, obs, rng),
        env,
        eval_seeds,
        norms,
    )


def iqm(values) -> float:
    """Mean of the middle 50%, fractionally weighted at the quartile cuts."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("iqm of empty input")
    ordered = np.sort(values)
    n = ordered.size
    lo, hi = n / 4.0, 3.0 * n / 4.0
    idx = np.arange(n)
    weights = np.clip(np.minimum(idx + 1, hi) - np.maximum(idx, lo), 0.0, 1.0)
    return float(weights @ ordered / weights.sum())


def optimality_gap(record: RunRecord) -> float:
    """Mean per-checkpoint shortfall from the perfect score of 1 (floored at 0)."""
    if not record.checkpoints:
        raise ValueError("run has no checkpoints")
    return float(np.mean([max(0.0, 1.0 - c.score) for c in record.checkpoints]))


def bootstrap_ci(
    values,
    statistic=np.mean,
    level: float = 0.95,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> MetricSummary:
    """Percentile bootstrap of `statistic`; deterministic given the seed."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        raise ValueError("bootstrap needs at least 2 values")
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, n, size=(n_resamples, n))
    stats = np.array([float(statistic(values[row])) for row in indices])
    alpha = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(stats, [alpha, 100.0 - alpha])
    return MetricSummary(
        point=float(statistic(values)),
        ci_low=float(low),
        ci_high=float(high),
        n_runs=n,
        n_resamples=n_resamples,
    )


def paired_difference_ci(
    values_x,
    values_y,
    level: float = 0.95,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> MetricSummary:
    """Bootstrap CI of mean(x_i - y_i) over seed-paired runs."""
    x = np.asarray(values_x, dtype=np.float64)
    y = np.asarray(values_y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("paired comparison needs equal-length runs")
    return bootstrap_ci(x - y, np.mean, level, n_resamples, seed)


def _poi_point(gaps_x, gaps_y) -> float:
    x = np.asarray(gaps_x, dtype=np.float64)[:, None]
    y = np.asarray(gaps_y, dtype=np.float64)[None, :]
    return float(np.mean((x < y) + 0.5 * (x == y)))


def probability_of_improvement(
    gaps_x,
    gaps_y,
    variant_x: str = "x",
    variant_y: str = "y",
    level: float = 0.95,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> ComparisonResult:
    """P(X attains a lower optimality gap than Y), ties counted half.

    The interval comes from a stratified bootstrap: both run lists are
    resampled independently.
    """
    x = np.asarray(gaps_x, dtype=np.float64)
    y = np.asarray(gaps_y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("probability of improvement needs non-empty inputs")
    point = _poi_point(x, y)
    rng = np.random.default_rng(seed)
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        rx = x[rng.integers(0, x.size, size=x.size)]
        ry = y[rng.integers(0, y.size, size=y.size)]
        stats[i] = _poi_point(rx, ry)
    alpha = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(stats, [alpha, 100.0 - alpha])
    return ComparisonResult(variant_x, variant_y, point, float(low), float(high))


@dataclass
class AggregateReport:
    curves: list = field(default_factory=list)  # dict rows, curves.csv schema
    gaps: list = field(default_factory=list)  # dict rows, gaps.csv schema
    poi: list = field(default_factory=list)  # dict rows, poi.csv schema


def _check_grids(records) -> None:
    cadences = {}
    for r in records:
        steps = [c.env_steps for c in r.checkpoints]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise GridMismatch(f"run {r.env}/{r.variant}/seed{r.seed}: env_steps not increasing")
        diffs = {b - a for a, b in zip(steps, steps[1:])}
        if len(diffs) > 1:
            raise GridMismatch(
                f"run {r.env}/{r.variant}/seed{r.seed}: mixed checkpoint cadence {sorted(diffs)}"
            )
        if diffs:
            cadence = diffs.pop()
            prev = cadences.setdefault(r.env, cadence)
            if prev != cadence:
                raise GridMismatch(
                    f"env {r.env}: cadence {cadence} of seed {r.seed} != {prev} seen earlier"
                )


def aggregate(
    records,
    compare=None,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> AggregateReport:
    """Per (env, variant) IQM curves, IQM optimality gaps, and a POI matrix."""
    records = list(records)
    _check_grids(records)
    report = AggregateReport()
    groups: dict = {}
    for r in records:
        groups.setdefault((r.env, r.variant), []).append(r)

    for (env, variant), runs in sorted(groups.items()):
        step_values: dict = {}
        for run in runs:
            for c in run.checkpoints:
                step_values.setdefault(c.env_steps, []).append(c.score)
        for env_steps in sorted(step_values):
            scores = step_values[env_steps]
            if len(scores) >= 2:
                summary = bootstrap_ci(scores, iqm, n_resamples=n_resamples, seed=seed)
                low, high = summary.ci_low, summary.ci_high
            else:
                low = high = iqm(scores)
            report.curves.append(
                {
                    "env": env,
                    "variant": variant,
                    "env_steps": env_steps,
                    "iqm": iqm(scores),
                    "ci_low": low,
                    "ci_high": high,
                    "n": len(scores),
                }
            )

    gap_lists: dict = {}
    for (env, variant), runs in sorted(groups.items()):
        gaps = [optimality_gap(r) for r in runs]
        gap_lists[(env, variant)] = gaps
        report.gaps.append(_gap_row(env, variant, gaps, n_resamples, seed))
    envs_present = sorted({env for env, _ in groups})
    if len(envs_present) > 1:
        pooled: dict = {}
        for (env, variant), gaps in gap_lists.items():
            pooled.setdefault(variant, []).extend(gaps)
        for variant in sorted(pooled):
            report.gaps.append(_gap_row("pooled", variant, pooled[variant], n_resamples, seed))

    for env in envs_present:
        variants = sorted({v for e, v in groups if e == env})
        pairs = compare if compare is not None else [
            (a, b) for a in variants for b in variants
        ]
        for vx, vy in pairs:
            if (env, vx) not in gap_lists or (env, vy) not in gap_lists:
                continue
            result = probability_of_improvement(
                gap_lists[(env, vx)],
                gap_lists[(env, vy)],
                vx,
                vy,
                n_resamples=n_resamples,
                seed=seed,
            )
            report.poi.append(
                {
                    "env": env,
                    "variant_x": vx,
                    "variant_y": vy,
                    "poi": result.poi,
                    "ci_low": result.ci_low,
                    "ci_high": result.ci_high,
                }
            )
    return report


def _gap_row(env, variant, gaps, n_resamples, seed) -> dict:
    if len(gaps) >= 2:
        summary = bootstrap_ci(gaps, iqm, n_resamples=n_resamples, seed=seed)
        low, high = summary.ci_low, summary.ci_high
    else:
        low = high = iqm(gaps)
    return {
        "env": env,
        "variant": variant,
        "iqm_gap": iqm(gaps),
        "ci_low": low,
        "ci_high": high,
        "n": len(gaps),
    }
