import numpy as np
import pytest

from cftamer import envs, oracle, stats, tamer
from cftamer.tamer import Checkpoint


def record(scores, env="gridworld", variant="vanilla", seed=0, cadence=500):
    return stats.RunRecord(
        env=env,
        variant=variant,
        seed=seed,
        checkpoints=[Checkpoint(i * cadence, s) for i, s in enumerate(scores)],
    )


class TestEvaluatePolicy:
    @pytest.fixture(scope="class")
    def mc_norms(self):
        expert_fn = oracle.expert_policy_fn(oracle.make_expert("mountaincar"))
        return envs.calibrate_norms(
            "mountaincar", expert_fn, stats.EVAL_SEEDS, n_random_episodes=200
        )

    def test_expert_scores_at_least_095(self, mc_norms):
        env = envs.make_env("mountaincar")
        expert_fn = oracle.expert_policy_fn(oracle.make_expert("mountaincar"))
        score = stats.evaluate_policy_fn(expert_fn, env, stats.EVAL_SEEDS, mc_norms)
        assert score >= 0.95

    def test_random_policy_scores_near_zero(self, mc_norms):
        env = envs.make_env("mountaincar")
        score = stats.evaluate_policy_fn(
            envs.random_policy(env), env, stats.EVAL_SEEDS, mc_norms
        )
        assert abs(score) <= 0.1

    def test_frozen_model_evaluates_identically(self, mc_norms):
        env = envs.make_env("mountaincar")
        model = tamer.init_model(env.obs_dim, env.n_actions, np.random.default_rng(0))
        a = stats.evaluate_policy(model, env, stats.EVAL_SEEDS, mc_norms)
        b = stats.evaluate_policy(model, env, stats.EVAL_SEEDS, mc_norms)
        assert a == b


class TestIqm:
    def test_four_values_drop_extremes(self):
        assert stats.iqm([1, 2, 3, 4]) == pytest.approx(2.5, abs=1e-12)

    def test_constant_input(self):
        assert stats.iqm([7.5] * 9) == pytest.approx(7.5, abs=1e-12)

    def test_matches_replicate_and_trim_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            values = rng.normal(size=25)
            # independent oracle: 4x replication makes the quartile cut integral
            replicated = np.sort(np.repeat(values, 4))
            trimmed = replicated[len(values): -len(values)]
            assert stats.iqm(values) == pytest.approx(float(trimmed.mean()), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stats.iqm([])

    def test_bounds_permutation_and_monotonicity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            values = rng.normal(size=int(rng.integers(1, 30)))
            v = stats.iqm(values)
            assert values.min() - 1e-12 <= v <= values.max() + 1e-12
            assert stats.iqm(rng.permutation(values)) == pytest.approx(v, abs=1e-12)
            bumped = values.copy()
            i = int(rng.integers(len(values)))
            bumped[i] += abs(rng.normal())
            assert stats.iqm(bumped) >= v - 1e-12


class TestOptimalityGap:
    def test_perfect_curve_gap_zero(self):
        assert stats.optimality_gap(record([1.0, 1.0, 1.0])) == 0.0

    def test_random_curve_gap_one(self):
        assert stats.optimality_gap(record([0.0, 0.0])) == 1.0

    def test_linear_curve(self):
        assert stats.optimality_gap(record([0.0, 0.5, 1.0])) == pytest.approx(0.5)

    def test_scores_above_one_do_not_earn_credit(self):
        assert stats.optimality_gap(record([1.5, 0.5])) == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stats.optimality_gap(record([]))


class TestBootstrap:
    def test_constant_values_zero_width(self):
        s = stats.bootstrap_ci([3.0] * 10, np.mean, n_resamples=200)
        assert s.ci_low == s.ci_high == s.point == 3.0

    def test_deterministic_given_seed(self):
        values = np.random.default_rng(2).normal(size=12)
        a = stats.bootstrap_ci(values, np.mean, seed=7)
        b = stats.bootstrap_ci(values, np.mean, seed=7)
        assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)

    def test_interval_contains_point_for_means(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            values = rng.normal(size=int(rng.integers(5, 40)))
            s = stats.bootstrap_ci(values, np.mean, n_resamples=400, seed=int(rng.integers(1e6)))
            assert s.ci_low <= s.point <= s.ci_high

    def test_coverage_on_normal_samples(self):
        rng = np.random.default_rng(4)
        hits = 0
        trials = 1000
        for i in range(trials):
            sample = rng.normal(loc=0.0, scale=1.0, size=25)
            s = stats.bootstrap_ci(sample, np.mean, n_resamples=500, seed=i)
            hits += s.ci_low <= 0.0 <= s.ci_high
        assert 0.88 <= hits / trials <= 0.99

    def test_too_few_values_rejected(self):
        with pytest.raises(ValueError):
            stats.bootstrap_ci([1.0])


class TestProbabilityOfImprovement:
    def test_identical_distributions(self):
        r = stats.probability_of_improvement([1, 2, 3], [1, 2, 3], n_resamples=100)
        assert r.poi == 0.5

    def test_total_dominance(self):
        r = stats.probability_of_improvement([1, 2], [3, 4], n_resamples=100)
        assert r.poi == 1.0

    def test_enumerated_pairs(self):
        r = stats.probability_of_improvement([1, 3], [2, 4], n_resamples=100)
        assert r.poi == 0.75

    def test_symmetry_with_ties(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.integers(0, 4, size=8).astype(float)
            y = rng.integers(0, 4, size=5).astype(float)
            a = stats.probability_of_improvement(x, y, n_resamples=10).poi
            b = stats.probability_of_improvement(y, x, n_resamples=10).poi
            assert a + b == 1.0


class TestAggregate:
    def test_single_run_curve_is_its_checkpoints(self):
        run = record([0.1, 0.4, 0.9])
        report = stats.aggregate([run], n_resamples=50)
        assert [row["iqm"] for row in report.curves] == [0.1, 0.4, 0.9]
        assert all(row["ci_low"] == row["ci_high"] == row["iqm"] for row in report.curves)
        assert all(row["n"] == 1 for row in report.curves)

    def test_identical_curves_keep_the_common_curve(self):
        runs = [record([0.2, 0.6, 0.8], seed=i) for i in range(25)]
        report = stats.aggregate(runs, n_resamples=50)
        assert [row["iqm"] for row in report.curves] == pytest.approx([0.2, 0.6, 0.8])

    def test_dominance_gives_poi_one(self):
        a = [record([0.95, 0.95], variant="cfa", seed=i) for i in range(5)]
        b = [record([0.85, 0.85], variant="vanilla", seed=i) for i in range(5)]
        report = stats.aggregate(a + b, n_resamples=50)
        row = next(
            r for r in report.poi if r["variant_x"] == "cfa" and r["variant_y"] == "vanilla"
        )
        assert row["poi"] == 1.0

    def test_poi_diagonal_is_half(self):
        runs = [record([0.3, 0.5], seed=i) for i in range(4)]
        report = stats.aggregate(runs, n_resamples=50)
        diag = [r for r in report.poi if r["variant_x"] == r["variant_y"]]
        assert diag and all(r["poi"] == 0.5 for r in diag)

    def test_mismatched_cadence_rejected(self):
        a = record([0.1, 0.2], cadence=500)
        b = record([0.1, 0.2], cadence=1000, seed=1)
        with pytest.raises(stats.GridMismatch):
            stats.aggregate([a, b])

    def test_variable_run_lengths_share_a_grid(self):
        a = record([0.1, 0.2, 0.3], seed=0)
        b = record([0.1, 0.2], seed=1)
        report = stats.aggregate([a, b], n_resamples=50)
        ns = {row["env_steps"]: row["n"] for row in report.curves}
        assert ns == {0: 2, 500: 2, 1000: 1}

    def test_pooled_gap_row_for_multiple_envs(self):
        a = [record([0.5], env="gridworld", seed=i) for i in range(3)]
        b = [record([0.7], env="cartpole", seed=i) for i in range(3)]
        report = stats.aggregate(a + b, n_resamples=50)
        pooled = [r for r in report.gaps if r["env"] == "pooled"]
        assert len(pooled) == 1
        assert pooled[0]["n"] == 6
