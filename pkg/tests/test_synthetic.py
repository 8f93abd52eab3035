import itertools

import numpy as np
import pytest
from scipy import stats

from ope_lab.core import ValidationError
from ope_lab.synthetic import (
    EnvConfig,
    Environment,
    behavior_policy,
    embed_dist,
    evaluation_policy,
    expected_reward_xa,
    expected_reward_xae,
    expected_reward_xe,
    init_env,
    sample_logged_data,
)

from conftest import identity_alpha, make_env


def naive_q(env, x, e):
    """Reference reward written straight from the formula, one dimension at a time."""
    total = 0.0
    for k, ek in enumerate(e):
        v = env.category_vectors[k][ek]
        total += env.eta[k] * (x @ env.M @ v + env.theta_x @ x + env.theta_e @ v)
    return total


def brute_force_q_xa(env, x, a):
    total = 0.0
    for e in itertools.product(*map(range, env.cardinalities)):
        p = np.prod([table[a, ek] for table, ek in zip(env.embed_probs, e)])
        total += p * expected_reward_xae(env, x, a, e)
    return total


class TestInitEnv:
    def test_defaults(self):
        cfg = EnvConfig()
        env = init_env(EnvConfig(n_actions=50), seed=0)
        assert cfg.dim_context == 10 and cfg.cardinalities == (10, 10, 10)
        assert env.dim_context == 10 and env.cardinalities == (10, 10, 10)
        assert cfg.epsilon == 0.05

    def test_same_seed_same_parameters(self):
        a = init_env(EnvConfig(n_actions=30), seed=5)
        b = init_env(EnvConfig(n_actions=30), seed=5)
        for name in ("M", "theta_x", "theta_e", "eta"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert all(np.array_equal(x, y) for x, y in zip(a.alpha, b.alpha))
        c = init_env(EnvConfig(n_actions=30), seed=6)
        assert not np.array_equal(a.M, c.M)

    def test_alpha_shape(self):
        env = init_env(EnvConfig(n_actions=100, cardinalities=(10, 10, 10)), seed=1)
        assert sum(a.size for a in env.alpha) == 100 * 3 * 10
        assert all(a.shape == (100, 10) for a in env.alpha)

    def test_parameter_ranges(self):
        env = init_env(EnvConfig(n_actions=40, cardinalities=(4, 6, 3, 5)), seed=8)
        for arr in (env.M, env.theta_x, env.theta_e):
            assert np.all(np.abs(arr) <= 1)
        assert abs(env.eta.sum() - 1) <= 1e-12 and np.all(env.eta >= 0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_actions=1),
            dict(cardinalities=()),
            dict(cardinalities=(10, 1)),
            dict(epsilon=1.5),
            dict(epsilon=-0.1),
            dict(beta=float("inf")),
            dict(reward_noise_sd=-1.0),
            dict(direct_effect_strength=-0.5),
            dict(pool_size=0),
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValidationError):
            EnvConfig(**kwargs)

    def test_json_round_trip(self, tmp_path, small_env):
        path = tmp_path / "env.json"
        small_env.save(path)
        back = Environment.load(path)
        x = np.random.default_rng(0).standard_normal((4, small_env.dim_context))
        assert np.array_equal(back.q_xa(x), small_env.q_xa(x))
        assert np.array_equal(back.context_pool, small_env.context_pool)
        assert back.to_dict() == small_env.to_dict()


class TestEmbedDist:
    def test_equal_logits_give_uniform(self):
        env = make_env([np.zeros((3, 4)), np.zeros((3, 5))])
        tables = embed_dist(env, 1)
        assert np.allclose(tables[0], 0.25) and np.allclose(tables[1], 0.2)

    def test_large_logit_concentrates(self):
        alpha = np.zeros((2, 3))
        alpha[0, 2] = 50.0
        env = make_env([alpha])
        assert embed_dist(env, 0)[0][2] >= 1 - 1e-9

    def test_normalized(self):
        env = init_env(EnvConfig(n_actions=25, cardinalities=(3, 7)), seed=2)
        for a in range(env.n_actions):
            for table in embed_dist(env, a):
                assert abs(table.sum() - 1) <= 1e-12

    def test_bad_action(self, small_env):
        with pytest.raises(ValidationError):
            embed_dist(small_env, small_env.n_actions)


class TestExpectedReward:
    def test_zero_parameters(self):
        dx = 3
        env = make_env([np.zeros((2, 2))], dim_context=dx, M=np.zeros((dx, dx)), theta_x=np.zeros(dx), theta_e=np.zeros(dx))
        x = np.random.default_rng(0).standard_normal(dx)
        assert expected_reward_xe(env, x, (1,)) == 0.0
        assert np.all(expected_reward_xa(env, x) == 0.0)

    def test_hand_arithmetic(self):
        dx = 4
        x = np.array([1.0, 0, 0, 0])
        env = make_env([np.zeros((2, 3))], dim_context=dx, M=np.zeros((dx, dx)), theta_x=x, theta_e=np.zeros(dx), eta=[1.0])
        assert expected_reward_xe(env, x, (2,)) == pytest.approx(1.0, abs=1e-15)

    def test_matches_naive_recompute(self):
        env = init_env(EnvConfig(n_actions=10, dim_context=5, cardinalities=(3, 4, 2)), seed=11)
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.standard_normal(5)
            e = tuple(int(rng.integers(c)) for c in env.cardinalities)
            assert expected_reward_xe(env, x, e) == pytest.approx(naive_q(env, x, e), rel=1e-12, abs=1e-12)

    def test_vectorized_rows(self, small_env):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, small_env.dim_context))
        e = np.column_stack([rng.integers(c, size=6) for c in small_env.cardinalities])
        rowwise = [naive_q(small_env, xi, ei) for xi, ei in zip(x, e)]
        assert np.allclose(small_env.q_xe(x, e), rowwise, rtol=1e-12, atol=1e-12)

    def test_no_direct_effect_by_default(self, small_env):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.standard_normal(small_env.dim_context)
            e = tuple(int(rng.integers(c)) for c in small_env.cardinalities)
            vals = [expected_reward_xae(small_env, x, a, e) for a in rng.integers(small_env.n_actions, size=5)]
            assert max(vals) - min(vals) <= 1e-12
            assert vals[0] == expected_reward_xe(small_env, x, e)

    def test_direct_effect_varies_with_action(self):
        env = init_env(EnvConfig(n_actions=20, dim_context=4, cardinalities=(3,), direct_effect_strength=1.0), seed=4)
        x = np.random.default_rng(5).standard_normal(4)
        assert expected_reward_xae(env, x, 0, (1,)) != pytest.approx(expected_reward_xae(env, x, 1, (1,)))
        # g is theta_x'x times a unit-variance profile over actions
        z = np.random.default_rng(6).standard_normal((1, 4))
        g = env.direct_effect(z)[0]
        assert g.std() == pytest.approx(abs(z[0] @ env.theta_x), rel=1e-12)

    def test_deterministic_embedding(self):
        env = make_env([identity_alpha(5)], dim_context=3)
        x = np.random.default_rng(7).standard_normal(3)
        for a in range(5):
            assert expected_reward_xa(env, x, a) == pytest.approx(expected_reward_xae(env, x, a, (a,)), abs=1e-14)

    def test_uniform_two_point_average(self):
        env = make_env([np.zeros((3, 2))], dim_context=3, eta=[1.0])
        x = np.random.default_rng(8).standard_normal(3)
        mean = (expected_reward_xe(env, x, (0,)) + expected_reward_xe(env, x, (1,))) / 2
        assert expected_reward_xa(env, x, 2) == pytest.approx(mean, abs=1e-14)

    @pytest.mark.parametrize("cards", [(3, 3), (5, 4, 2), (5, 5, 5)])
    def test_matches_product_space_enumeration(self, cards):
        env = init_env(EnvConfig(n_actions=6, dim_context=4, cardinalities=cards, direct_effect_strength=0.3), seed=13)
        rng = np.random.default_rng(9)
        for _ in range(3):
            x = rng.standard_normal(4)
            q = expected_reward_xa(env, x)
            for a in range(env.n_actions):
                assert abs(q[a] - brute_force_q_xa(env, x, a)) <= 1e-10

    def test_embedding_variance(self, small_env):
        x = small_env.context_pool[:2]
        var = small_env.q_xa_variance(x)
        for i, xi in enumerate(x):
            for a in (0, 5):
                vals, probs = [], []
                for e in itertools.product(*map(range, small_env.cardinalities)):
                    vals.append(expected_reward_xae(small_env, xi, a, e))
                    probs.append(np.prod([t[a, ek] for t, ek in zip(small_env.embed_probs, e)]))
                vals, probs = np.array(vals), np.array(probs)
                mean = probs @ vals
                assert var[i, a] == pytest.approx(probs @ (vals - mean) ** 2, rel=1e-9, abs=1e-12)


class TestPolicies:
    def test_beta_zero_is_uniform(self):
        env = init_env(EnvConfig(n_actions=7, beta=0.0), seed=0)
        x = np.random.default_rng(0).standard_normal(10)
        assert np.all(behavior_policy(env, x) == 1 / 7)

    def test_large_beta_concentrates_on_argmax(self):
        env = init_env(EnvConfig(n_actions=15, dim_context=3, cardinalities=(4,), beta=100.0), seed=1)
        x = np.random.default_rng(1).standard_normal(3)
        pb = behavior_policy(env, x)
        assert np.argmax(pb) == np.argmax(expected_reward_xa(env, x))
        assert pb.max() > 0.5

    def test_normalized_and_positive(self):
        env = init_env(EnvConfig(n_actions=200, beta=-3.0), seed=2)
        x = np.random.default_rng(2).standard_normal((20, 10))
        pb = env.pi_b(x)
        assert np.all(np.abs(pb.sum(axis=1) - 1) <= 1e-12)
        assert np.all(pb > 0)

    def test_epsilon_extremes(self, small_env):
        x = small_env.context_pool[0]
        assert np.allclose(evaluation_policy(small_env.replace(epsilon=1.0), x), 1 / small_env.n_actions)
        greedy = evaluation_policy(small_env.replace(epsilon=0.0), x)
        assert greedy.max() == 1.0 and np.argmax(greedy) == np.argmax(expected_reward_xa(small_env, x))

    def test_default_epsilon_ten_actions(self):
        env = init_env(EnvConfig(n_actions=10), seed=3)
        pe = evaluation_policy(env, np.random.default_rng(3).standard_normal(10))
        assert pe.max() == pytest.approx(0.955, abs=1e-15)
        assert np.allclose(np.sort(pe)[:-1], 0.005, atol=1e-15)

    def test_ties_go_to_lowest_index(self):
        dx = 2
        env = make_env([np.zeros((4, 2))], dim_context=dx, M=np.zeros((dx, dx)), epsilon=0.0)
        pe = evaluation_policy(env, np.ones(dx))
        assert pe[0] == 1.0


class TestSampling:
    def test_noiseless_rewards_are_exact(self, small_env):
        env = small_env.replace(reward_noise_sd=0.0)
        ds = sample_logged_data(env, 300, seed=4)
        assert np.array_equal(ds.reward, env.q_xae(ds.context, ds.action, ds.embedding))

    def test_uniform_action_frequencies(self):
        env = init_env(EnvConfig(n_actions=20, beta=0.0), seed=5)
        ds = sample_logged_data(env, 10_000, seed=6)
        counts = np.bincount(ds.action, minlength=20)
        expected = 10_000 / 20
        sd = np.sqrt(10_000 * (1 / 20) * (19 / 20))
        assert np.all(np.abs(counts - expected) <= 4 * sd)
        assert stats.chisquare(counts).pvalue > 1e-4

    def test_propensities_recorded(self):
        env = init_env(EnvConfig(n_actions=30, beta=1.0, cardinalities=(3, 3)), seed=7)
        ds = sample_logged_data(env, 100, seed=8)
        pb = env.pi_b(ds.context)
        assert np.allclose(ds.pscore, pb[np.arange(100), ds.action], rtol=0, atol=1e-15)

    def test_determinism(self, small_env):
        a = sample_logged_data(small_env, 500, seed=12).to_jsonl()
        b = sample_logged_data(small_env, 500, seed=12).to_jsonl()
        assert a == b
        assert a != sample_logged_data(small_env, 500, seed=13).to_jsonl()

    def test_invalid_n(self, small_env):
        with pytest.raises(ValidationError):
            sample_logged_data(small_env, 0)

    def test_identity_embedding_copies_action(self, identity_env):
        ds = sample_logged_data(identity_env, 400, seed=1)
        assert np.array_equal(ds.embedding[:, 0], ds.action)

    def test_mean_reward_converges(self):
        # fixed (x, a, e): one pooled context and a deterministic embedding
        pool = np.random.default_rng(0).standard_normal((1, 3))
        env = make_env([identity_alpha(2)], dim_context=3, context_pool=pool)
        ds = sample_logged_data(env, 200_000, seed=3)
        for a in (0, 1):
            mask = ds.action == a
            assert mask.sum() >= 99_000
            target = expected_reward_xae(env, pool[0], a, (a,))
            assert abs(ds.reward[mask].mean() - target) <= 4 / np.sqrt(mask.sum())
