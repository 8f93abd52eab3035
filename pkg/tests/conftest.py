import numpy as np
import pytest

from ope_lab.synthetic import EnvConfig, Environment, init_env

ACCEPTANCE_LINES: list[str] = []


def make_env(
    alpha,
    *,
    dim_context=2,
    M=None,
    theta_x=None,
    theta_e=None,
    eta=None,
    category_vectors=None,
    beta=0.0,
    epsilon=0.05,
    reward_noise_sd=1.0,
    direct_effect_strength=0.0,
    context_pool=None,
    seed=0,
):
    """Build an environment by hand; unspecified parameters are drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    alpha = tuple(np.asarray(a, dtype=float) for a in alpha)
    n_actions = alpha[0].shape[0]
    cards = tuple(a.shape[1] for a in alpha)
    dx = dim_context
    return Environment(
        n_actions=n_actions,
        dim_context=dx,
        cardinalities=cards,
        alpha=alpha,
        M=rng.uniform(-1, 1, (dx, dx)) if M is None else np.asarray(M, dtype=float),
        theta_x=rng.uniform(-1, 1, dx) if theta_x is None else np.asarray(theta_x, dtype=float),
        theta_e=rng.uniform(-1, 1, dx) if theta_e is None else np.asarray(theta_e, dtype=float),
        eta=np.full(len(cards), 1 / len(cards)) if eta is None else np.asarray(eta, dtype=float),
        category_vectors=tuple(rng.standard_normal((c, dx)) for c in cards)
        if category_vectors is None
        else tuple(np.asarray(v, dtype=float) for v in category_vectors),
        beta=beta,
        epsilon=epsilon,
        reward_noise_sd=reward_noise_sd,
        direct_effect_strength=direct_effect_strength,
        context_pool=None if context_pool is None else np.asarray(context_pool, dtype=float),
    )


def identity_alpha(n_actions):
    """Logits making the embedding a deterministic copy of the action."""
    alpha = np.full((n_actions, n_actions), -np.inf)
    np.fill_diagonal(alpha, 0.0)
    return alpha


@pytest.fixture
def small_env():
    return init_env(EnvConfig(n_actions=12, dim_context=4, cardinalities=(3, 4), beta=0.5, pool_size=6), seed=3)


@pytest.fixture
def identity_env():
    return make_env([identity_alpha(8)], dim_context=3, beta=0.7, context_pool=np.random.default_rng(1).standard_normal((5, 3)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
