"""Synthetic contextual-bandit environment with categorical action embeddings.

Contexts are standard normal, each action draws a factored categorical
embedding from a softmax over its own logits, and the expected reward is a
bilinear function of the context and per-dimension category vectors::

    q(x, e) = sum_k eta_k * (x' M v_{k, e_k} + theta_x' x + theta_e' v_{k, e_k})

The behavior policy is a softmax of ``beta * q(x, a)`` and the evaluation
policy is epsilon-greedy on ``q(x, a)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import LoggedDataset, ValidationError


@dataclass(frozen=True)
class EnvConfig:
    n_actions: int = 1000
    dim_context: int = 10
    cardinalities: tuple[int, ...] = (10, 10, 10)
    beta: float = 0.0
    epsilon: float = 0.05
    reward_noise_sd: float = 1.0
    direct_effect_strength: float = 0.0
    pool_size: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if self.n_actions < 2:
            raise ValidationError("n_actions must be at least 2")
        if self.dim_context < 1:
            raise ValidationError("dim_context must be positive")
        if len(self.cardinalities) < 1:
            raise ValidationError("need at least one embedding dimension")
        if min(self.cardinalities) < 2:
            raise ValidationError("every embedding cardinality must be at least 2")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not np.isfinite(self.beta):
            raise ValidationError("beta must be finite")
        if not (np.isfinite(self.reward_noise_sd) and self.reward_noise_sd >= 0):
            raise ValidationError("reward_noise_sd must be finite and non-negative")
        if not (np.isfinite(self.direct_effect_strength) and self.direct_effect_strength >= 0):
            raise ValidationError("direct_effect_strength must be finite and non-negative")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValidationError("pool_size must be positive when given")

    @property
    def dim_embedding(self) -> int:
        return len(self.cardinalities)


@dataclass(frozen=True, eq=False)
class Environment:
    """All parameters of one synthetic environment. Immutable after construction.

    ``alpha[k]`` has shape (n_actions, |E_k|); ``category_vectors[k]`` has shape
    (|E_k|, dim_context). ``context_pool`` is set in pool mode, where ``p(x)``
    is uniform over its rows.
    """

    n_actions: int
    dim_context: int
    cardinalities: tuple[int, ...]
    alpha: tuple[np.ndarray, ...]
    M: np.ndarray
    theta_x: np.ndarray
    theta_e: np.ndarray
    eta: np.ndarray
    category_vectors: tuple[np.ndarray, ...]
    beta: float
    epsilon: float
    reward_noise_sd: float = 1.0
    direct_effect_strength: float = 0.0
    context_pool: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        for arr in (self.M, self.theta_x, self.theta_e, self.eta, *self.alpha, *self.category_vectors):
            arr.setflags(write=False)
        if self.context_pool is not None:
            self.context_pool.setflags(write=False)

    @property
    def dim_embedding(self) -> int:
        return len(self.cardinalities)

    @property
    def pool_mode(self) -> bool:
        return self.context_pool is not None

    @cached_property
    def embed_probs(self) -> tuple[np.ndarray, ...]:
        """Per-dimension tables ``p(e_k = c | a)``, each of shape (n_actions, |E_k|)."""
        tables = []
        for a in self.alpha:
            p = softmax_policy(a, 1.0)
            p.setflags(write=False)
            tables.append(p)
        return tuple(tables)

    def embed_tables(self, x: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
        # p(e|x,a) carries no x dependence in this generative model
        return self.embed_probs

    @cached_property
    def _category_bias(self) -> tuple[np.ndarray, ...]:
        return tuple(v @ self.theta_e for v in self.category_vectors)

    @cached_property
    def _category_proj(self) -> tuple[np.ndarray, ...]:
        # (M v_{k,c}) stacked as (dim_context, |E_k|)
        return tuple(self.M @ v.T for v in self.category_vectors)

    @cached_property
    def _direct_effect_profile(self) -> np.ndarray:
        s = np.sin(np.arange(self.n_actions) + 1.0)
        return s / s.std()

    def category_terms(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-dimension reward terms ``x' M v_{k,c} + theta_x' x + theta_e' v_{k,c}``.

        Returns one (n, |E_k|) array per embedding dimension.
        """
        x = np.atleast_2d(x)
        base = (x @ self.theta_x)[:, None]
        return [x @ proj + base + bias for proj, bias in zip(self._category_proj, self._category_bias)]

    def direct_effect(self, x: np.ndarray) -> np.ndarray:
        """Unscaled direct effect ``g(x, a)`` as an (n, n_actions) array."""
        x = np.atleast_2d(x)
        return (x @ self.theta_x)[:, None] * self._direct_effect_profile[None, :]

    @cached_property
    def _stacked_probs(self) -> np.ndarray:
        # (sum_k |E_k|, n_actions), rows of dimension k scaled by eta_k
        return np.ascontiguousarray(np.vstack([w * p.T for w, p in zip(self.eta, self.embed_probs)]))

    @cached_property
    def embed_probs_by_category(self) -> tuple[np.ndarray, ...]:
        """Per-dimension tables transposed to (|E_k|, n_actions)."""
        return tuple(np.ascontiguousarray(p.T) for p in self.embed_probs)

    def q_xa(self, x: np.ndarray) -> np.ndarray:
        """Exact ``q(x, a)`` for all actions, shape (n, n_actions)."""
        q = np.hstack(self.category_terms(x)) @ self._stacked_probs
        if self.direct_effect_strength > 0:
            q = q + self.direct_effect_strength * self.direct_effect(x)
        return q

    def q_xa_variance(self, x: np.ndarray) -> np.ndarray:
        """``Var_{p(e|x,a)}[q(x, a, e)]`` for all actions, shape (n, n_actions)."""
        terms = self.category_terms(x)
        var = 0.0
        for w, t, p in zip(self.eta, terms, self.embed_probs):
            mean = t @ p.T
            var = var + w**2 * ((t**2) @ p.T - mean**2)
        return np.maximum(var, 0.0)

    def q_xe(self, x: np.ndarray, e: np.ndarray) -> np.ndarray:
        """Row-wise ``q(x_i, e_i)``."""
        x = np.atleast_2d(x)
        e = np.atleast_2d(np.asarray(e, dtype=np.int64))
        terms = self.category_terms(x)
        rows = np.arange(x.shape[0])
        return sum(w * t[rows, e[:, k]] for k, (w, t) in enumerate(zip(self.eta, terms)))

    def q_xae(self, x: np.ndarray, a: np.ndarray, e: np.ndarray) -> np.ndarray:
        """Row-wise ``q(x_i, a_i, e_i)`` including any direct effect."""
        q = self.q_xe(x, e)
        if self.direct_effect_strength > 0:
            x = np.atleast_2d(x)
            a = np.asarray(a, dtype=np.int64).reshape(-1)
            q = q + self.direct_effect_strength * (x @ self.theta_x) * self._direct_effect_profile[a]
        return q

    def pi_b(self, x: np.ndarray) -> np.ndarray:
        return softmax_policy(self.q_xa(x), self.beta)

    def pi_e(self, x: np.ndarray) -> np.ndarray:
        return _epsilon_greedy(self.q_xa(x), self.epsilon)

    @cached_property
    def pool_q_xa(self) -> np.ndarray:
        if self.context_pool is None:
            raise ValidationError("environment has no context pool")
        return self.q_xa(self.context_pool)

    @cached_property
    def pool_pi_b(self) -> np.ndarray:
        return softmax_policy(self.pool_q_xa, self.beta)

    def to_dict(self) -> dict:
        return {
            "n_actions": self.n_actions,
            "dim_context": self.dim_context,
            "cardinalities": list(self.cardinalities),
            "alpha": [a.ravel().tolist() for a in self.alpha],
            "M": self.M.ravel().tolist(),
            "theta_x": self.theta_x.tolist(),
            "theta_e": self.theta_e.tolist(),
            "eta": self.eta.tolist(),
            "category_vectors": [v.ravel().tolist() for v in self.category_vectors],
            "beta": self.beta,
            "epsilon": self.epsilon,
            "reward_noise_sd": self.reward_noise_sd,
            "direct_effect_strength": self.direct_effect_strength,
            "context_pool": None if self.context_pool is None else self.context_pool.ravel().tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        A, dx, cards = d["n_actions"], d["dim_context"], tuple(d["cardinalities"])
        pool = d.get("context_pool")
        return cls(
            n_actions=A,
            dim_context=dx,
            cardinalities=cards,
            alpha=tuple(np.array(a, dtype=float).reshape(A, c) for a, c in zip(d["alpha"], cards)),
            M=np.array(d["M"], dtype=float).reshape(dx, dx),
            theta_x=np.array(d["theta_x"], dtype=float),
            theta_e=np.array(d["theta_e"], dtype=float),
            eta=np.array(d["eta"], dtype=float),
            category_vectors=tuple(
                np.array(v, dtype=float).reshape(c, dx) for v, c in zip(d["category_vectors"], cards)
            ),
            beta=float(d["beta"]),
            epsilon=float(d["epsilon"]),
            reward_noise_sd=float(d["reward_noise_sd"]),
            direct_effect_strength=float(d["direct_effect_strength"]),
            context_pool=None if pool is None else np.array(pool, dtype=float).reshape(-1, dx),
            seed=d.get("seed"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Environment":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "Environment":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return Environment(**d)


def softmax_policy(q: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise softmax of ``beta * q`` with max subtraction."""
    if beta == 0:
        return np.full(q.shape, 1.0 / q.shape[1])
    z = beta * q
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _epsilon_greedy(q: np.ndarray, epsilon: float) -> np.ndarray:
    n, A = q.shape
    probs = np.full((n, A), epsilon / A)
    # np.argmax returns the lowest index among ties
    probs[np.arange(n), np.argmax(q, axis=1)] += 1.0 - epsilon
    return probs


def init_env(config: EnvConfig | None = None, seed: int | Sequence[int] = 0) -> Environment:
    """Draw every random parameter of the environment from a generator seeded by ``seed``."""
    config = config or EnvConfig()
    rng = np.random.default_rng(seed)
    A, dx, cards = config.n_actions, config.dim_context, config.cardinalities
    alpha = tuple(rng.standard_normal((A, c)) for c in cards)
    M = rng.uniform(-1.0, 1.0, size=(dx, dx))
    theta_x = rng.uniform(-1.0, 1.0, size=dx)
    theta_e = rng.uniform(-1.0, 1.0, size=dx)
    eta = rng.dirichlet(np.ones(len(cards)))
    category_vectors = tuple(rng.standard_normal((c, dx)) for c in cards)
    pool = rng.standard_normal((config.pool_size, dx)) if config.pool_size else None
    return Environment(
        n_actions=A,
        dim_context=dx,
        cardinalities=cards,
        alpha=alpha,
        M=M,
        theta_x=theta_x,
        theta_e=theta_e,
        eta=eta,
        category_vectors=category_vectors,
        beta=float(config.beta),
        epsilon=float(config.epsilon),
        reward_noise_sd=float(config.reward_noise_sd),
        direct_effect_strength=float(config.direct_effect_strength),
        context_pool=pool,
        seed=seed if isinstance(seed, int) else None,
    )


def embed_dist(env: Environment, a: int) -> list[np.ndarray]:
    """Per-dimension categorical distributions ``p(e_k | a)`` for a single action."""
    if not 0 <= a < env.n_actions:
        raise ValidationError(f"action {a} out of range")
    return [p[a] for p in env.embed_probs]


def _single(x, fn):
    x = np.asarray(x, dtype=float)
    out = fn(np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def expected_reward_xe(env: Environment, x: np.ndarray, e: Sequence[int]) -> float | np.ndarray:
    e = np.asarray(e)
    return _single(x, lambda X: env.q_xe(X, np.broadcast_to(e, (X.shape[0], env.dim_embedding))))


def expected_reward_xae(env: Environment, x: np.ndarray, a, e) -> float | np.ndarray:
    e = np.asarray(e)
    return _single(
        x,
        lambda X: env.q_xae(
            X,
            np.broadcast_to(np.asarray(a), (X.shape[0],)),
            np.broadcast_to(e, (X.shape[0], env.dim_embedding)),
        ),
    )


def expected_reward_xa(env: Environment, x: np.ndarray, a: int | None = None) -> float | np.ndarray:
    """``q(x, a) = E_{p(e|a)}[q(x, a, e)]``, exactly, per embedding dimension.

    With ``a=None`` returns values for every action.
    """
    q = _single(x, env.q_xa)
    return q if a is None else q[..., a]


def behavior_policy(env: Environment, x: np.ndarray) -> np.ndarray:
    return _single(x, env.pi_b)


def evaluation_policy(env: Environment, x: np.ndarray) -> np.ndarray:
    return _single(x, env.pi_e)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    # zero-probability categories are never selected, even for u == 0
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_contexts(env: Environment, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    if env.pool_mode:
        idx = rng.integers(env.context_pool.shape[0], size=n)
        return env.context_pool[idx], idx
    return rng.standard_normal((n, env.dim_context)), None


def sample_logged_data(env: Environment, n: int, seed: int | Sequence[int] = 0) -> LoggedDataset:
    """Draw ``n`` i.i.d. logged tuples under the behavior policy."""
    return sample_with_reward_table(env, n, seed)[0]


def sample_with_reward_table(
    env: Environment, n: int, seed: int | Sequence[int] = 0
) -> tuple[LoggedDataset, np.ndarray | None]:
    """Like :func:`sample_logged_data`, also returning ``q(x_i, a)`` for every action.

    The table is ``None`` in pool mode, where per-context quantities are cached
    on the environment instead.
    """
    if n < 1:
        raise ValidationError("n must be positive")
    rng = np.random.default_rng(seed)
    x, idx = sample_contexts(env, n, rng)
    q = None
    if idx is not None:
        pb = env.pool_pi_b[idx]
    else:
        q = env.q_xa(x)
        pb = softmax_policy(q, env.beta)
    action = _sample_categorical(rng, pb)
    embedding = np.column_stack([_sample_categorical(rng, p[action]) for p in env.embed_probs])
    pscore = pb[np.arange(n), action]
    del pb
    reward = env.q_xae(x, action, embedding) + env.reward_noise_sd * rng.standard_normal(n)
    return LoggedDataset(
        context=x,
        action=action,
        embedding=embedding,
        reward=reward,
        pscore=pscore,
        n_actions=env.n_actions,
        cardinalities=env.cardinalities,
        seed=seed if isinstance(seed, int) else None,
        context_index=idx,
    ), q
