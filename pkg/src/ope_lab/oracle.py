"""Ground truth, closed-form variances and Monte Carlo replication of the estimators."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np

from .core import (
    CapacityError,
    LoggedDataset,
    OPELabError,
    ValidationError,
    iter_embedding_space,
)
from .estimators import (
    FeatureConfig,
    RewardModel,
    WeightVector,
    compute_marginal_weights,
    estimate_dm,
    estimate_dr,
    estimate_ips,
    estimate_mdr,
    estimate_mips,
    fit_qhat,
    marginalize_qhat,
)
from .synthetic import Environment, _epsilon_greedy, sample_with_reward_table, softmax_policy

logger = logging.getLogger(__name__)

ENUMERATION_CAP = 10**7
MC_BUDGET = 10**9
ESTIMATOR_NAMES = ("dm", "ips", "dr", "mips", "mdr")

PolicyFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class VisitationExpectation:
    """How expectations over contexts are taken.

    ``pool-exact`` sums over the environment's context pool with equal mass;
    ``monte-carlo`` averages over ``n_samples`` fresh contexts drawn with ``seed``.
    """

    mode: str = "pool-exact"
    n_samples: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("pool-exact", "monte-carlo"):
            raise ValidationError(f"unknown expectation mode {self.mode!r}")
        if self.n_samples < 2:
            raise ValidationError("monte-carlo mode needs at least two samples")


POOL_EXACT = VisitationExpectation("pool-exact")


class TrueRewardModel:
    """``q_hat = scale * q`` built from the environment's exact reward functions."""

    additive = True

    def __init__(self, env: Environment, scale: float = 1.0):
        self.env = env
        self.scale = scale

    def predict_xae(self, x, a, e) -> np.ndarray:
        return self.scale * self.env.q_xae(x, a, e)

    def predict_xa(self, x) -> np.ndarray:
        return self.scale * self.env.q_xa(x)


class ZeroRewardModel:
    additive = True

    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def predict_xae(self, x, a, e) -> np.ndarray:
        return np.zeros(np.atleast_2d(x).shape[0])

    def predict_xa(self, x) -> np.ndarray:
        return np.zeros((np.atleast_2d(x).shape[0], self.n_actions))


def _pi_e_fn(env: Environment, pi_e: PolicyFn | None) -> PolicyFn:
    return env.pi_e if pi_e is None else pi_e


def _contexts(env: Environment, mode: VisitationExpectation) -> np.ndarray:
    if mode.mode == "pool-exact":
        if not env.pool_mode:
            raise ValidationError("pool-exact expectations need an environment with a context pool")
        return env.context_pool
    if mode.n_samples * env.n_actions > MC_BUDGET:
        raise CapacityError("monte-carlo context budget exceeded")
    rng = np.random.default_rng(mode.seed)
    return rng.standard_normal((mode.n_samples, env.dim_context))


@dataclass(frozen=True)
class TrueValue:
    value: float
    standard_error: float


def true_value(
    env: Environment,
    pi_e: PolicyFn | None = None,
    mode: VisitationExpectation = POOL_EXACT,
    chunk: int = 20_000,
) -> TrueValue:
    """Policy value ``E_{p(x) pi_e(a|x)}[q(x, a)]``.

    Exact over the pool in ``pool-exact`` mode. In ``monte-carlo`` mode contexts
    are drawn from ``p(x)`` (uniform over the pool when there is one) and the
    per-context value is exact, so the standard error reflects only context
    sampling.
    """
    policy = _pi_e_fn(env, pi_e)
    if mode.mode == "pool-exact":
        x = _contexts(env, mode)
        per_context = np.einsum("na,na->n", policy(x), env.q_xa(x))
        return TrueValue(math.fsum(per_context.tolist()) / len(per_context), 0.0)

    rng = np.random.default_rng(mode.seed)
    if env.pool_mode:
        pool_values = np.einsum("na,na->n", policy(env.context_pool), env.pool_q_xa)
        values = pool_values[rng.integers(env.context_pool.shape[0], size=mode.n_samples)]
    else:
        values = np.empty(mode.n_samples)
        for start in range(0, mode.n_samples, chunk):
            stop = min(start + chunk, mode.n_samples)
            x = rng.standard_normal((stop - start, env.dim_context))
            values[start:stop] = np.einsum("na,na->n", policy(x), env.q_xa(x))
    return TrueValue(float(values.mean()), float(values.std(ddof=1) / math.sqrt(mode.n_samples)))


def _dr_family_variance(env, pi_e, mode, delta_fn) -> float:
    x = _contexts(env, mode)
    q = env.q_xa(x)
    pe = _pi_e_fn(env, pi_e)(x)
    pb = env.pi_b(x)
    w = pe / pb
    # Var(r | x, a) includes the embedding draw, not only the additive noise
    sigma2 = env.reward_noise_sd**2 + env.q_xa_variance(x)
    delta = delta_fn(x, q)
    noise = np.einsum("na,na->n", pb * w**2, sigma2).mean()
    per_x_value = np.einsum("na,na->n", pe, q)
    between = per_x_value.var()
    second = np.einsum("na,na->n", pb, (w * delta) ** 2)
    first = np.einsum("na,na->n", pe, delta)
    within = (second - first**2).mean()
    return float(noise + between + within)


def analytic_variance_ips(
    env: Environment, pi_e: PolicyFn | None = None, mode: VisitationExpectation = POOL_EXACT
) -> float:
    """``n * Var[V_IPS]`` from the three-term decomposition.

    Noise term ``E[w^2 sigma^2]``, between-context term ``V_x[E_a[w q]]`` and
    within-context term ``E_x[V_a[w q]]``. ``sigma^2(x, a)`` is the full
    conditional reward variance, reward noise plus the spread of ``q(x, a, e)``
    over the embedding draw.
    """
    return _dr_family_variance(env, pi_e, mode, lambda x, q: q)


def analytic_variance_dr(
    env: Environment, pi_e: PolicyFn | None, qhat, mode: VisitationExpectation = POOL_EXACT
) -> float:
    """``n * Var[V_DR]``; the within-context term uses ``Delta = q - q_hat``."""
    qhat_xa = marginalize_qhat(env, qhat)
    return _dr_family_variance(env, pi_e, mode, lambda x, q: q - qhat_xa(x))


class _EmbeddingEnumeration:
    """Per-context quantities over the full (action, embedding) grid."""

    def __init__(self, env: Environment, pi_e, qhat, mode: VisitationExpectation):
        self.x = _contexts(env, mode)
        space = np.array(list(iter_embedding_space(env.cardinalities, ENUMERATION_CAP)), dtype=np.int64)
        size = self.x.shape[0] * env.n_actions * space.shape[0]
        if size > ENUMERATION_CAP:
            raise CapacityError(f"{size} enumeration terms exceed the cap {ENUMERATION_CAP}")
        self.env = env
        self.space = space
        lik = np.ones((env.n_actions, space.shape[0]))
        for k, table in enumerate(env.embed_tables()):
            lik *= table[:, space[:, k]]
        self.lik = lik  # p(e | a), shape (A, |E|)
        self.pe = _pi_e_fn(env, pi_e)(self.x)
        self.pb = env.pi_b(self.x)
        self.qhat = qhat
        self.qhat_xa = marginalize_qhat(env, qhat)(self.x)

    def per_context(self):
        """Yield, per context: pb, pe, p(e|a), w(x,a), w(x,e), q(x,a,e), q_hat(x,a,e), baseline."""
        env, space = self.env, self.space
        A, E = env.n_actions, space.shape[0]
        actions = np.repeat(np.arange(A), E)
        embeds = np.tile(space, (A, 1))
        for i, xi in enumerate(self.x):
            xs = np.broadcast_to(xi, (A * E, xi.shape[0]))
            q = env.q_xae(xs, actions, embeds).reshape(A, E)
            qh = np.asarray(self.qhat.predict_xae(xs, actions, embeds)).reshape(A, E)
            pe, pb = self.pe[i], self.pb[i]
            w_e = (pe @ self.lik) / (pb @ self.lik)
            yield {
                "pb": pb,
                "pe": pe,
                "w_a": pe / pb,
                "w_e": w_e,
                "q": q,
                "qhat": qh,
                "qhat_xa": self.qhat_xa[i],
                "baseline": pe @ self.qhat_xa[i],
            }


def analytic_variance_mdr(
    env: Environment, pi_e: PolicyFn | None, qhat, mode: VisitationExpectation = POOL_EXACT
) -> float:
    """``n * Var[V_MDR]`` by exact enumeration over contexts, actions and embeddings."""
    enum = _EmbeddingEnumeration(env, pi_e, qhat, mode)
    s2 = env.reward_noise_sd**2
    first, second = [], []
    for c in enum.per_context():
        joint = c["pb"][:, None] * enum.lik
        y = c["baseline"] + c["w_e"][None, :] * (c["q"] - c["qhat"])
        first.append(np.sum(joint * y))
        second.append(np.sum(joint * (y**2 + c["w_e"][None, :] ** 2 * s2)))
    mean = np.mean(first)
    return float(np.mean(second) - mean**2)


def variance_gap_mdr(
    env: Environment, pi_e: PolicyFn | None, qhat, mode: VisitationExpectation = POOL_EXACT
) -> float:
    """``E_{d_b}[w(x,a)^2 Delta(x,a)^2 - w(x,e)^2 Delta(x,a,e)^2]``.

    The expectation runs over the logging distribution of ``(x, a, e)``. This
    expression omits the reward-noise and embedding-spread contributions, so it
    is not in general equal to ``n * (Var[DR] - Var[MDR])``; see
    :func:`exact_variance_gap` for that quantity.
    """
    if env.direct_effect_strength != 0:
        raise ValidationError("the variance gap assumes no direct effect of the action on the reward")
    enum = _EmbeddingEnumeration(env, pi_e, qhat, mode)
    total = []
    for c in enum.per_context():
        joint = c["pb"][:, None] * enum.lik
        delta_a = (c["q"] * enum.lik).sum(axis=1) - c["qhat_xa"]
        term = (c["w_a"] ** 2 * delta_a**2)[:, None] - c["w_e"][None, :] ** 2 * (c["q"] - c["qhat"]) ** 2
        total.append(np.sum(joint * term))
    return float(np.mean(total))


def exact_variance_gap(
    env: Environment, pi_e: PolicyFn | None, qhat, mode: VisitationExpectation = POOL_EXACT
) -> float:
    """``n * (Var[DR] - Var[MDR])`` computed from the two exact variances."""
    return analytic_variance_dr(env, pi_e, qhat, mode) - analytic_variance_mdr(env, pi_e, qhat, mode)


def check_no_direct_effect(env: Environment, seed: int = 0, n_points: int = 10, n_pairs: int = 10) -> bool:
    """Structural check that the action has no effect on reward given ``(x, e)``, plus a spot check."""
    if env.direct_effect_strength != 0:
        return False
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_points, env.dim_context))
    e = np.column_stack([rng.integers(c, size=n_points) for c in env.cardinalities])
    for _ in range(n_pairs):
        a1, a2 = rng.integers(env.n_actions, size=2)
        q1 = env.q_xae(x, np.full(n_points, a1), e)
        q2 = env.q_xae(x, np.full(n_points, a2), e)
        if np.max(np.abs(q1 - q2)) > 1e-12:
            return False
    return True


@dataclass
class ReplicationContext:
    """Everything an estimator may need for one logged dataset. Derived fields are lazy.

    In pool mode, per-context matrices are computed once over the pool and
    shared through ``pool_cache`` across replications.
    """

    env: Environment
    dataset: LoggedDataset
    qhat: object | None = None
    pi_e_fn: PolicyFn | None = None
    pool_cache: dict | None = None
    cache_qhat: bool = False
    q_table: np.ndarray | None = None

    def _rows(self, key: str, fn: PolicyFn) -> np.ndarray:
        idx = self.dataset.context_index
        if idx is None or not self.env.pool_mode or self.pool_cache is None:
            return fn(self.dataset.context)
        if key not in self.pool_cache:
            self.pool_cache[key] = fn(self.env.context_pool)
        return self.pool_cache[key][idx]

    @cached_property
    def pi_e(self) -> np.ndarray:
        if self.pi_e_fn is None and self.q_table is not None:
            return _epsilon_greedy(self.q_table, self.env.epsilon)
        return self._rows("pi_e", _pi_e_fn(self.env, self.pi_e_fn))

    @cached_property
    def pi_b(self) -> np.ndarray:
        if self.q_table is not None:
            return softmax_policy(self.q_table, self.env.beta)
        return self._rows("pi_b", self.env.pi_b)

    @cached_property
    def marginal_weights(self) -> WeightVector:
        return compute_marginal_weights(self.env, self.pi_e, self.pi_b, self.dataset)

    @cached_property
    def qhat_xa(self) -> np.ndarray:
        fn = marginalize_qhat(self.env, self.qhat)
        if self.cache_qhat:
            return self._rows("qhat_xa", fn)
        return fn(self.dataset.context)

    @cached_property
    def qhat_xae(self) -> np.ndarray:
        d = self.dataset
        return np.asarray(self.qhat.predict_xae(d.context, d.action, d.embedding), dtype=float)


BUILTIN_ESTIMATORS: dict[str, Callable[[ReplicationContext], float]] = {
    "dm": lambda c: estimate_dm(c.dataset, c.pi_e, c.qhat_xa).value,
    "ips": lambda c: estimate_ips(c.dataset, c.pi_e).value,
    "dr": lambda c: estimate_dr(c.dataset, c.pi_e, c.qhat_xa).value,
    "mips": lambda c: estimate_mips(c.dataset, c.marginal_weights).value,
    "mdr": lambda c: estimate_mdr(c.dataset, c.pi_e, c.qhat_xa, c.qhat_xae, c.marginal_weights).value,
}

EstimatorSpec = Union[str, tuple[str, Callable[[ReplicationContext], float]]]


@dataclass
class EstimatorSummary:
    name: str
    estimates: np.ndarray
    true_value: float
    failures: int = 0

    @property
    def n_replications(self) -> int:
        return int(self.estimates.shape[0])

    @property
    def mean_estimate(self) -> float:
        return float(self.estimates.mean()) if self.n_replications else math.nan

    @property
    def bias(self) -> float:
        return self.mean_estimate - self.true_value

    @property
    def variance(self) -> float:
        return float(self.estimates.var()) if self.n_replications else math.nan

    @property
    def mse(self) -> float:
        return self.bias**2 + self.variance

    @property
    def standard_error(self) -> float:
        """Standard error of the replication mean (sample sd over ``sqrt(R)``)."""
        if self.n_replications < 2:
            return math.nan
        return float(self.estimates.std(ddof=1) / math.sqrt(self.n_replications))


CSV_FIELDS = (
    "estimator",
    "n_actions",
    "n_samples",
    "n_replications",
    "true_value",
    "mean_estimate",
    "bias",
    "variance",
    "mse",
    "failures",
)


@dataclass
class EvalReport:
    n_actions: int
    n_samples: int
    true_value: float
    true_value_se: float
    summaries: dict[str, EstimatorSummary] = field(default_factory=dict)

    def __getitem__(self, name: str) -> EstimatorSummary:
        return self.summaries[name]

    def rows(self) -> list[dict]:
        return [
            {
                "estimator": s.name,
                "n_actions": self.n_actions,
                "n_samples": self.n_samples,
                "n_replications": s.n_replications,
                "true_value": self.true_value,
                "mean_estimate": s.mean_estimate,
                "bias": s.bias,
                "variance": s.variance,
                "mse": s.mse,
                "failures": s.failures,
            }
            for s in self.summaries.values()
        ]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        for row in self.rows():
            writer.writerow({k: format_value(v) for k, v in row.items()})
        return buf.getvalue()


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _resolve(spec: EstimatorSpec) -> tuple[str, Callable[[ReplicationContext], float]]:
    if isinstance(spec, str):
        if spec not in BUILTIN_ESTIMATORS:
            raise ValidationError(f"unknown estimator {spec!r}")
        return spec, BUILTIN_ESTIMATORS[spec]
    return spec


def _replication_seed(base_seed: int | Sequence[int], r: int) -> tuple[int, ...]:
    return (*np.atleast_1d(base_seed).tolist(), r)


def monte_carlo_eval(
    env: Environment,
    estimator_specs: Sequence[EstimatorSpec],
    n: int,
    R: int,
    base_seed: int | Sequence[int] = 0,
    qhat=None,
    refit: bool = False,
    feature_config: FeatureConfig | None = None,
    ridge_lambda: float = 1.0,
    pi_e: PolicyFn | None = None,
    truth: TrueValue | VisitationExpectation | None = None,
) -> EvalReport:
    """Replicate logging ``R`` times and summarize each estimator against the true value.

    Replication ``r`` samples its dataset with seed ``(base_seed, r)``. With
    ``refit=True`` the reward model is refit on every dataset; otherwise the
    fixed ``qhat`` is used (defaults to a zero model when omitted). Estimator
    failures are counted and the replication is dropped for that estimator.
    """
    if R < 2:
        raise ValidationError("need at least two replications")
    specs = [_resolve(s) for s in estimator_specs]
    if truth is None:
        truth = POOL_EXACT if env.pool_mode else VisitationExpectation("monte-carlo", seed=base_seed)
    if isinstance(truth, VisitationExpectation):
        truth = true_value(env, pi_e, truth)
    if qhat is None and not refit:
        qhat = ZeroRewardModel(env.n_actions)

    pool_cache: dict = {}
    values: dict[str, list[float]] = {name: [] for name, _ in specs}
    failures = dict.fromkeys(values, 0)
    for r in range(R):
        dataset, q_table = sample_with_reward_table(env, n, seed=_replication_seed(base_seed, r))
        model = qhat
        if refit:
            try:
                model = fit_qhat(dataset, feature_config, ridge_lambda)
            except OPELabError as exc:
                logger.warning("replication %d: reward model fit failed: %s", r, exc)
                model = None
        ctx = ReplicationContext(env, dataset, model, pi_e, pool_cache, cache_qhat=not refit, q_table=q_table)
        for name, fn in specs:
            try:
                value = float(fn(ctx))
                if not math.isfinite(value):
                    raise FloatingPointError("non-finite estimate")
            except (OPELabError, ArithmeticError, AttributeError, np.linalg.LinAlgError) as exc:
                logger.debug("replication %d: %s failed: %s", r, name, exc)
                failures[name] += 1
                continue
            values[name].append(value)

    report = EvalReport(env.n_actions, n, truth.value, truth.standard_error)
    for name in values:
        report.summaries[name] = EstimatorSummary(
            name, np.asarray(values[name], dtype=float), truth.value, failures[name]
        )
    return report
