"""Off-policy value estimators (DM, IPS, DR, MIPS, MDR) and the reward regression."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Protocol, Union

import numpy as np
from scipy import linalg

from .core import (
    DEFAULT_ENUMERATION_CAP,
    CapacityError,
    LoggedDataset,
    NumericalError,
    PolicyMatrix,
    ShapeError,
    SupportViolationError,
    ValidationError,
    iter_embedding_space,
)

if TYPE_CHECKING:
    from .synthetic import Environment

# (n, n_actions) matrix, or a callable mapping contexts to one
QhatXA = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]
# (n,) vector, or a callable mapping (x, a, e) rows to one
QhatXAE = Union[np.ndarray, Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class Estimate:
    name: str
    value: float
    n: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise NumericalError(f"{self.name} produced a non-finite estimate")

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    kind: str  # "vanilla" or "marginal"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.kind not in ("vanilla", "marginal"):
            raise ValidationError(f"unknown weight kind {self.kind!r}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("importance weights must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


def _fsum_mean(values: np.ndarray) -> float:
    # exact rounding of the sum makes the mean independent of sample order
    return math.fsum(np.asarray(values, dtype=float).tolist()) / len(values)


def _policy_rows(pi: PolicyMatrix | np.ndarray, dataset: LoggedDataset) -> np.ndarray:
    probs = pi.probs if isinstance(pi, PolicyMatrix) else np.asarray(pi, dtype=float)
    if probs.shape != (dataset.n, dataset.n_actions):
        raise ShapeError(f"policy rows have shape {probs.shape}, expected {(dataset.n, dataset.n_actions)}")
    return probs


def _qhat_matrix(qhat_xa: QhatXA, dataset: LoggedDataset) -> np.ndarray:
    q = qhat_xa(dataset.context) if callable(qhat_xa) else np.asarray(qhat_xa, dtype=float)
    q = np.broadcast_to(q, (dataset.n, dataset.n_actions)) if np.ndim(q) == 0 else q
    if q.shape != (dataset.n, dataset.n_actions):
        raise ShapeError(f"q_hat(x, a) has shape {q.shape}, expected {(dataset.n, dataset.n_actions)}")
    return q


def _qhat_logged(qhat_xae: QhatXAE, dataset: LoggedDataset) -> np.ndarray:
    if callable(qhat_xae):
        q = qhat_xae(dataset.context, dataset.action, dataset.embedding)
    else:
        q = np.asarray(qhat_xae, dtype=float)
    q = np.broadcast_to(q, (dataset.n,)) if np.ndim(q) == 0 else q
    if q.shape != (dataset.n,):
        raise ShapeError(f"q_hat(x, a, e) has shape {q.shape}, expected {(dataset.n,)}")
    return q


def _check_weights(weights: WeightVector, dataset: LoggedDataset, kind: str) -> np.ndarray:
    if weights.kind != kind:
        raise ValidationError(f"expected {kind} weights, got {weights.kind}")
    if len(weights) != dataset.n:
        raise ShapeError(f"{len(weights)} weights for {dataset.n} samples")
    return weights.values


def vanilla_weights(dataset: LoggedDataset, pi_e_rows: PolicyMatrix | np.ndarray) -> WeightVector:
    """``w(x_i, a_i) = pi_e(a_i|x_i) / pi_b(a_i|x_i)`` using the logged propensities."""
    pe = _policy_rows(pi_e_rows, dataset)
    if np.any(dataset.pscore <= 0):
        raise SupportViolationError("a logged sample has zero behavior propensity")
    return WeightVector(pe[np.arange(dataset.n), dataset.action] / dataset.pscore, kind="vanilla")


def compute_marginal_weights(
    env: "Environment",
    pi_e_rows: PolicyMatrix | np.ndarray,
    pi_b_rows: PolicyMatrix | np.ndarray,
    dataset: LoggedDataset,
) -> WeightVector:
    """Marginal importance weights ``w(x_i, e_i) = p(e_i|x_i, pi_e) / p(e_i|x_i, pi_b)``.

    ``p(e|x, pi) = sum_a pi(a|x) prod_k p(e_k|x, a)`` is computed exactly from
    the environment's embedding tables, at ``O(n_actions * d_e)`` per sample.
    """
    pe = _policy_rows(pi_e_rows, dataset)
    pb = _policy_rows(pi_b_rows, dataset)
    likelihood = embedding_likelihood(env, dataset.embedding)
    num = np.einsum("na,na->n", pe, likelihood)
    den = np.einsum("na,na->n", pb, likelihood)
    if np.any(den <= 0):
        raise SupportViolationError("logged embedding has zero probability under the behavior policy")
    return WeightVector(num / den, kind="marginal")


def embedding_likelihood(env: "Environment", embedding: np.ndarray) -> np.ndarray:
    """``p(e_i | x, a)`` for each logged embedding and every action, shape (n, n_actions)."""
    embedding = np.atleast_2d(embedding)
    tables = env.embed_probs_by_category
    out = tables[0][embedding[:, 0]]
    for k in range(1, len(tables)):
        out *= tables[k][embedding[:, k]]
    return out


def estimate_dm(dataset: LoggedDataset, pi_e_rows, qhat_xa: QhatXA) -> Estimate:
    """Direct method: ``mean_i sum_a pi_e(a|x_i) q_hat(x_i, a)``."""
    pe = _policy_rows(pi_e_rows, dataset)
    q = _qhat_matrix(qhat_xa, dataset)
    return Estimate("dm", _fsum_mean(np.einsum("na,na->n", pe, q)), dataset.n)


def estimate_ips(dataset: LoggedDataset, pi_e_rows) -> Estimate:
    w = vanilla_weights(dataset, pi_e_rows).values
    return Estimate("ips", _fsum_mean(w * dataset.reward), dataset.n)


def estimate_dr(dataset: LoggedDataset, pi_e_rows, qhat_xa: QhatXA) -> Estimate:
    """Doubly robust: DM baseline plus vanilla-weighted residuals of ``q_hat(x, a)``."""
    pe = _policy_rows(pi_e_rows, dataset)
    q = _qhat_matrix(qhat_xa, dataset)
    w = vanilla_weights(dataset, pe).values
    baseline = np.einsum("na,na->n", pe, q)
    residual = dataset.reward - q[np.arange(dataset.n), dataset.action]
    return Estimate("dr", _fsum_mean(baseline + w * residual), dataset.n)


def estimate_mips(dataset: LoggedDataset, weights: WeightVector) -> Estimate:
    w = _check_weights(weights, dataset, "marginal")
    return Estimate("mips", _fsum_mean(w * dataset.reward), dataset.n)


def estimate_mdr(
    dataset: LoggedDataset,
    pi_e_rows,
    qhat_xa: QhatXA,
    qhat_xae: QhatXAE,
    weights: WeightVector,
) -> Estimate:
    """Marginalized doubly robust estimate.

    Uses the DM baseline with ``q_hat(x, a)`` and corrects it with residuals
    ``r_i - q_hat(x_i, a_i, e_i)`` weighted by the marginal embedding weights.
    """
    w = _check_weights(weights, dataset, "marginal")
    pe = _policy_rows(pi_e_rows, dataset)
    q = _qhat_matrix(qhat_xa, dataset)
    baseline = np.einsum("na,na->n", pe, q)
    residual = dataset.reward - _qhat_logged(qhat_xae, dataset)
    return Estimate("mdr", _fsum_mean(baseline + w * residual), dataset.n)


@dataclass(frozen=True)
class FeatureConfig:
    """Feature map for the reward regression.

    Raw context features, one-hot embedding categories per dimension (first
    category dropped as reference) and, optionally, one-hot actions.
    """

    context: bool = True
    embedding: bool = True
    action: bool = False

    @property
    def tag(self) -> str:
        parts = [name for name in ("context", "embedding", "action") if getattr(self, name)]
        return "+".join(parts) or "intercept"


class SupportsPredictXAE(Protocol):
    def predict_xae(self, x: np.ndarray, a: np.ndarray, e: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Ridge regression ``q_hat(x, a, e) = b + phi(x, a, e)' w`` with an unpenalized intercept."""

    intercept: float
    coef_context: np.ndarray
    coef_embedding: tuple[np.ndarray, ...]
    coef_action: np.ndarray | None
    ridge_lambda: float
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    additive = True

    @property
    def n_actions(self) -> int | None:
        return None if self.coef_action is None else self.coef_action.shape[0]

    def predict_xae(self, x: np.ndarray, a: np.ndarray, e: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        e = np.atleast_2d(np.asarray(e, dtype=np.int64))
        out = np.full(x.shape[0], self.intercept)
        if self.feature_config.context:
            out = out + x @ self.coef_context
        if self.feature_config.embedding:
            for k, coef in enumerate(self.coef_embedding):
                out = out + coef[e[:, k]]
        if self.coef_action is not None:
            out = out + self.coef_action[np.asarray(a, dtype=np.int64).reshape(-1)]
        return out

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef_context": self.coef_context.tolist(),
            "coef_embedding": [c.tolist() for c in self.coef_embedding],
            "coef_action": None if self.coef_action is None else self.coef_action.tolist(),
            "ridge_lambda": self.ridge_lambda,
            "feature_config": {
                "context": self.feature_config.context,
                "embedding": self.feature_config.embedding,
                "action": self.feature_config.action,
                "tag": self.feature_config.tag,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardModel":
        fc = {k: v for k, v in d["feature_config"].items() if k != "tag"}
        return cls(
            intercept=float(d["intercept"]),
            coef_context=np.array(d["coef_context"], dtype=float),
            coef_embedding=tuple(np.array(c, dtype=float) for c in d["coef_embedding"]),
            coef_action=None if d["coef_action"] is None else np.array(d["coef_action"], dtype=float),
            ridge_lambda=float(d["ridge_lambda"]),
            feature_config=FeatureConfig(**fc),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RewardModel":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _design_matrix(dataset: LoggedDataset, config: FeatureConfig) -> np.ndarray:
    blocks = []
    n = dataset.n
    if config.context:
        blocks.append(dataset.context)
    if config.embedding:
        for k, c in enumerate(dataset.cardinalities):
            onehot = np.zeros((n, c - 1))
            rows = np.flatnonzero(dataset.embedding[:, k] > 0)
            onehot[rows, dataset.embedding[rows, k] - 1] = 1.0
            blocks.append(onehot)
    if config.action:
        onehot = np.zeros((n, dataset.n_actions - 1))
        rows = np.flatnonzero(dataset.action > 0)
        onehot[rows, dataset.action[rows] - 1] = 1.0
        blocks.append(onehot)
    return np.hstack(blocks) if blocks else np.zeros((n, 0))


def fit_qhat(
    dataset: LoggedDataset,
    feature_config: FeatureConfig | None = None,
    ridge_lambda: float = 1.0,
) -> RewardModel:
    """Fit ``q_hat(x, a, e)`` by ridge least squares on the logged rewards.

    The penalty is ``ridge_lambda * ||w||^2`` on the centered design; the
    intercept is not penalized, so a huge penalty leaves the reward mean.

    Raises
    ------
    NumericalError
        If ``ridge_lambda == 0`` and the normal equations are singular.
    """
    config = feature_config or FeatureConfig()
    if ridge_lambda < 0:
        raise ValidationError("ridge_lambda must be non-negative")
    X = _design_matrix(dataset, config)
    y = dataset.reward
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc
    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise NumericalError("singular normal equations; use ridge_lambda > 0")
    if X.shape[1]:
        gram[np.diag_indices_from(gram)] += ridge_lambda
        try:
            coef = linalg.solve(gram, Xc.T @ (y - y_mean), assume_a="pos")
        except linalg.LinAlgError as exc:
            raise NumericalError(str(exc)) from exc
    else:
        coef = np.zeros(0)
    intercept = float(y_mean - x_mean @ coef)

    offset = 0
    coef_context = np.zeros(dataset.dim_context)
    if config.context:
        coef_context = coef[: dataset.dim_context]
        offset = dataset.dim_context
    coef_embedding = []
    for c in dataset.cardinalities:
        block = np.zeros(c)
        if config.embedding:
            block[1:] = coef[offset : offset + c - 1]
            offset += c - 1
        coef_embedding.append(block)
    coef_action = None
    if config.action:
        coef_action = np.zeros(dataset.n_actions)
        coef_action[1:] = coef[offset : offset + dataset.n_actions - 1]
    return RewardModel(
        intercept=intercept,
        coef_context=coef_context,
        coef_embedding=tuple(coef_embedding),
        coef_action=coef_action,
        ridge_lambda=float(ridge_lambda),
        feature_config=config,
    )


def marginalize_qhat(
    env: "Environment",
    model: SupportsPredictXAE,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``x -> q_hat(x, a)`` for all actions, ``q_hat(x, a) = E_{p(e|x,a)}[q_hat(x, a, e)]``.

    Models exposing ``predict_xa`` are used as is. A :class:`RewardModel` is
    additive over embedding dimensions and is integrated one dimension at a
    time. Any other model is integrated by enumerating the product embedding
    space, which must have at most ``cap`` elements.
    """
    if hasattr(model, "predict_xa"):
        return model.predict_xa
    tables = env.embed_tables()
    A = env.n_actions

    if isinstance(model, RewardModel):
        per_action = np.zeros(A)
        if model.feature_config.embedding:
            for table, coef in zip(tables, model.coef_embedding):
                per_action = per_action + table @ coef
        if model.coef_action is not None:
            per_action = per_action + model.coef_action

        def qhat_xa(x: np.ndarray) -> np.ndarray:
            x = np.atleast_2d(x)
            base = np.full(x.shape[0], model.intercept)
            if model.feature_config.context:
                base = base + x @ model.coef_context
            return base[:, None] + per_action[None, :]

        return qhat_xa

    space = np.array(list(iter_embedding_space(env.cardinalities, cap)), dtype=np.int64)
    if space.shape[0] * A > cap:
        raise CapacityError("product embedding space times actions exceeds the enumeration cap")
    prob = np.ones((A, space.shape[0]))
    for k, table in enumerate(tables):
        prob *= table[:, space[:, k]]

    def qhat_xa_enum(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], A))
        actions = np.repeat(np.arange(A), space.shape[0])
        embeds = np.tile(space, (A, 1))
        for i, xi in enumerate(x):
            vals = model.predict_xae(np.broadcast_to(xi, (actions.shape[0], xi.shape[0])), actions, embeds)
            out[i] = (prob * vals.reshape(A, -1)).sum(axis=1)
        return out

    return qhat_xa_enum
