"""Domain types for logged bandit data with action embeddings, plus support checks."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from .synthetic import Environment

ROW_SUM_TOL = 1e-12
DEFAULT_ENUMERATION_CAP = 10**6


class OPELabError(Exception):
    """Base class for all package errors."""


class ShapeError(OPELabError, ValueError):
    pass


class ValidationError(OPELabError, ValueError):
    pass


class SupportViolationError(OPELabError):
    """An importance weight would divide by a zero behavior probability."""


class CapacityError(OPELabError):
    """An exact enumeration would exceed the configured cap."""


class NumericalError(OPELabError):
    pass


@dataclass(frozen=True)
class PolicyMatrix:
    """Action probabilities, one row per context.

    Parameters
    ----------
    probs: array-like, shape (n_contexts, n_actions)
        Row-stochastic matrix of action-choice probabilities.
    tag: str
        Either ``"behavior"`` or ``"evaluation"``.
    """

    probs: np.ndarray
    tag: str = "evaluation"

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ShapeError(f"policy matrix must be 2-d, got shape {probs.shape}")
        if self.tag not in ("behavior", "evaluation"):
            raise ValidationError(f"unknown policy tag {self.tag!r}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValidationError("policy probabilities must be finite and non-negative")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValidationError("every policy row must sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_contexts(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


def _as_probs(policy: PolicyMatrix | np.ndarray) -> np.ndarray:
    if isinstance(policy, PolicyMatrix):
        return policy.probs
    return np.asarray(policy, dtype=float)


@dataclass(frozen=True)
class LoggedSample:
    context: np.ndarray
    action: int
    embedding: tuple[int, ...]
    reward: float
    behavior_propensity: float


@dataclass(frozen=True)
class LoggedDataset:
    """Logged bandit feedback ``{(x_i, a_i, e_i, r_i)}`` with behavior propensities.

    Stored column-wise; ``samples`` / iteration give the per-row view.
    """

    context: np.ndarray
    action: np.ndarray
    embedding: np.ndarray
    reward: np.ndarray
    pscore: np.ndarray
    n_actions: int
    cardinalities: tuple[int, ...]
    seed: int | None = None
    context_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        context = np.atleast_2d(np.asarray(self.context, dtype=float))
        action = np.asarray(self.action, dtype=np.int64).reshape(-1)
        embedding = np.asarray(self.embedding, dtype=np.int64)
        if embedding.ndim == 1:
            embedding = embedding[:, None]
        reward = np.asarray(self.reward, dtype=float).reshape(-1)
        pscore = np.asarray(self.pscore, dtype=float).reshape(-1)
        cards = tuple(int(c) for c in self.cardinalities)
        n = action.shape[0]
        if n < 1:
            raise ValidationError("a logged dataset needs at least one sample")
        for name, arr in (("context", context), ("embedding", embedding), ("reward", reward), ("pscore", pscore)):
            if arr.shape[0] != n:
                raise ShapeError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if embedding.shape[1] != len(cards):
            raise ShapeError("embedding width must match the number of cardinalities")
        if np.any(action < 0) or np.any(action >= self.n_actions):
            raise ValidationError("action index out of range")
        if np.any(embedding < 0) or np.any(embedding >= np.asarray(cards)):
            raise ValidationError("embedding category out of range")
        if not np.all(np.isfinite(context)) or not np.all(np.isfinite(reward)):
            raise ValidationError("contexts and rewards must be finite")
        if np.any(pscore <= 0):
            raise SupportViolationError("a logged action has zero behavior propensity")
        if np.any(pscore > 1):
            raise ValidationError("behavior propensities cannot exceed 1")
        for name, arr in (("context", context), ("action", action), ("embedding", embedding),
                          ("reward", reward), ("pscore", pscore)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "cardinalities", cards)
        if self.context_index is not None:
            idx = np.asarray(self.context_index, dtype=np.int64).reshape(-1)
            if idx.shape[0] != n:
                raise ShapeError("context_index must have one entry per sample")
            idx.setflags(write=False)
            object.__setattr__(self, "context_index", idx)

    @property
    def n(self) -> int:
        return self.action.shape[0]

    @property
    def dim_context(self) -> int:
        return self.context.shape[1]

    @property
    def dim_embedding(self) -> int:
        return len(self.cardinalities)

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[LoggedSample]:
        for i in range(self.n):
            yield LoggedSample(
                context=self.context[i],
                action=int(self.action[i]),
                embedding=tuple(int(v) for v in self.embedding[i]),
                reward=float(self.reward[i]),
                behavior_propensity=float(self.pscore[i]),
            )

    @property
    def samples(self) -> list[LoggedSample]:
        return list(self)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[LoggedSample],
        n_actions: int,
        cardinalities: Sequence[int],
        seed: int | None = None,
    ) -> "LoggedDataset":
        return cls(
            context=np.array([s.context for s in samples], dtype=float),
            action=np.array([s.action for s in samples]),
            embedding=np.array([s.embedding for s in samples]),
            reward=np.array([s.reward for s in samples]),
            pscore=np.array([s.behavior_propensity for s in samples]),
            n_actions=n_actions,
            cardinalities=tuple(cardinalities),
            seed=seed,
        )

    def subset(self, idx: np.ndarray) -> "LoggedDataset":
        return LoggedDataset(
            context=self.context[idx],
            action=self.action[idx],
            embedding=self.embedding[idx],
            reward=self.reward[idx],
            pscore=self.pscore[idx],
            n_actions=self.n_actions,
            cardinalities=self.cardinalities,
            seed=self.seed,
            context_index=None if self.context_index is None else self.context_index[idx],
        )

    def header(self) -> dict:
        return {
            "n": self.n,
            "n_actions": self.n_actions,
            "dim_context": self.dim_context,
            "dim_embedding": self.dim_embedding,
            "cardinalities": list(self.cardinalities),
            "seed": self.seed,
        }

    def to_jsonl(self) -> str:
        """Serialize as JSON lines: a header object, then one object per sample."""
        lines = [json.dumps(self.header())]
        for i in range(self.n):
            row = {
                "x": self.context[i].tolist(),
                "a": int(self.action[i]),
                "e": self.embedding[i].tolist(),
                "r": float(self.reward[i]),
                "pb": float(self.pscore[i]),
            }
            if self.context_index is not None:
                # pool-mode datasets also record which pooled context was drawn
                row["ci"] = int(self.context_index[i])
            lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "LoggedDataset":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise ValidationError("empty JSONL document")
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:]]
        if len(rows) != header["n"]:
            raise ShapeError(f"header announces {header['n']} samples, found {len(rows)}")
        context = np.array([row["x"] for row in rows], dtype=float).reshape(len(rows), header["dim_context"])
        return cls(
            context=context,
            action=np.array([row["a"] for row in rows]),
            embedding=np.array([row["e"] for row in rows]).reshape(len(rows), header["dim_embedding"]),
            reward=np.array([row["r"] for row in rows]),
            pscore=np.array([row["pb"] for row in rows]),
            n_actions=header["n_actions"],
            cardinalities=tuple(header["cardinalities"]),
            seed=header.get("seed"),
            context_index=np.array([row["ci"] for row in rows]) if rows and "ci" in rows[0] else None,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "LoggedDataset":
        return cls.from_jsonl(Path(path).read_text())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LoggedDataset):
            return NotImplemented
        return (
            self.header() == other.header()
            and np.array_equal(self.context, other.context)
            and np.array_equal(self.action, other.action)
            and np.array_equal(self.embedding, other.embedding)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.pscore, other.pscore)
            and (
                (self.context_index is None and other.context_index is None)
                or (
                    self.context_index is not None
                    and other.context_index is not None
                    and np.array_equal(self.context_index, other.context_index)
                )
            )
        )

    __hash__ = None  # type: ignore[assignment]


def check_common_support(
    pi_e: PolicyMatrix | np.ndarray, pi_b: PolicyMatrix | np.ndarray
) -> tuple[bool, list[tuple[int, int]]]:
    """Check that ``pi_e(a|x) > 0`` implies ``pi_b(a|x) > 0`` for every row and action.

    Returns ``(holds, violations)`` where ``violations`` lists failing
    ``(context_index, action)`` pairs.
    """
    pe, pb = _as_probs(pi_e), _as_probs(pi_b)
    if pe.shape != pb.shape:
        raise ShapeError(f"policy shapes differ: {pe.shape} vs {pb.shape}")
    bad = np.argwhere((pe > 0) & (pb <= 0))
    violations = [(int(i), int(a)) for i, a in bad]
    return not violations, violations


def marginal_embedding_dist(
    policy_row: np.ndarray,
    embed_dist: Sequence[np.ndarray],
    e: Sequence[int],
) -> float:
    """Probability of embedding ``e`` under the policy-mixture ``sum_a pi(a|x) p(e|x,a)``.

    ``embed_dist[k]`` has shape (n_actions, |E_k|) and holds ``p(e_k = c | x, a)``.
    """
    policy_row = np.asarray(policy_row, dtype=float)
    if len(e) != len(embed_dist):
        raise ShapeError("embedding length does not match number of embedding dimensions")
    likelihood = np.ones_like(policy_row)
    for table, ek in zip(embed_dist, e):
        table = np.asarray(table, dtype=float)
        if table.shape[0] != policy_row.shape[0]:
            raise ShapeError("embedding table rows must match the number of actions")
        likelihood = likelihood * table[:, int(ek)]
    return float(policy_row @ likelihood)


def iter_embedding_space(cardinalities: Sequence[int], cap: int = DEFAULT_ENUMERATION_CAP):
    size = int(np.prod(cardinalities))
    if size > cap:
        raise CapacityError(f"embedding space has {size} elements, above the enumeration cap {cap}")
    return itertools.product(*(range(c) for c in cardinalities))


def check_common_embedding_support(
    env: "Environment",
    pi_e: PolicyMatrix | np.ndarray,
    pi_b: PolicyMatrix | np.ndarray,
    context_pool: np.ndarray,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> tuple[bool, list[tuple[int, tuple[int, ...]]]]:
    """Check ``p(e|x,pi_e) > 0`` implies ``p(e|x,pi_b) > 0`` on every pooled context.

    ``pi_e`` and ``pi_b`` carry one row per pooled context. The embedding space
    is enumerated in full, so its size must stay under ``cap``.
    """
    pe, pb = _as_probs(pi_e), _as_probs(pi_b)
    context_pool = np.atleast_2d(np.asarray(context_pool, dtype=float))
    if pe.shape != pb.shape or pe.shape[0] != context_pool.shape[0]:
        raise ShapeError("policy rows must align with the context pool")
    violations = []
    space = list(iter_embedding_space(env.cardinalities, cap))
    for i, x in enumerate(context_pool):
        tables = env.embed_tables(x)
        for e in space:
            if marginal_embedding_dist(pe[i], tables, e) > 0 and marginal_embedding_dist(pb[i], tables, e) <= 0:
                violations.append((i, tuple(e)))
    return not violations, violations
