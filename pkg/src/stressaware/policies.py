"""The four EMA-triggering policies behind one decision interface.

Policies: random-rate, density-driven statistical triggering, and two DQN
variants (uncertainty-only "traditional" active learning and the full
context-aware agent). A shared daily-cap wrapper limits every policy to 7
queries per subject per civil day, and a response-rate table tracks per-hour
answer behavior for the agent's state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .agent import ACTION_QUERY, AgentState, DqnAgent
from .errors import NotReadyError, ParameterError
from .models import TrainedClassifier, train_matrix

SECONDS_PER_DAY = 86400.0

POLICY_RANDOM = "random"
POLICY_STATISTICAL = "statistical"
POLICY_TRADITIONAL_AL = "traditional_al"
POLICY_CONTEXT_AWARE = "context_aware"

DAILY_QUERY_CAP = 7
DEFAULT_FORCED_EXPLORATION = 0.05


@dataclass(frozen=True)
class PolicyDecision:
    trigger: bool
    probability_used: float
    rationale: str

    def __post_init__(self):
        if not 0.0 <= self.probability_used <= 1.0:
            raise ParameterError(
                f"probability_used must be in [0, 1], got {self.probability_used}"
            )


NO_QUERY_DECISION = PolicyDecision(trigger=False, probability_used=0.0, rationale="off")


class ResponseRateTable:
    """Per-hour empirical answer rates with a 0.5 prior for unseen hours."""

    def __init__(self):
        self.delivered = np.zeros(24, dtype=int)
        self.answered = np.zeros(24, dtype=int)
        self._rates = np.full(24, 0.5)

    def rates(self) -> np.ndarray:
        return self._rates.copy()

    def __getitem__(self, hour: int) -> float:
        return float(self._rates[hour])

    def recompute(self) -> None:
        with np.errstate(invalid="ignore"):
            raw = self.answered / self.delivered
        self._rates = np.where(self.delivered > 0, raw, 0.5)

    def copy(self) -> "ResponseRateTable":
        other = ResponseRateTable()
        other.delivered = self.delivered.copy()
        other.answered = self.answered.copy()
        other._rates = self._rates.copy()
        return other


def update_response_rates(table: ResponseRateTable,
                          events: list[tuple[int, bool]]) -> ResponseRateTable:
    """Fold (hour, answered) delivery events into the table and refresh rates.

    Called on the study cadence (every 100 decision occasions); hours with no
    deliveries keep the 0.5 prior.
    """
    for hour, answered in events:
        table.delivered[hour] += 1
        if answered:
            table.answered[hour] += 1
    table.recompute()
    return table


class DailyCap:
    """Shared budget guard: at most 7 queries per subject per civil day."""

    def __init__(self, limit: int = DAILY_QUERY_CAP):
        self.limit = limit
        self._counts: dict[tuple[str, int], int] = {}

    def _key(self, subject_id: str, timestamp: float) -> tuple[str, int]:
        return (subject_id, int(timestamp // SECONDS_PER_DAY))

    def remaining(self, subject_id: str, timestamp: float) -> int:
        return self.limit - self._counts.get(self._key(subject_id, timestamp), 0)

    def guard(self, subject_id: str, timestamp: float,
              decision: PolicyDecision) -> PolicyDecision:
        """Demote a Query decision to NoQuery once the day's budget is spent."""
        if not decision.trigger:
            return decision
        key = self._key(subject_id, timestamp)
        if self._counts.get(key, 0) >= self.limit:
            return PolicyDecision(trigger=False,
                                  probability_used=decision.probability_used,
                                  rationale="daily-cap")
        self._counts[key] = self._counts.get(key, 0) + 1
        return decision


def random_policy(rate: float, rng: np.random.Generator) -> PolicyDecision:
    """Query with fixed probability; the baseline every comparison runs against."""
    if not 0.0 <= rate <= 1.0:
        raise ParameterError(f"rate must be in [0, 1], got {rate}")
    trigger = bool(rate > 0.0 and rng.random() < rate)
    return PolicyDecision(trigger=trigger, probability_used=rate, rationale="random")


class DensityTracker:
    """Region densities over the two leading principal axes of the warm-up features.

    The first ``warmup_target`` samples are observation only. At fit time the
    feature cloud is projected onto its top-2 principal axes and split into a
    ``grid x grid`` lattice; from then on each candidate's query probability is
    the region's unlabeled count relative to the densest region, floored at
    0.1, and a region that has reached its label quota is closed for good.
    """

    def __init__(self, warmup_target: int = 100, grid: int = 10, quota: int = 5,
                 floor: float = 0.1):
        if quota <= 0:
            raise ParameterError("quota must be positive")
        self.warmup_target = warmup_target
        self.grid = grid
        self.quota = quota
        self.floor = floor
        self._warmup: list[np.ndarray] = []
        self.fitted = False
        self._mean: np.ndarray | None = None
        self._axes: np.ndarray | None = None
        self._low: np.ndarray | None = None
        self._high: np.ndarray | None = None
        self.unlabeled = np.zeros((grid, grid), dtype=int)
        self.labeled = np.zeros((grid, grid), dtype=int)

    @property
    def warmup_seen(self) -> int:
        return len(self._warmup)

    def observe_warmup(self, features: np.ndarray) -> None:
        if self.fitted:
            raise NotReadyError("tracker already fitted; warm-up is over")
        self._warmup.append(np.asarray(features, dtype=float))

    def fit(self) -> None:
        if self.fitted:
            return
        if len(self._warmup) < 2:
            raise NotReadyError("need at least 2 warm-up samples to fit regions")
        X = np.stack(self._warmup)
        self._mean = X.mean(axis=0)
        centered = X - self._mean
        cov = centered.T @ centered / X.shape[0]
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        axes = eigenvectors[:, np.argsort(eigenvalues)[::-1][:2]].T
        # Deterministic sign: the largest-magnitude component points positive.
        for i in range(axes.shape[0]):
            j = int(np.argmax(np.abs(axes[i])))
            if axes[i, j] < 0:
                axes[i] = -axes[i]
        self._axes = axes
        projected = centered @ axes.T
        self._low = projected.min(axis=0)
        self._high = np.maximum(projected.max(axis=0), self._low + 1e-9)
        self.fitted = True
        for row in self._warmup:
            i, j = self.region_of(row)
            self.unlabeled[i, j] += 1
        self._warmup.clear()

    def region_of(self, features: np.ndarray) -> tuple[int, int]:
        if not self.fitted:
            raise NotReadyError("tracker not fitted yet")
        projected = (np.asarray(features, dtype=float) - self._mean) @ self._axes.T
        frac = (projected - self._low) / (self._high - self._low)
        cell = np.clip((frac * self.grid).astype(int), 0, self.grid - 1)
        return int(cell[0]), int(cell[1])

    def query_probability(self, features: np.ndarray) -> float:
        """0 for quota-closed regions, else density ratio floored at 0.1."""
        i, j = self.region_of(features)
        if self.labeled[i, j] >= self.quota:
            return 0.0
        densest = int(self.unlabeled.max())
        if densest == 0:
            return self.floor
        return max(self.floor, self.unlabeled[i, j] / densest)

    def record_outcome(self, features: np.ndarray, labeled: bool) -> None:
        """Count the sample in its region once its label outcome is known."""
        i, j = self.region_of(features)
        if labeled:
            self.labeled[i, j] += 1
        else:
            self.unlabeled[i, j] += 1


def statistical_policy(sample_index: int, sample_features: np.ndarray,
                       tracker: DensityTracker, rng: np.random.Generator,
                       ) -> PolicyDecision:
    """Observation for the first N samples, then density-proportional querying."""
    if sample_index < tracker.warmup_target:
        tracker.observe_warmup(sample_features)
        return PolicyDecision(trigger=False, probability_used=0.0, rationale="warmup")
    if not tracker.fitted:
        tracker.fit()
    probability = tracker.query_probability(sample_features)
    if probability <= 0.0:
        return PolicyDecision(trigger=False, probability_used=0.0,
                              rationale="quota-closed")
    trigger = bool(rng.random() < probability)
    return PolicyDecision(trigger=trigger, probability_used=probability,
                          rationale="density")


def _query_probability(agent: DqnAgent, state: AgentState, epsilon: float,
                       forced_exploration: float = 0.0) -> float:
    """Bernoulli probability that the mixture policy emits Query for this state."""
    q = agent.q_values(state)
    greedy_is_query = float(q[ACTION_QUERY] > q[1 - ACTION_QUERY])
    p = (1.0 - epsilon) * greedy_is_query + epsilon / 2.0
    return forced_exploration + (1.0 - forced_exploration) * p


def traditional_al_policy(agent: DqnAgent, p_stress: float,
                          rng: np.random.Generator,
                          epsilon: float | None = None) -> PolicyDecision:
    """Uncertainty-only selection: the agent sees no context.

    The non-uncertainty state components are pinned at the neutral 0.5, so
    only the classifier's distance to its decision boundary drives the choice.
    The agent behind this policy is trained with the uncertainty-only reward.
    """
    uncertainty = 1.0 - 2.0 * abs(p_stress - 0.5)
    state = AgentState(uncertainty=uncertainty, response_rate=0.5,
                       time_since_query=0.5, time_of_day=0.5)
    eps = agent.current_epsilon() if epsilon is None else epsilon
    action = agent.act(state, epsilon=eps, rng=rng)
    return PolicyDecision(
        trigger=action == ACTION_QUERY,
        probability_used=_query_probability(agent, state, eps),
        rationale="traditional-al",
    )


def context_aware_policy(agent: DqnAgent, state: AgentState,
                         rng: np.random.Generator,
                         forced_exploration: float = DEFAULT_FORCED_EXPLORATION,
                         exploration_rng: np.random.Generator | None = None,
                         epsilon: float | None = None) -> PolicyDecision:
    """Full-state agent decision with a small forced-exploration branch.

    Exploration draws come from their own RNG stream when provided, so turning
    exploration on or off never perturbs the epsilon-greedy draws.
    """
    eps = agent.current_epsilon() if epsilon is None else epsilon
    probability = _query_probability(agent, state, eps, forced_exploration)
    explore_rng = exploration_rng if exploration_rng is not None else rng
    if forced_exploration > 0.0 and explore_rng.random() < forced_exploration:
        return PolicyDecision(trigger=True, probability_used=probability,
                              rationale="exploration")
    action = agent.act(state, epsilon=eps, rng=rng)
    return PolicyDecision(trigger=action == ACTION_QUERY,
                          probability_used=probability, rationale="agent")


@dataclass
class DecisionRecord:
    """One line of the append-only decision log; the input to every analysis."""

    timestamp: float
    subject_id: str
    policy: str
    state: tuple[float, float, float, float]
    probability_used: float
    decision: str  # "query" | "no_query"
    answered: bool | None = None
    label5: int | None = None
    rationale: str = ""

    def to_json_dict(self) -> dict:
        return {
            "t": self.timestamp,
            "subject": self.subject_id,
            "policy": self.policy,
            "state": list(self.state),
            "p": self.probability_used,
            "decision": self.decision,
            "answered": self.answered,
            "label5": self.label5,
            "why": self.rationale,
        }

    @classmethod
    def from_json_dict(cls, row: dict) -> "DecisionRecord":
        return cls(
            timestamp=float(row["t"]),
            subject_id=row["subject"],
            policy=row["policy"],
            state=tuple(row["state"]),
            probability_used=float(row["p"]),
            decision=row["decision"],
            answered=row["answered"],
            label5=row["label5"],
            rationale=row.get("why", ""),
        )


def retrain_detector(X: np.ndarray, y: np.ndarray, feature_names: tuple[str, ...],
                     backend: str, hyperparameters: dict | None,
                     seed: int) -> TrainedClassifier | None:
    """Refit the stress detector on the pooled objective + newly labeled data.

    Returns None (with a warning) when the pool has a single class; the caller
    keeps the previous model. Swapping the returned model into a running study
    is a single reference assignment, atomic with respect to readers.
    """
    y = np.asarray(y).astype(int)
    if y.size == 0 or y.min() == y.max() or min(np.bincount(y, minlength=2)[:2]) < 2:
        warnings.warn("retraining skipped: labeled pool lacks a class",
                      stacklevel=2)
        return None
    return train_matrix(X, y, feature_names, backend=backend,
                        hyperparameters=hyperparameters, seed=seed)


class RetrainingSchedule:
    """Fires exactly once per ``cadence`` decision events."""

    def __init__(self, cadence: int = 100):
        if cadence < 1:
            raise ParameterError("cadence must be >= 1")
        self.cadence = cadence

    def due(self, event_count: int) -> bool:
        return event_count > 0 and event_count % self.cadence == 0
