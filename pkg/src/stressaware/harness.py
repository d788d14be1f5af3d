"""End-to-end studies on synthetic cohorts.

Three experiments mirror the deployment lifecycle:

* ``run_offline_study`` — statistical label collection over the cohort, then
  personalization curves for a target subject under random / uncertainty-only
  / context-aware selection with budgets down-sampled to the smallest group.
* ``run_online_study`` — a simulated real-time loop: every burst flows through
  dsp -> features -> detector -> agent state -> policy decision -> optional
  EMA -> label attachment, with response rates refreshed and the detector
  retrained every 100 decision events.
* ``personalization_study`` — leave-one-subject-out with a temporal half
  split, plain vs personalized models, per-subject and pooled metrics.

Every replication draws from its own SeedSequence child, so replication k's
results do not depend on how many replications run after it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agent import (
    ACTION_QUERY,
    AgentConfig,
    AgentState,
    DqnAgent,
    hour_of,
    train_offline,
)
from .dsp import window_to_nn
from .errors import ExperimentError, InsufficientBeatsError, ParameterError
from .features import encode_context, extract_hrv_features, feature_names
from .metrics import EvalMetrics, evaluate_scores, mean_metrics, roc_auc
from .models import TrainedClassifier, binarize_label, kfold_evaluate, train_matrix
from .policies import (
    POLICY_CONTEXT_AWARE,
    POLICY_RANDOM,
    POLICY_STATISTICAL,
    POLICY_TRADITIONAL_AL,
    DailyCap,
    DecisionRecord,
    DensityTracker,
    ResponseRateTable,
    RetrainingSchedule,
    context_aware_policy,
    random_policy,
    retrain_detector,
    statistical_policy,
    traditional_al_policy,
    update_response_rates,
)
from .simulator import (
    EVENT_EMA_ANSWERED,
    LABEL_HORIZON_S,
    Cohort,
    burst_rng,
    deliver_ema,
    generate_context,
    generate_ppg_waveform,
    synth_cohort,
)

RNG_PURPOSE_WAVEFORM = 1
RNG_PURPOSE_CONTEXT = 2

COMPARED_POLICIES = (POLICY_RANDOM, POLICY_TRADITIONAL_AL, POLICY_CONTEXT_AWARE)

METRICS_SCHEMA_VERSION = 1
CURVES_SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    """Desk-scale defaults; ``paper_scale()`` restores the published sizes."""

    n_subjects: int = 10
    days: int = 14
    seed: int = 0
    heterogeneity: float = 1.0
    replications: int = 20
    backend: str = "bagged_trees"
    detector_hyperparameters: dict = field(default_factory=lambda: {"n_trees": 30})
    agent_steps: int = 20_000
    include_context: bool = True
    recall_targets: tuple = (0.40, 0.55, 0.70)
    budget_levels: int = 6
    random_query_rate: float = 0.5
    stat_warmup: int = 100
    online_split_days: int | None = None  # statistical phase length; default days // 3

    def __post_init__(self):
        if self.replications < 1:
            raise ParameterError("replications must be >= 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "ExperimentConfig":
        base = dict(n_subjects=34, days=14, replications=100, agent_steps=200_000,
                    detector_hyperparameters={"n_trees": 500, "max_depth": 5})
        base.update(overrides)
        return cls(**base)


@dataclass
class BurstSample:
    """One materialized burst: extracted features plus ground truth for scoring."""

    subject_id: str
    index: int
    timestamp: float
    x_full: np.ndarray
    x_ppg: np.ndarray
    latent: int
    report5: int  # the label the subject would give if they answered now

    @property
    def report2(self) -> int:
        return binarize_label(self.report5)


@dataclass
class CurvePoint:
    queries_used: int
    mean: float
    std: float


@dataclass
class QueriesToTarget:
    level: float
    mean_queries: float | None
    std_queries: float | None
    reached_fraction: float
    saturated: bool


# ---------------------------------------------------------------------------
# Materialization: cohort -> feature vectors
# ---------------------------------------------------------------------------


def materialize_cohort(cohort: Cohort) -> dict[str, list[BurstSample]]:
    """Run every burst through waveform synthesis, conditioning, and features.

    Bursts whose beat detection fails are dropped (they would be discarded as
    noise in deployment too). The would-be report for each burst is drawn from
    a burst-keyed stream, so it is identical no matter which policy later asks.
    """
    from .simulator import draw_label5

    out: dict[str, list[BurstSample]] = {}
    for profile in cohort.profiles:
        samples: list[BurstSample] = []
        for event in cohort.bursts[profile.subject_id]:
            idx = event.payload["index"]
            latent = event.payload["latent_stress"]
            window = generate_ppg_waveform(
                profile, latent, burst_rng(profile, idx, RNG_PURPOSE_WAVEFORM),
                start_time=event.timestamp,
            )
            try:
                hrv = extract_hrv_features(window_to_nn(window))
            except InsufficientBeatsError:
                continue
            snapshot = generate_context(
                profile, event.timestamp, latent,
                burst_rng(profile, idx, RNG_PURPOSE_CONTEXT),
            )
            context = encode_context(snapshot)
            report5 = draw_label5(
                latent, profile.label_noise, burst_rng(profile, idx, 3)
            )
            hrv_block = hrv.as_array()
            samples.append(BurstSample(
                subject_id=profile.subject_id,
                index=idx,
                timestamp=event.timestamp,
                x_full=np.concatenate([hrv_block, context]),
                x_ppg=hrv_block,
                latent=latent,
                report5=report5,
            ))
        out[profile.subject_id] = samples
    return out


def _matrices(samples: list[BurstSample], labels: list[int],
              include_context: bool) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.x_full if include_context else s.x_ppg for s in samples])
    return X, np.array([binarize_label(v) for v in labels], dtype=int)


def _child_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Statistical collection (the offline study's phase 1 / the online study's prior)
# ---------------------------------------------------------------------------


@dataclass
class CollectionResult:
    log: list[DecisionRecord]
    labeled: dict[str, list[tuple[BurstSample, int]]]  # (sample, reported label5)
    rr_tables: dict[str, ResponseRateTable]


def run_statistical_collection(cohort: Cohort, data: dict[str, list[BurstSample]],
                               seed: int, warmup: int = 100,
                               days: tuple[int, int] | None = None,
                               ) -> CollectionResult:
    """Density-driven collection over (a day range of) the cohort streams."""
    root = np.random.SeedSequence([seed, 0x57A7])
    log: list[DecisionRecord] = []
    labeled: dict[str, list[tuple[BurstSample, int]]] = {}
    rr_tables: dict[str, ResponseRateTable] = {}
    for profile in cohort.profiles:
        subject = profile.subject_id
        samples = data[subject]
        if days is not None:
            lo, hi = days[0] * 86400.0, days[1] * 86400.0
            samples = [s for s in samples if lo <= s.timestamp < hi]
        policy_rng = np.random.default_rng(np.random.SeedSequence([seed, profile.seed, 1]))
        answer_rng = np.random.default_rng(np.random.SeedSequence([seed, profile.seed, 2]))
        tracker = DensityTracker(warmup_target=warmup)
        cap = DailyCap()
        table = ResponseRateTable()
        pending_events: list[tuple[int, bool]] = []
        collected: list[tuple[BurstSample, int]] = []
        queries_today: dict[int, int] = {}
        for i, sample in enumerate(samples):
            decision = statistical_policy(i, sample.x_full, tracker, policy_rng)
            decision = cap.guard(subject, sample.timestamp, decision)
            answered = None
            label5 = None
            if decision.trigger:
                day = int(sample.timestamp // 86400.0)
                event = deliver_ema(profile, sample.timestamp,
                                    queries_today.get(day, 0), sample.latent,
                                    answer_rng)
                queries_today[day] = queries_today.get(day, 0) + 1
                answered = event.kind == EVENT_EMA_ANSWERED
                attached = (
                    answered
                    and event.timestamp - sample.timestamp <= LABEL_HORIZON_S
                )
                if attached:
                    label5 = event.payload["label5"]
                    collected.append((sample, label5))
                pending_events.append((int(hour_of(sample.timestamp)), bool(answered)))
            if tracker.fitted:
                tracker.record_outcome(sample.x_full, labeled=label5 is not None)
            log.append(DecisionRecord(
                timestamp=sample.timestamp, subject_id=subject,
                policy=POLICY_STATISTICAL,
                state=(0.0, 0.0, 0.0, hour_of(sample.timestamp) / 24.0),
                probability_used=decision.probability_used,
                decision="query" if decision.trigger else "no_query",
                answered=answered, label5=label5, rationale=decision.rationale,
            ))
            if (i + 1) % 100 == 0 and pending_events:
                update_response_rates(table, pending_events)
                pending_events = []
        if pending_events:
            update_response_rates(table, pending_events)
        labeled[subject] = collected
        rr_tables[subject] = table
    return CollectionResult(log=log, labeled=labeled, rr_tables=rr_tables)


def _train_detector_on_pool(pool: list[tuple[BurstSample, int]], config: ExperimentConfig,
                            seed: int) -> TrainedClassifier:
    samples = [s for s, _ in pool]
    labels = [l for _, l in pool]
    X, y = _matrices(samples, labels, config.include_context)
    if np.unique(y).size < 2:
        raise ExperimentError("collected pool has a single class; cannot train")
    return train_matrix(X, y, feature_names(config.include_context),
                        backend=config.backend,
                        hyperparameters=config.detector_hyperparameters, seed=seed)


# ---------------------------------------------------------------------------
# Agent pre-training on logged observation sequences
# ---------------------------------------------------------------------------


def build_state_sequence(samples: list[BurstSample], model: TrainedClassifier,
                         rr_table: ResponseRateTable,
                         query_times: list[float],
                         include_context: bool,
                         neutral_context: bool = False) -> list[AgentState]:
    """Agent states for a logged burst stream.

    Uncertainty comes from the given detector; responsiveness and time of day
    from the clock; time-since-query from the logged query times. With
    ``neutral_context`` the non-uncertainty components pin at 0.5 (the
    uncertainty-only agent's view).
    """
    X = np.stack([s.x_full if include_context else s.x_ppg for s in samples])
    p = model.predict_proba(X)
    states = []
    qi = 0
    last_query: float | None = None
    for sample, p_stress in zip(samples, p):
        while qi < len(query_times) and query_times[qi] <= sample.timestamp:
            last_query = query_times[qi]
            qi += 1
        uncertainty = 1.0 - 2.0 * abs(float(p_stress) - 0.5)
        if neutral_context:
            states.append(AgentState(uncertainty, 0.5, 0.5, 0.5))
        else:
            hour = hour_of(sample.timestamp)
            if last_query is None:
                since = 1.0
            else:
                since = min((sample.timestamp - last_query) / (4 * 3600.0), 1.0)
            states.append(AgentState(uncertainty, rr_table[int(hour)], since,
                                     hour / 24.0))
    return states


def pretrain_agents(states_full: list[AgentState], config: ExperimentConfig,
                    seed: int) -> tuple[DqnAgent, DqnAgent]:
    """Train the uncertainty-only and context-aware agents on a state sequence."""
    neutral = [AgentState(s.uncertainty, 0.5, 0.5, 0.5) for s in states_full]
    trad = DqnAgent(AgentConfig(total_steps=config.agent_steps,
                                reward_mode="uncertainty_only", seed=seed))
    train_offline(trad, neutral)
    ctx = DqnAgent(AgentConfig(total_steps=config.agent_steps,
                               reward_mode="contextual", seed=seed + 1))
    train_offline(ctx, states_full)
    return trad, ctx


# ---------------------------------------------------------------------------
# Offline study: collection + personalization curves
# ---------------------------------------------------------------------------


@dataclass
class OfflineStudyResult:
    collection: CollectionResult
    target_subject: str
    base_recall: float
    curves: dict[str, list[CurvePoint]]
    rep_curves: dict[str, list[list[tuple[int, float]]]]
    budget_levels: list[int]


def _select_with_policy(policy: str, pool: list[BurstSample],
                        p_stress: np.ndarray, answered: np.ndarray,
                        rr_start: ResponseRateTable,
                        agents: tuple[DqnAgent, DqnAgent],
                        rng: np.random.Generator,
                        explore_rng: np.random.Generator,
                        config: ExperimentConfig) -> list[int]:
    """Run one policy over the pool as it would deploy; returns queried indices.

    The loop is stateful the way the live system is: the daily cap, the
    policy's own time-since-last-query, and a response-rate table recalibrated
    every 100 decisions from the policy's own delivery outcomes.
    """
    trad_agent, ctx_agent = agents
    cap = DailyCap()
    table = rr_start.copy()
    pending: list[tuple[int, bool]] = []
    last_query: float | None = None
    chosen: list[int] = []
    for i, sample in enumerate(pool):
        hour = hour_of(sample.timestamp)
        if policy == POLICY_RANDOM:
            decision = random_policy(config.random_query_rate, rng)
        elif policy == POLICY_TRADITIONAL_AL:
            decision = traditional_al_policy(trad_agent, float(p_stress[i]), rng,
                                             epsilon=0.05)
        elif policy == POLICY_CONTEXT_AWARE:
            since = 1.0 if last_query is None else min(
                (sample.timestamp - last_query) / (4 * 3600.0), 1.0)
            state = AgentState(
                uncertainty=1.0 - 2.0 * abs(float(p_stress[i]) - 0.5),
                response_rate=table[int(hour)],
                time_since_query=since,
                time_of_day=hour / 24.0,
            )
            decision = context_aware_policy(ctx_agent, state, rng,
                                            exploration_rng=explore_rng,
                                            epsilon=0.05)
        else:
            raise ParameterError(f"unknown policy {policy!r}")
        decision = cap.guard(sample.subject_id, sample.timestamp, decision)
        if decision.trigger:
            chosen.append(i)
            last_query = sample.timestamp
            pending.append((int(hour), bool(answered[i])))
        if (i + 1) % 100 == 0 and pending:
            update_response_rates(table, pending)
            pending = []
    return chosen


def personalization_curves(base_X: np.ndarray, base_y: np.ndarray,
                           pool: list[BurstSample], test: list[BurstSample],
                           p_stress: np.ndarray, answer_prob: np.ndarray,
                           rr_start: ResponseRateTable,
                           agents: tuple[DqnAgent, DqnAgent],
                           config: ExperimentConfig,
                           policies=COMPARED_POLICIES,
                           custom_selectors: dict | None = None,
                           ) -> tuple[dict, dict, list[int]]:
    """Recall-vs-budget curves per policy, budgets equalized across policies.

    Per replication: each policy selects from the pool; the smallest selection
    count becomes the shared budget; nested random down-samples make the
    budget axis identical; selected samples yield labels only where the
    subject would have answered; the detector is refit with the personal
    labels added and scored on the held-out tail.
    """
    test_X, test_y = _matrices(test, [s.report5 for s in test], config.include_context)
    if np.unique(test_y).size < 2:
        raise ExperimentError("held-out tail has a single class")
    names = feature_names(config.include_context)

    base_model = train_matrix(base_X, base_y, names, backend=config.backend,
                              hyperparameters=config.detector_hyperparameters,
                              seed=config.seed)
    base_recall = evaluate_scores(test_y, base_model.predict_proba(test_X)).recall

    rep_seqs = np.random.SeedSequence([config.seed, 0xCA11]).spawn(config.replications)
    selectors = dict(custom_selectors or {})
    rep_curves: dict[str, list[list[tuple[int, float]]]] = {
        p: [] for p in list(policies) + list(selectors)
    }
    budget_levels: list[int] | None = None

    for rep, rep_seq in enumerate(rep_seqs):
        streams = rep_seq.spawn(6)
        answer_rng = np.random.default_rng(streams[0])
        answered = answer_rng.random(len(pool)) < answer_prob

        selections: dict[str, list[int]] = {}
        for j, policy in enumerate(policies):
            rng = np.random.default_rng(streams[1].spawn(j + 1)[-1])
            explore = np.random.default_rng(streams[2].spawn(j + 1)[-1])
            selections[policy] = _select_with_policy(
                policy, pool, p_stress, answered, rr_start, agents, rng,
                explore, config)
        for name, selector in selectors.items():
            rng = np.random.default_rng(streams[3])
            selections[name] = selector(pool, p_stress, rng)

        budget = min(len(v) for v in selections.values())
        if budget == 0:
            raise ExperimentError("a policy selected nothing; cannot compare")
        levels = sorted({
            int(round(budget * (k + 1) / config.budget_levels))
            for k in range(config.budget_levels)
        })
        if budget_levels is None:
            budget_levels = [0] + levels

        downsample_rng = np.random.default_rng(streams[4])
        fit_seed_root = streams[5]
        for policy, selected in selections.items():
            order = downsample_rng.permutation(len(selected))
            curve: list[tuple[int, float]] = [(0, float(base_recall))]
            for level in levels:
                take = [selected[k] for k in np.sort(order[:level])]
                labeled_idx = [i for i in take if answered[i]]
                if labeled_idx:
                    extra = [pool[i] for i in labeled_idx]
                    extra_X, extra_y = _matrices(
                        extra, [s.report5 for s in extra], config.include_context)
                    X = np.vstack([base_X, extra_X])
                    y = np.concatenate([base_y, extra_y])
                else:
                    X, y = base_X, base_y
                model = train_matrix(
                    X, y, names, backend=config.backend,
                    hyperparameters=config.detector_hyperparameters,
                    seed=_child_seed(fit_seed_root.spawn(1)[0]),
                )
                recall = evaluate_scores(test_y, model.predict_proba(test_X)).recall
                curve.append((level, float(recall)))
            rep_curves[policy].append(curve)

    curves: dict[str, list[CurvePoint]] = {}
    for policy, reps in rep_curves.items():
        points = []
        for idx in range(len(reps[0])):
            values = [r[idx][1] for r in reps]
            points.append(CurvePoint(
                queries_used=reps[0][idx][0],
                mean=float(np.mean(values)),
                std=float(np.std(values)),
            ))
        curves[policy] = points
    return curves, rep_curves, budget_levels or [0]


def run_offline_study(config: ExperimentConfig) -> OfflineStudyResult:
    """Statistical collection, then budget-matched personalization curves."""
    cohort = synth_cohort(config.n_subjects, config.days, config.seed,
                          heterogeneity=config.heterogeneity)
    data = materialize_cohort(cohort)
    collection = run_statistical_collection(cohort, data, config.seed,
                                            warmup=config.stat_warmup)

    target = max(collection.labeled, key=lambda s: len(collection.labeled[s]))
    others_pool = [pair for subject, pairs in collection.labeled.items()
                   if subject != target for pair in pairs]
    if len(others_pool) < 8:
        raise ExperimentError("statistical phase collected too few labels")
    base_X, base_y = _matrices([s for s, _ in others_pool],
                               [l for _, l in others_pool], config.include_context)
    if np.unique(base_y).size < 2:
        raise ExperimentError("base pool has a single class")

    stream = data[target]
    split = int(len(stream) * 0.75)
    pool, test = stream[:split], stream[split:]
    profile = cohort.profile(target)

    base_model = train_matrix(base_X, base_y, feature_names(config.include_context),
                              backend=config.backend,
                              hyperparameters=config.detector_hyperparameters,
                              seed=config.seed)
    query_times = [r.timestamp for r in collection.log
                   if r.subject_id == target and r.decision == "query"]
    states = build_state_sequence(pool, base_model, collection.rr_tables[target],
                                  query_times, config.include_context)
    X_pool = np.stack([s.x_full if config.include_context else s.x_ppg for s in pool])
    p_stress = base_model.predict_proba(X_pool)
    agents = pretrain_agents(states, config, seed=config.seed + 101)

    answer_prob = np.array([
        profile.responsiveness[int(hour_of(s.timestamp))] for s in pool
    ])
    curves, rep_curves, levels = personalization_curves(
        base_X, base_y, pool, test, p_stress, answer_prob,
        collection.rr_tables[target], agents, config)

    test_X, test_y = _matrices(test, [s.report5 for s in test], config.include_context)
    base_recall = evaluate_scores(test_y, base_model.predict_proba(test_X)).recall
    return OfflineStudyResult(
        collection=collection, target_subject=target, base_recall=float(base_recall),
        curves=curves, rep_curves=rep_curves, budget_levels=levels,
    )


def queries_to_performance(rep_curves: dict[str, list[list[tuple[int, float]]]],
                           levels: tuple[float, ...],
                           ) -> dict[str, list[QueriesToTarget]]:
    """Queries needed to first reach each target level, per policy.

    Per replication the answer is the smallest budget whose recall meets the
    level (0 when the starting point already does). A policy saturates at a
    level when fewer than half its replications ever reach it; saturated
    levels carry no number.
    """
    out: dict[str, list[QueriesToTarget]] = {}
    for policy, reps in rep_curves.items():
        rows = []
        for level in levels:
            needed = []
            for curve in reps:
                hit = next((q for q, value in curve if value >= level), None)
                if hit is not None:
                    needed.append(hit)
            reached = len(needed) / len(reps)
            if reached >= 0.5:
                rows.append(QueriesToTarget(
                    level=level, mean_queries=float(np.mean(needed)),
                    std_queries=float(np.std(needed)),
                    reached_fraction=reached, saturated=False,
                ))
            else:
                rows.append(QueriesToTarget(level=level, mean_queries=None,
                                            std_queries=None,
                                            reached_fraction=reached, saturated=True))
        out[policy] = rows
    return out


# ---------------------------------------------------------------------------
# Online study
# ---------------------------------------------------------------------------


@dataclass
class OnlineStudyResult:
    decision_log: list[DecisionRecord]
    labeled: dict[str, list[tuple[BurstSample, int]]]
    metrics_full: tuple[list[EvalMetrics], EvalMetrics]
    metrics_ppg: tuple[list[EvalMetrics], EvalMetrics]
    retrain_count: int

    def log_aggregates(self) -> dict:
        return log_aggregates(self.decision_log)


def log_aggregates(log: list[DecisionRecord]) -> dict:
    """Everything reportable from the decision log alone (replayable bit-exactly)."""
    queries = [r for r in log if r.decision == "query"]
    answered = [r for r in queries if r.answered]
    per_day: dict[tuple[str, int], int] = {}
    for r in queries:
        key = (r.subject_id, int(r.timestamp // 86400.0))
        per_day[key] = per_day.get(key, 0) + 1
    return {
        "decisions": len(log),
        "queries": len(queries),
        "answered": len(answered),
        "labels": sum(1 for r in log if r.label5 is not None),
        "max_queries_per_subject_day": max(per_day.values()) if per_day else 0,
        "answer_rate": (len(answered) / len(queries)) if queries else 0.0,
    }


def run_online_study(config: ExperimentConfig,
                     cohort: Cohort | None = None,
                     data: dict[str, list[BurstSample]] | None = None,
                     ) -> OnlineStudyResult:
    """Real-time loop: statistical prior phase, then context-aware querying.

    The first ``online_split_days`` days collect labels statistically and
    train the initial detector plus the context-aware agent; the remaining
    days run the live loop with response-rate refreshes every 100 events and
    detector retraining on the same cadence.
    """
    if cohort is None:
        cohort = synth_cohort(config.n_subjects, config.days, config.seed,
                              heterogeneity=config.heterogeneity)
    if data is None:
        data = materialize_cohort(cohort)
    split_days = config.online_split_days or max(config.days // 3, 1)

    prior = run_statistical_collection(cohort, data, config.seed,
                                       warmup=config.stat_warmup,
                                       days=(0, split_days))
    pool: list[tuple[BurstSample, int]] = [
        pair for pairs in prior.labeled.values() for pair in pairs
    ]
    if not pool:
        raise ExperimentError("prior phase collected no labels")
    detector = _train_detector_on_pool(pool, config, seed=config.seed)

    # One shared agent, pre-trained on the prior phase's state sequences.
    all_states: list[AgentState] = []
    for profile in cohort.profiles:
        subject = profile.subject_id
        samples = [s for s in data[subject] if s.timestamp < split_days * 86400.0]
        if not samples:
            continue
        query_times = [r.timestamp for r in prior.log
                       if r.subject_id == subject and r.decision == "query"]
        all_states.extend(build_state_sequence(
            samples, detector, prior.rr_tables[subject], query_times,
            config.include_context))
    ctx_agent = DqnAgent(AgentConfig(total_steps=config.agent_steps,
                                     reward_mode="contextual",
                                     seed=config.seed + 7))
    train_offline(ctx_agent, all_states)

    log: list[DecisionRecord] = list(prior.log)
    labeled: dict[str, list[tuple[BurstSample, int]]] = {
        s: list(v) for s, v in prior.labeled.items()
    }
    schedule = RetrainingSchedule(cadence=100)
    retrain_count = 0
    names = feature_names(config.include_context)

    for profile in cohort.profiles:
        subject = profile.subject_id
        stream = [s for s in data[subject] if s.timestamp >= split_days * 86400.0]
        table = prior.rr_tables[subject]
        cap = DailyCap()
        act_rng = np.random.default_rng(np.random.SeedSequence([config.seed, profile.seed, 11]))
        explore_rng = np.random.default_rng(np.random.SeedSequence([config.seed, profile.seed, 12]))
        answer_rng = np.random.default_rng(np.random.SeedSequence([config.seed, profile.seed, 13]))
        pending: list[tuple[int, bool]] = []
        queries_today: dict[int, int] = {}
        last_query: float | None = None
        events = 0
        for sample in stream:
            x = sample.x_full if config.include_context else sample.x_ppg
            p = float(detector.predict_proba(x[None, :])[0])
            hour = hour_of(sample.timestamp)
            since = 1.0 if last_query is None else min(
                (sample.timestamp - last_query) / (4 * 3600.0), 1.0)
            state = AgentState(1.0 - 2.0 * abs(p - 0.5), table[int(hour)],
                               since, hour / 24.0)
            decision = context_aware_policy(ctx_agent, state, act_rng,
                                            exploration_rng=explore_rng,
                                            epsilon=0.05)
            decision = cap.guard(subject, sample.timestamp, decision)
            answered = None
            label5 = None
            if decision.trigger:
                day = int(sample.timestamp // 86400.0)
                event = deliver_ema(profile, sample.timestamp,
                                    queries_today.get(day, 0), sample.latent,
                                    answer_rng)
                queries_today[day] = queries_today.get(day, 0) + 1
                last_query = sample.timestamp
                answered = event.kind == EVENT_EMA_ANSWERED
                if answered and event.timestamp - sample.timestamp <= LABEL_HORIZON_S:
                    label5 = event.payload["label5"]
                    labeled[subject].append((sample, label5))
                pending.append((int(hour), bool(answered)))
            log.append(DecisionRecord(
                timestamp=sample.timestamp, subject_id=subject,
                policy=POLICY_CONTEXT_AWARE,
                state=(state.uncertainty, state.response_rate,
                       state.time_since_query, state.time_of_day),
                probability_used=decision.probability_used,
                decision="query" if decision.trigger else "no_query",
                answered=answered, label5=label5, rationale=decision.rationale,
            ))
            events += 1
            if schedule.due(events):
                if pending:
                    update_response_rates(table, pending)
                    pending = []
                pool_now = [pair for pairs in labeled.values() for pair in pairs]
                X, y = _matrices([s for s, _ in pool_now], [l for _, l in pool_now],
                                 config.include_context)
                refreshed = retrain_detector(
                    X, y, names, config.backend, config.detector_hyperparameters,
                    seed=config.seed + retrain_count + 1)
                if refreshed is not None:
                    detector = refreshed
                retrain_count += 1

    pool_final = [pair for pairs in labeled.values() for pair in pairs]
    samples_final = [s for s, _ in pool_final]
    labels_final = [l for _, l in pool_final]
    X_full, y_full = _matrices(samples_final, labels_final, include_context=True)
    X_ppg, _ = _matrices(samples_final, labels_final, include_context=False)
    metrics_full = kfold_evaluate(X_full, y_full, feature_names(True),
                                  backend=config.backend, k=4, seed=config.seed,
                                  hyperparameters=config.detector_hyperparameters)
    metrics_ppg = kfold_evaluate(X_ppg, y_full, feature_names(False),
                                 backend=config.backend, k=4, seed=config.seed,
                                 hyperparameters=config.detector_hyperparameters)
    return OnlineStudyResult(
        decision_log=log, labeled=labeled,
        metrics_full=metrics_full, metrics_ppg=metrics_ppg,
        retrain_count=retrain_count,
    )


# ---------------------------------------------------------------------------
# Personalization study (leave-one-subject-out, temporal half split)
# ---------------------------------------------------------------------------


@dataclass
class SubjectPersonalization:
    subject_id: str
    plain: EvalMetrics
    personalized: EvalMetrics
    split_time: float


@dataclass
class PersonalizationResult:
    subjects: list[SubjectPersonalization]
    pooled_plain_auc: float
    pooled_personalized_auc: float
    skipped: list[str]

    @property
    def auc_gap(self) -> float:
        return self.pooled_personalized_auc - self.pooled_plain_auc


def personalization_study(data: dict[str, list[BurstSample]],
                          config: ExperimentConfig,
                          per_subject_cap: int = 150) -> PersonalizationResult:
    """Plain vs personalized models under leave-one-subject-out evaluation.

    Each held-out subject's stream splits temporally in half: the first half
    may join the training pool (personalized model), the second half is test
    data for both models. Other subjects contribute a seeded subsample capped
    at ``per_subject_cap`` rows to keep refits fast. Subjects whose halves
    lack a class are skipped with a note.
    """
    subjects = sorted(data)
    if len(subjects) < 3:
        raise ExperimentError("personalization study needs >= 3 subjects")
    names = feature_names(config.include_context)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9E55]))
    capped: dict[str, list[BurstSample]] = {}
    for subject in subjects:
        stream = data[subject]
        if len(stream) > per_subject_cap:
            idx = np.sort(rng.choice(len(stream), size=per_subject_cap, replace=False))
            capped[subject] = [stream[i] for i in idx]
        else:
            capped[subject] = list(stream)

    rows: list[SubjectPersonalization] = []
    skipped: list[str] = []
    scores_plain: list[np.ndarray] = []
    scores_personalized: list[np.ndarray] = []
    labels_all: list[np.ndarray] = []

    for subject in subjects:
        stream = sorted(data[subject], key=lambda s: s.timestamp)
        half = len(stream) // 2
        first, second = stream[:half], stream[half:]
        y_first = np.array([s.report2 for s in first])
        y_second = np.array([s.report2 for s in second])
        if np.unique(y_first).size < 2 or np.unique(y_second).size < 2:
            skipped.append(subject)
            continue
        others = [s for other in subjects if other != subject for s in capped[other]]
        X_others, y_others = _matrices(others, [s.report5 for s in others],
                                       config.include_context)
        X_first, _ = _matrices(first, [s.report5 for s in first],
                               config.include_context)
        X_second, _ = _matrices(second, [s.report5 for s in second],
                                config.include_context)

        plain = train_matrix(X_others, y_others, names, backend=config.backend,
                             hyperparameters=config.detector_hyperparameters,
                             seed=config.seed)
        personalized = train_matrix(
            np.vstack([X_others, X_first]), np.concatenate([y_others, y_first]),
            names, backend=config.backend,
            hyperparameters=config.detector_hyperparameters, seed=config.seed)

        p_plain = plain.predict_proba(X_second)
        p_personalized = personalized.predict_proba(X_second)
        rows.append(SubjectPersonalization(
            subject_id=subject,
            plain=evaluate_scores(y_second, p_plain),
            personalized=evaluate_scores(y_second, p_personalized),
            split_time=float(second[0].timestamp),
        ))
        scores_plain.append(p_plain)
        scores_personalized.append(p_personalized)
        labels_all.append(y_second)

    if not rows:
        raise ExperimentError("every subject was skipped; no evaluable halves")
    labels = np.concatenate(labels_all)
    return PersonalizationResult(
        subjects=rows,
        pooled_plain_auc=float(roc_auc(np.concatenate(scores_plain), labels)),
        pooled_personalized_auc=float(roc_auc(np.concatenate(scores_personalized),
                                              labels)),
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# CSV schemas
# ---------------------------------------------------------------------------


def metrics_csv_rows(results: dict[str, tuple[list[EvalMetrics], EvalMetrics]]):
    """Wide-format rows: one per policy x replication(fold) x metric columns."""
    yield ("schema_version", "policy", "replication",
           "f1", "precision", "recall", "auc_roc")
    for policy, (folds, _) in sorted(results.items()):
        for i, m in enumerate(folds):
            yield (METRICS_SCHEMA_VERSION, policy, i,
                   repr(m.f1), repr(m.precision), repr(m.recall), repr(m.auc_roc))


def curves_csv_rows(curves: dict[str, list[CurvePoint]], replications: int):
    yield ("schema_version", "policy", "queries_used", "recall_mean",
           "recall_std", "replications")
    for policy, points in sorted(curves.items()):
        for point in points:
            yield (CURVES_SCHEMA_VERSION, policy, point.queries_used,
                   repr(point.mean), repr(point.std), replications)


def write_csv(rows, path) -> None:
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(row)
