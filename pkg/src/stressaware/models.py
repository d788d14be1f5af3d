"""Binary stress classifiers: bagged trees, boosted trees, and a linear margin model.

All three backends are trained from scratch on numpy so that training is
bit-reproducible from a seed and the fitted parameters serialize to a
canonical artifact. The common contract: features are min-max normalized with
bounds fitted on the training split, the minority class is up-weighted by
inverse class frequency, and `predict_proba` returns the probability of the
stressed class, which doubles as the query agent's uncertainty source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, DegenerateTrainingError, ParameterError
from .features import FeatureVector
from .features import feature_names as default_feature_names
from .metrics import (
    EvalMetrics,
    evaluate_scores,
    mean_metrics,
    stratified_fold_assignments,
)

BACKENDS = ("bagged_trees", "boosted_trees", "linear_margin")

BAGGED_DEFAULTS = {"n_trees": 100, "max_depth": 5, "min_leaf": 1}
PAPER_SCALE_N_TREES = 500  # restore with hyperparameters={"n_trees": 500}
BOOSTED_DEFAULTS = {"n_rounds": 200, "max_depth": 3, "shrinkage": 0.1, "min_leaf": 1}
LINEAR_DEFAULTS = {"epochs": 40, "lr": 0.5, "l2": 1e-4}


def binarize_label(label5: int) -> int:
    """Five-point stress report to binary: the top two levels are 'stressed'."""
    if label5 not in (1, 2, 3, 4, 5):
        raise ParameterError(f"label5 must be in 1..5, got {label5}")
    return 1 if label5 >= 4 else 0


@dataclass(frozen=True)
class LabeledSample:
    """A feature vector with its five-point report and the derived binary label."""

    features: FeatureVector
    label5: int
    label2: int = -1

    def __post_init__(self):
        expected = binarize_label(self.label5)
        if self.label2 == -1:
            object.__setattr__(self, "label2", expected)
        elif self.label2 != expected:
            raise ParameterError(
                f"label2={self.label2} inconsistent with label5={self.label5}"
            )


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


# ---------------------------------------------------------------------------
# CART trees (shared by bagging and boosting)
# ---------------------------------------------------------------------------


@dataclass
class _Tree:
    """Flat-array binary tree. ``feature == -1`` marks a leaf; ``value`` is the
    leaf payload (class-1 fraction for classification, additive step for
    boosting)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            feats = self.feature[node[idx]]
            go_left = X[idx, feats] <= self.threshold[node[idx]]
            node[idx[go_left]] = self.left[node[idx[go_left]]]
            node[idx[~go_left]] = self.right[node[idx[~go_left]]]
            active = self.feature[node] >= 0
        return self.value[node]

    def to_payload(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "_Tree":
        return cls(
            feature=np.asarray(payload["feature"], dtype=int),
            threshold=np.asarray(payload["threshold"], dtype=float),
            left=np.asarray(payload["left"], dtype=int),
            right=np.asarray(payload["right"], dtype=int),
            value=np.asarray(payload["value"], dtype=float),
        )


def _best_split(x: np.ndarray, target: np.ndarray, weights: np.ndarray,
                criterion: str, min_leaf: int) -> tuple[float, float] | None:
    """Best (score, threshold) for one feature, or None if no valid split.

    Lower score is better. Thresholds are midpoints between distinct sorted
    values; the first optimum in ascending threshold order wins, which
    realizes the lowest-threshold tie-break.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ws = weights[order]
    ts = target[order]
    w_cum = np.cumsum(ws)
    w_total = w_cum[-1]

    n = xs.size
    pos = np.arange(1, n)  # split: left = first `pos` sorted samples
    valid = (xs[:-1] < xs[1:]) & (pos >= min_leaf) & (n - pos >= min_leaf)
    if not valid.any():
        return None

    wl = w_cum[:-1]
    wr = w_total - wl
    if criterion == "gini":
        wy_cum = np.cumsum(ws * ts)
        wyl = wy_cum[:-1]
        wyr = wy_cum[-1] - wyl
        with np.errstate(invalid="ignore", divide="ignore"):
            pl = wyl / wl
            pr = wyr / wr
            score = wl * (2 * pl * (1 - pl)) + wr * (2 * pr * (1 - pr))
    elif criterion == "mse":
        wt_cum = np.cumsum(ws * ts)
        wtt_cum = np.cumsum(ws * ts * ts)
        wtl = wt_cum[:-1]
        wttl = wtt_cum[:-1]
        wtr = wt_cum[-1] - wtl
        wttr = wtt_cum[-1] - wttl
        with np.errstate(invalid="ignore", divide="ignore"):
            score = (wttl - wtl ** 2 / wl) + (wttr - wtr ** 2 / wr)
    else:  # pragma: no cover - internal misuse
        raise ParameterError(f"unknown criterion {criterion}")

    score = np.where(valid, score, np.inf)
    best = int(np.argmin(score))  # first occurrence = lowest threshold on ties
    if not np.isfinite(score[best]):
        return None
    threshold = (xs[best] + xs[best + 1]) / 2.0
    return float(score[best]), threshold


def _grow_tree(X: np.ndarray, target: np.ndarray, weights: np.ndarray, *,
               criterion: str, max_depth: int, min_leaf: int,
               n_candidates: int | None, rng: np.random.Generator,
               hessian: np.ndarray | None = None) -> _Tree:
    """Grow one CART. Ties across features break toward the lowest feature index."""
    n_features = X.shape[1]
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def leaf_value(idx: np.ndarray) -> float:
        w = weights[idx]
        if criterion == "gini":
            return float(np.sum(w * target[idx]) / np.sum(w))
        if hessian is not None:
            denom = max(float(np.sum(w * hessian[idx])), 1e-12)
            return float(np.clip(np.sum(w * target[idx]) / denom, -4.0, 4.0))
        return float(np.sum(w * target[idx]) / np.sum(w))

    def add_leaf(idx: np.ndarray) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(idx))
        return node

    def build(idx: np.ndarray, depth: int) -> int:
        if depth >= max_depth or idx.size < 2 * min_leaf or idx.size < 2:
            return add_leaf(idx)
        if criterion == "gini" and np.all(target[idx] == target[idx[0]]):
            return add_leaf(idx)
        if n_candidates is not None and n_candidates < n_features:
            candidates = np.sort(rng.choice(n_features, size=n_candidates, replace=False))
        else:
            candidates = np.arange(n_features)

        best_score, best_feature, best_threshold = np.inf, -1, 0.0
        for f in candidates:  # ascending order keeps lowest-index tie-break
            found = _best_split(X[idx, f], target[idx], weights[idx],
                                criterion, min_leaf)
            if found is not None and found[0] < best_score:
                best_score, best_feature, best_threshold = found[0], int(f), found[1]
        if best_feature < 0:
            return add_leaf(idx)

        node = len(feature)
        feature.append(best_feature)
        threshold.append(best_threshold)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        go_left = X[idx, best_feature] <= best_threshold
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return _Tree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        value=np.asarray(value, dtype=float),
    )


# ---------------------------------------------------------------------------
# Trained model container
# ---------------------------------------------------------------------------


@dataclass
class TrainedClassifier:
    """A fitted backend plus the feature signature and normalization bounds it expects."""

    backend: str
    feature_names: tuple[str, ...]
    bounds_low: np.ndarray
    bounds_high: np.ndarray
    params: dict = field(default_factory=dict)

    def _check_signature(self, X: np.ndarray) -> None:
        if X.shape[-1] != len(self.feature_names):
            raise CompatibilityError(
                f"model expects {len(self.feature_names)} features, got {X.shape[-1]}"
            )

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        span = self.bounds_high - self.bounds_low
        span = np.where(span > 0, span, 1.0)
        return np.clip((X - self.bounds_low) / span, 0.0, 1.0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Probability of the stressed class for each row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check_signature(X)
        Xn = self._normalize(X)
        if self.backend == "bagged_trees":
            votes = np.stack([
                (tree.predict(Xn) >= 0.5).astype(float) for tree in self.params["trees"]
            ])
            return votes.mean(axis=0)
        if self.backend == "boosted_trees":
            margin = np.full(Xn.shape[0], self.params["base_score"], dtype=float)
            shrinkage = self.params["shrinkage"]
            for tree in self.params["trees"]:
                margin += shrinkage * tree.predict(Xn)
            return _sigmoid(margin)
        if self.backend == "linear_margin":
            margin = Xn @ self.params["w"] + self.params["b"]
            return _sigmoid(margin)
        raise CompatibilityError(f"unknown backend {self.backend}")

    def to_payload(self) -> dict:
        payload = {
            "backend": self.backend,
            "feature_names": list(self.feature_names),
            "bounds_low": self.bounds_low.tolist(),
            "bounds_high": self.bounds_high.tolist(),
        }
        if self.backend in ("bagged_trees", "boosted_trees"):
            payload["trees"] = [tree.to_payload() for tree in self.params["trees"]]
            if self.backend == "boosted_trees":
                payload["base_score"] = self.params["base_score"]
                payload["shrinkage"] = self.params["shrinkage"]
        else:
            payload["w"] = self.params["w"].tolist()
            payload["b"] = self.params["b"]
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "TrainedClassifier":
        backend = payload["backend"]
        params: dict = {}
        if backend in ("bagged_trees", "boosted_trees"):
            params["trees"] = [_Tree.from_payload(t) for t in payload["trees"]]
            if backend == "boosted_trees":
                params["base_score"] = float(payload["base_score"])
                params["shrinkage"] = float(payload["shrinkage"])
        elif backend == "linear_margin":
            params["w"] = np.asarray(payload["w"], dtype=float)
            params["b"] = float(payload["b"])
        else:
            raise CompatibilityError(f"unknown backend {backend}")
        return cls(
            backend=backend,
            feature_names=tuple(payload["feature_names"]),
            bounds_low=np.asarray(payload["bounds_low"], dtype=float),
            bounds_high=np.asarray(payload["bounds_high"], dtype=float),
            params=params,
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _class_weights(y: np.ndarray) -> np.ndarray:
    """Inverse-class-frequency weights; the minority class counts for more."""
    n = y.size
    n_pos = int(y.sum())
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * (n - n_pos))
    return np.where(y == 1, w_pos, w_neg)


def train_matrix(X: np.ndarray, y: np.ndarray, feature_names: tuple[str, ...],
                 backend: str = "bagged_trees", hyperparameters: dict | None = None,
                 seed: int = 0) -> TrainedClassifier:
    """Fit a backend on a raw (n, d) matrix with binary labels.

    Deterministic given the seed: the same call produces the same artifact
    bytes. Raises DegenerateTrainingError unless both classes have >= 2
    samples.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ParameterError("X must be (n, d) with one label per row")
    if len(feature_names) != X.shape[1]:
        raise ParameterError("feature_names arity must match X columns")
    if backend not in BACKENDS:
        raise ParameterError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    counts = np.bincount(y, minlength=2)
    if counts[0] < 2 or counts[1] < 2:
        raise DegenerateTrainingError(
            f"need >= 2 samples per class, got {counts[0]}/{counts[1]}"
        )

    bounds_low = X.min(axis=0)
    bounds_high = X.max(axis=0)
    span = np.where(bounds_high - bounds_low > 0, bounds_high - bounds_low, 1.0)
    Xn = np.clip((X - bounds_low) / span, 0.0, 1.0)

    weights = _class_weights(y)
    rng = np.random.default_rng(seed)
    hp = dict(hyperparameters or {})

    if backend == "bagged_trees":
        cfg = {**BAGGED_DEFAULTS, **hp}
        n = X.shape[0]
        n_candidates = max(1, int(round(np.sqrt(X.shape[1]))))
        trees = []
        for _ in range(cfg["n_trees"]):
            boot = rng.integers(0, n, size=n)
            trees.append(_grow_tree(
                Xn[boot], y[boot].astype(float), weights[boot],
                criterion="gini", max_depth=cfg["max_depth"],
                min_leaf=cfg["min_leaf"], n_candidates=n_candidates, rng=rng,
            ))
        params = {"trees": trees}
    elif backend == "boosted_trees":
        cfg = {**BOOSTED_DEFAULTS, **hp}
        pos_rate = float(np.sum(weights * y) / np.sum(weights))
        pos_rate = min(max(pos_rate, 1e-6), 1 - 1e-6)
        base_score = float(np.log(pos_rate / (1 - pos_rate)))
        margin = np.full(X.shape[0], base_score)
        trees = []
        for _ in range(cfg["n_rounds"]):
            p = _sigmoid(margin)
            gradient = y - p
            curvature = p * (1 - p)
            tree = _grow_tree(
                Xn, gradient, weights, criterion="mse",
                max_depth=cfg["max_depth"], min_leaf=cfg["min_leaf"],
                n_candidates=None, rng=rng, hessian=curvature,
            )
            margin += cfg["shrinkage"] * tree.predict(Xn)
            trees.append(tree)
        params = {"trees": trees, "base_score": base_score,
                  "shrinkage": float(cfg["shrinkage"])}
    else:  # linear_margin
        cfg = {**LINEAR_DEFAULTS, **hp}
        y_signed = 2.0 * y - 1.0
        w = np.zeros(X.shape[1])
        b = 0.0
        step = 0
        for _ in range(cfg["epochs"]):
            for i in rng.permutation(X.shape[0]):
                step += 1
                eta = cfg["lr"] / (1.0 + cfg["lr"] * cfg["l2"] * step)
                w *= 1.0 - eta * cfg["l2"]
                if y_signed[i] * (Xn[i] @ w + b) < 1.0:
                    w += eta * weights[i] * y_signed[i] * Xn[i]
                    b += eta * weights[i] * y_signed[i]
        params = {"w": w, "b": float(b)}

    return TrainedClassifier(
        backend=backend,
        feature_names=tuple(feature_names),
        bounds_low=bounds_low,
        bounds_high=bounds_high,
        params=params,
    )


def train(samples: list[LabeledSample], backend: str = "bagged_trees",
          hyperparameters: dict | None = None, seed: int = 0,
          include_context: bool = True) -> TrainedClassifier:
    """Fit a backend on labeled feature vectors (the dataset-facing entry point)."""
    if not samples:
        raise DegenerateTrainingError("no samples")
    X = np.stack([s.features.values(include_context) for s in samples])
    y = np.array([s.label2 for s in samples], dtype=int)
    return train_matrix(X, y, default_feature_names(include_context),
                        backend=backend, hyperparameters=hyperparameters, seed=seed)


def predict_proba(model: TrainedClassifier, features) -> float:
    """Probability of the stressed class for one sample."""
    if isinstance(features, FeatureVector):
        features = features.values(len(model.feature_names) > 12)
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        return float(model.predict_proba(features[None, :])[0])
    raise ParameterError("predict_proba takes a single sample; use model.predict_proba for batches")


def kfold_evaluate(X: np.ndarray, y: np.ndarray, feature_names: tuple[str, ...],
                   backend: str = "bagged_trees", k: int = 4, seed: int = 0,
                   hyperparameters: dict | None = None,
                   ) -> tuple[list[EvalMetrics], EvalMetrics]:
    """Stratified k-fold cross validation; returns per-fold metrics and their mean."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    assignment = stratified_fold_assignments(y, k, seed)
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]
    folds = []
    for fold in range(k):
        test = assignment == fold
        model = train_matrix(X[~test], y[~test], feature_names, backend=backend,
                             hyperparameters=hyperparameters, seed=fold_seeds[fold])
        scores = model.predict_proba(X[test])
        folds.append(evaluate_scores(y[test], scores))
    return folds, mean_metrics(folds)
