"""Member travel times, alter mode imputation and group-level cost aggregation."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import _random
from .domain import AGE_BANDS, MODE_ORDER, DataError, Dataset, Mode, SituationSet

__all__ = [
    "Mode", "MODE_ORDER", "ImpedanceKind", "SpeedProvider", "SkimProvider", "travel_time",
    "load_skim", "group_impedance", "aggregate_times", "ModeClassifier", "mode_features",
    "train_mode_classifier", "predict_mode", "ego_records", "resolve_modes",
    "participant_times", "group_costs", "ConvergenceError", "MissingSkimError",
]


class ImpedanceKind(str, Enum):
    MAX = "max"
    MIN = "min"
    MEAN = "mean"
    MEDIAN = "median"
    EGO = "ego"


class ConvergenceError(RuntimeError):
    pass


class MissingSkimError(KeyError):
    pass


DEFAULT_SPEEDS = {Mode.WALK: 4.8, Mode.BIKE: 15.0, Mode.BUS: 18.0, Mode.TRANSIT: 25.0, Mode.CAR: 30.0}
DEFAULT_ACCESS = {Mode.TRANSIT: 8.0, Mode.BUS: 8.0}


@dataclass(frozen=True)
class SpeedProvider:
    """Straight-line distance over a per-mode speed, plus a fixed access time."""

    speeds: dict = field(default_factory=lambda: dict(DEFAULT_SPEEDS))
    access: dict = field(default_factory=lambda: dict(DEFAULT_ACCESS))

    def __post_init__(self):
        object.__setattr__(self, "speeds", {Mode(k): float(v) for k, v in self.speeds.items()})
        object.__setattr__(self, "access", {Mode(k): float(v) for k, v in self.access.items()})
        for m in Mode:
            if self.speeds.get(m, 0.0) <= 0:
                raise ValueError(f"speed for {m.value} must be positive")
            if self.access.get(m, 0.0) < 0:
                raise ValueError(f"access time for {m.value} must be nonnegative")

    def time(self, origin, zone, mode):
        d = math.dist(origin, zone.centroid)
        return self.access.get(mode, 0.0) + d / self.speeds[mode] * 60.0

    def times(self, origin, zones, mode):
        d = np.hypot(zones.xy[:, 0] - origin[0], zones.xy[:, 1] - origin[1])
        return self.access.get(mode, 0.0) + d / self.speeds[mode] * 60.0

    def to_dict(self):
        return {"kind": "speed",
                "speeds_kmh": {m.value: self.speeds[m] for m in MODE_ORDER},
                "access_min": {m.value: self.access.get(m, 0.0) for m in MODE_ORDER}}


@dataclass(frozen=True)
class SkimProvider:
    """Explicit OD times keyed by (origin cell, zone id, mode).

    Origins are snapped to square cells of side ``cell_km``; a cell id is
    ``"ix:iy"`` with ``ix = floor(x / cell_km)``.
    """

    table: dict
    cell_km: float = 1.0

    def cell_of(self, origin):
        return f"{math.floor(origin[0] / self.cell_km)}:{math.floor(origin[1] / self.cell_km)}"

    def time(self, origin, zone, mode):
        key = (self.cell_of(origin), zone.id, Mode(mode))
        try:
            return self.table[key]
        except KeyError:
            raise MissingSkimError(f"no skim entry for cell {key[0]}, zone {zone.id}, mode {key[2].value}") from None

    def times(self, origin, zones, mode):
        return np.array([self.time(origin, z, mode) for z in zones], dtype=float)

    def to_dict(self):
        return {"kind": "skim", "cell_km": self.cell_km, "entries": len(self.table)}


def load_skim(path, cell_km=1.0) -> SkimProvider:
    table = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for i, r in enumerate(csv.DictReader(fh)):
            try:
                minutes = float(r["minutes"])
                key = (r["origin_cell"], int(r["zone_id"]), Mode(r["mode"]))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}: row {i + 2}: {exc}") from None
            if not math.isfinite(minutes) or minutes < 0:
                raise DataError(f"{path}: row {i + 2}: minutes must be finite and >= 0")
            table[key] = minutes
    return SkimProvider(table, cell_km)


def travel_time(provider, origin, zone, mode) -> float:
    """Minutes from ``origin`` to ``zone`` by ``mode``."""
    return float(provider.time(origin, zone, Mode(mode)))


# ---------------------------------------------------------------------------
# group aggregation


def group_impedance(times, kind, ego_index=0) -> float:
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("group_impedance of an empty time vector")
    return float(aggregate_times(times[:, None], kind, ego_index)[0])


def aggregate_times(times, kind, ego_index=0):
    """Collapse a (participants, zones) time matrix to one cost per zone."""
    times = np.asarray(times, dtype=float)
    if times.shape[0] == 0:
        raise ValueError("no participants")
    kind = ImpedanceKind(kind)
    if kind is ImpedanceKind.MAX:
        return times.max(axis=0)
    if kind is ImpedanceKind.MIN:
        return times.min(axis=0)
    if kind is ImpedanceKind.MEAN:
        return times.mean(axis=0)
    if kind is ImpedanceKind.MEDIAN:
        return np.median(times, axis=0)
    if not 0 <= ego_index < times.shape[0]:
        raise IndexError(f"ego_index {ego_index} out of range")
    return times[ego_index].copy()


def participant_times(dataset: Dataset, provider):
    """Per situation, a (participants, zones) matrix of minutes.

    Every participant must have a mode; see :func:`resolve_modes`.
    """
    out = []
    for s in dataset.situations:
        rows = []
        for p in s.participants:
            if p.mode is None:
                raise DataError(f"situation {s.id}: no mode for participant {p.member_id}; impute with a classifier")
            rows.append(provider.times(p.origin, dataset.zones, p.mode))
        out.append(np.vstack(rows))
    return out


def group_costs(times, situations: SituationSet, kind):
    """(situations, zones) matrix of group impedances."""
    return np.vstack([aggregate_times(t, kind, s.ego_index) for t, s in zip(times, situations)])


# ---------------------------------------------------------------------------
# mode classifier

FEATURE_NAMES = ("distance_km", "age_band", "female", "party_size", "weekend")


def mode_features(distance_km, age_band, gender, party_size, weekend):
    age = AGE_BANDS.index(age_band) if isinstance(age_band, str) else int(age_band)
    female = float(gender == "F") if isinstance(gender, str) else float(gender)
    return np.array([distance_km, age, female, party_size, float(weekend)], dtype=float)


@dataclass(frozen=True, eq=False)
class ModeClassifier:
    """Multinomial logistic classifier over the modes seen in training."""

    coef: np.ndarray  # (classes, features)
    intercept: np.ndarray  # (classes,)
    mean: np.ndarray
    scale: np.ndarray
    classes: tuple
    cv_accuracy: float = float("nan")

    def scores(self, features):
        z = (np.atleast_2d(np.asarray(features, dtype=float)) - self.mean) / self.scale
        return z @ self.coef.T + self.intercept

    def probabilities(self, features):
        s = self.scores(features)
        return np.exp(s - logsumexp(s, axis=1, keepdims=True))

    def predict(self, features):
        # argmax returns the first maximum; classes are kept in MODE_ORDER
        return [self.classes[i] for i in np.argmax(self.scores(features), axis=1)]

    def to_dict(self):
        return {
            "classes": [Mode(c).value for c in self.classes],
            "feature_names": list(FEATURE_NAMES),
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "scaler_mean": self.mean.tolist(),
            "scaler_scale": self.scale.tolist(),
            "cv_accuracy": self.cv_accuracy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["coef"], dtype=float), np.array(d["intercept"], dtype=float),
                   np.array(d["scaler_mean"], dtype=float), np.array(d["scaler_scale"], dtype=float),
                   tuple(Mode(c) for c in d["classes"]), float(d.get("cv_accuracy", float("nan"))))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _fit_softmax(X, y, n_classes, l2, max_iter):
    n, f = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0

    def objective(w):
        W = w.reshape(n_classes, f + 1)
        s = Xb @ W.T
        lse = logsumexp(s, axis=1, keepdims=True)
        nll = -(Y * (s - lse)).sum() / n
        P = np.exp(s - lse)
        grad = (P - Y).T @ Xb / n + 2 * l2 * W
        return nll + l2 * (W ** 2).sum(), grad.ravel()

    res = minimize(objective, np.zeros(n_classes * (f + 1)), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-9, "ftol": 1e-15})
    _, g = objective(res.x)
    if not (res.success or np.abs(g).max() < 1e-6):
        raise ConvergenceError(f"mode classifier did not converge: {res.message}")
    W = res.x.reshape(n_classes, f + 1)
    return W[:, :f], W[:, f]


def _fit(X, labels, l2, max_iter):
    classes = tuple(m for m in MODE_ORDER if m in set(labels))
    y = np.array([classes.index(m) for m in labels])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    if len(classes) == 1:
        return ModeClassifier(np.zeros((1, X.shape[1])), np.zeros(1), mean, scale, classes)
    coef, intercept = _fit_softmax((X - mean) / scale, y, len(classes), l2, max_iter)
    return ModeClassifier(coef, intercept, mean, scale, classes)


def train_mode_classifier(records, folds=10, rng_seed=0, l2=1e-4, max_iter=5000) -> ModeClassifier:
    """Fit on ``(features, Mode)`` records and attach k-fold CV accuracy.

    The final model is fit on all records; ``cv_accuracy`` is the pooled share
    of held-out records predicted correctly across a seeded ``folds``-way split.
    """
    records = list(records)
    if not records:
        raise ValueError("no training records")
    X = np.vstack([np.asarray(f, dtype=float) for f, _ in records])
    labels = [Mode(m) for _, m in records]
    if len(set(labels)) < 2:
        raise ValueError(f"degenerate training data: single mode class {labels[0].value!r}")
    model = _fit(X, labels, l2, max_iter)

    n = len(records)
    k = min(folds, n)
    perm = _random.substream(rng_seed, _random.CLASSIFIER).permutation(n)
    correct = 0
    for test in np.array_split(perm, k):
        train = np.setdiff1d(perm, test)
        m = _fit(X[train], [labels[i] for i in train], l2, max_iter)
        correct += sum(p == labels[i] for p, i in zip(m.predict(X[test]), test))
    return dataclasses.replace(model, cv_accuracy=correct / n)


def predict_mode(classifier: ModeClassifier, features) -> Mode:
    return classifier.predict(features)[0]


def _features_for(dataset, situation, participant):
    member = dataset.clique_of(situation).member(participant.member_id)
    zone = dataset.zones[dataset.zones.index[situation.chosen_zone]]
    d = math.dist(participant.origin, zone.centroid)
    return mode_features(d, member.age_band, member.gender, situation.party_size, situation.weekend)


def ego_records(dataset: Dataset):
    """Training records from every situation whose ego mode is observed."""
    out = []
    for s in dataset.situations:
        ego = s.participants[s.ego_index]
        if ego.mode is not None:
            out.append((_features_for(dataset, s, ego), ego.mode))
    return out


def resolve_modes(dataset: Dataset, classifier: ModeClassifier | None) -> Dataset:
    """Fill every missing participant mode with the classifier's prediction.

    The mode is fixed per (participant, situation) and reused for all zones.
    """
    situations = []
    for s in dataset.situations:
        parts = []
        for p in s.participants:
            if p.mode is None:
                if classifier is None:
                    raise DataError(f"situation {s.id}: participant {p.member_id} has no mode and no classifier given")
                p = dataclasses.replace(p, mode=predict_mode(classifier, _features_for(dataset, s, p)))
            parts.append(p)
        situations.append(dataclasses.replace(s, participants=tuple(parts)))
    return Dataset(dataset.zones, dataset.cliques, SituationSet(tuple(situations)))
