"""Importance sampling of non-chosen destinations.

Each non-chosen zone is drawn with weight ``q = M * exp(-2 t / t_bar)``, where
``M`` is the zone's restaurant count, ``t`` the situation's group impedance to
the zone and ``t_bar`` the dataset mean impedance to the chosen zones. The
chosen zone is always kept, and ``k`` further zones are drawn sequentially
without replacement.

Estimating on sampled sets without a correction is inconsistent whenever the
sampling weights depend on modelled attributes. Two utility offsets are
available:

``naive``
    ``-ln q_hat`` with ``q_hat`` the weight normalised over the universe. This
    is exact for sampling with replacement and only approximate here.
``exact``
    ``ln P(C minus {j} drawn | j chosen)`` for the successive-sampling design
    actually used. For a set ``S`` drawn from a pool whose undrawn remainder
    has weight ``R`` this is the one-dimensional integral
    ``int_0^inf exp(-s) prod_{d in S} (1 - exp(-q_d s / R)) ds``
    (exponential race representation), evaluated on a log-spaced grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import _random
from .domain import Dataset, ZoneSet
from .impedance import ImpedanceKind, aggregate_times, group_costs, participant_times

CORRECTIONS = ("none", "naive", "exact")
FEATURES = ("major_station", "ln_restaurants", "cost")


class InsufficientAlternativesError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 20
    correction: str = "none"
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}, got {self.correction!r}")

    @property
    def include_correction(self):
        return self.correction != "none"


@dataclass(frozen=True, eq=False)
class ChoiceSet:
    """One situation's sampled alternatives. Index 0 is the chosen zone."""

    situation_id: str
    zone_ids: np.ndarray
    features: np.ndarray  # (J, 3): major_station, ln_restaurants, cost
    q: np.ndarray
    t_bar: float
    offsets: np.ndarray

    @property
    def chosen(self):
        flags = np.zeros(len(self.zone_ids), dtype=bool)
        flags[0] = True
        return flags

    def __len__(self):
        return len(self.zone_ids)


@dataclass(frozen=True, eq=False)
class ChoiceData:
    """Stacked equal-size choice sets, the estimator's input.

    ``X`` is (N, J, K); the chosen alternative sits at position 0 of every set.
    """

    situation_ids: tuple
    zone_ids: np.ndarray  # (N, J)
    X: np.ndarray
    q: np.ndarray
    offsets: np.ndarray
    t_bar: float

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_alternatives(self):
        return self.X.shape[1]

    @property
    def chosen(self):
        return np.zeros(len(self), dtype=int)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return ChoiceData(tuple(self.situation_ids[i] for i in idx), self.zone_ids[idx],
                          self.X[idx], self.q[idx], self.offsets[idx], self.t_bar)

    def choice_sets(self):
        for n in range(len(self)):
            yield ChoiceSet(self.situation_ids[n], self.zone_ids[n], self.X[n], self.q[n],
                            self.t_bar, self.offsets[n])

    @classmethod
    def stack(cls, sets):
        sets = list(sets)
        if not sets:
            raise ValueError("no choice sets")
        if len({len(s) for s in sets}) != 1:
            raise ValueError("choice sets must all have the same size")
        return cls(tuple(s.situation_id for s in sets), np.stack([s.zone_ids for s in sets]),
                   np.stack([s.features for s in sets]), np.stack([s.q for s in sets]),
                   np.stack([s.offsets for s in sets]), sets[0].t_bar)


def sampling_weight(restaurant_count, t, t_bar):
    if np.any(np.asarray(t_bar) <= 0):
        raise ValueError(f"t_bar must be positive, got {t_bar}")
    w = np.asarray(restaurant_count, dtype=float) * np.exp(-2.0 * np.asarray(t, dtype=float) / t_bar)
    return float(w) if w.ndim == 0 else w


def weighted_sample_without_replacement(weights, k, rng):
    """Indices of ``k`` sequential draws, each proportional to the remaining weights."""
    w = np.array(weights, dtype=float)
    if np.count_nonzero(w > 0) < k:
        raise InsufficientAlternativesError(
            f"need {k} positive-weight alternatives, have {np.count_nonzero(w > 0)}")
    out = np.empty(k, dtype=int)
    for i in range(k):
        c = np.cumsum(w)
        j = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        if j >= len(w):
            j = int(np.flatnonzero(w > 0)[-1])
        out[i] = j
        w[j] = 0.0
    return out


def mean_travel_time(dataset: Dataset, provider, impedance_kind) -> float:
    """Mean group impedance from each situation's origins to its chosen zone."""
    if len(dataset.situations) == 0:
        raise ValueError("no situations")
    costs = group_costs(participant_times(dataset, provider), dataset.situations, impedance_kind)
    return chosen_mean(costs, dataset.chosen_index)


def chosen_mean(costs, chosen_index):
    if len(chosen_index) == 0:
        raise ValueError("no situations")
    return float(np.mean(costs[np.arange(len(chosen_index)), chosen_index]))


# ---------------------------------------------------------------------------
# sampling corrections

# trapezoid on a log-spaced grid; 0.1 is accurate to ~1e-14 against adaptive quadrature
_GRID_STEP = 0.1


def exact_log_inclusion(q, remainder):
    """``ln P(set minus {j} is drawn | j chosen)`` for every member ``j`` of a set.

    ``q`` holds the weights of the set's members and ``remainder`` the total
    weight of universe zones outside the set.
    """
    q = np.asarray(q, dtype=float)
    zero = q <= 0
    nzero = int(zero.sum())
    out = np.zeros(len(q))
    if nzero > 1:
        return np.full(len(q), -np.inf)
    if remainder <= 0:
        # the whole positive-weight pool was drawn
        if nzero == 1:
            out[~zero] = -np.inf
        return out
    a = q[~zero] / remainder
    hi = np.log(200.0)
    lo = np.log(1e-8) - np.log1p(a.max())
    v = np.arange(lo, hi + _GRID_STEP, _GRID_STEP)
    s = np.exp(v)
    L = np.log(-np.expm1(-np.outer(a, s)))  # (members with q > 0, grid)
    base = v - s
    total = L.sum(axis=0)
    logdv = np.log(_GRID_STEP)
    pos = np.flatnonzero(~zero)
    out[pos] = logsumexp(base + total - L, axis=1) + logdv
    if nzero == 1:
        # only the zero-weight member can be the chosen one
        out[pos] = -np.inf
        out[zero] = logsumexp(base + total) + logdv
    return out


def correction_offsets(q_set, universe_total, correction):
    if correction == "none":
        return np.zeros(len(q_set))
    if correction == "naive":
        return -np.log(np.maximum(q_set, 1e-300) / universe_total)
    if correction == "exact":
        return exact_log_inclusion(q_set, max(universe_total - q_set.sum(), 0.0))
    raise ValueError(f"unknown correction {correction!r}")


# ---------------------------------------------------------------------------
# building choice sets


def _one_set(cost_row, chosen, zones: ZoneSet, k, correction, t_bar, rng):
    w = sampling_weight(zones.restaurant_counts, cost_row, t_bar)
    pool = w.copy()
    pool[chosen] = 0.0
    drawn = weighted_sample_without_replacement(pool, k, rng)
    alts = np.concatenate([[chosen], drawn])
    X = np.column_stack([zones.major_station[alts], zones.log_size[alts], cost_row[alts]])
    q = w[alts]
    return alts, X, q, correction_offsets(q, w.sum(), correction)


def sample_choice_data(costs, chosen_index, zones: ZoneSet, config: SamplingConfig, t_bar=None,
                       stream=(), situation_ids=None) -> ChoiceData:
    """Choice sets for every row of a (situations, zones) cost matrix.

    Situation ``n`` draws from the substream ``(config.rng_seed, SAMPLING,
    *stream, n)`` so the result is independent of evaluation order.
    """
    costs = np.asarray(costs, dtype=float)
    n = costs.shape[0]
    if config.k > len(zones) - 1:
        raise InsufficientAlternativesError(f"k={config.k} exceeds {len(zones) - 1} non-chosen zones")
    if t_bar is None:
        t_bar = chosen_mean(costs, chosen_index)
    if situation_ids is None:
        situation_ids = tuple(str(i) for i in range(n))
    J = config.k + 1
    zone_idx = np.empty((n, J), dtype=int)
    X = np.empty((n, J, len(FEATURES)))
    q = np.empty((n, J))
    offsets = np.empty((n, J))
    for i in range(n):
        rng = _random.substream(config.rng_seed, _random.SAMPLING, *stream, i)
        zone_idx[i], X[i], q[i], offsets[i] = _one_set(
            costs[i], chosen_index[i], zones, config.k, config.correction, t_bar, rng)
    return ChoiceData(tuple(situation_ids), zones.ids[zone_idx], X, q, offsets, float(t_bar))


def build_choice_set(situation, universe: ZoneSet, provider, impedance_kind, config: SamplingConfig,
                     rng, t_bar) -> ChoiceSet:
    """Sample one situation's choice set. Participants must carry modes."""
    if situation.chosen_zone not in universe:
        raise ValueError(f"chosen zone {situation.chosen_zone} not in universe")
    if config.k > len(universe) - 1:
        raise InsufficientAlternativesError(f"k={config.k} exceeds {len(universe) - 1} non-chosen zones")
    times = np.vstack([provider.times(p.origin, universe, p.mode) for p in situation.participants])
    cost = aggregate_times(times, ImpedanceKind(impedance_kind), situation.ego_index)
    alts, X, q, off = _one_set(cost, universe.index[situation.chosen_zone], universe, config.k,
                               config.correction, t_bar, rng)
    return ChoiceSet(situation.id, universe.ids[alts], X, q, float(t_bar), off)


def build_choice_sets(dataset: Dataset, provider, impedance_kind, config: SamplingConfig,
                      stream=()) -> ChoiceData:
    costs = group_costs(participant_times(dataset, provider), dataset.situations, impedance_kind)
    return sample_choice_data(costs, dataset.chosen_index, dataset.zones, config, stream=stream,
                              situation_ids=tuple(s.id for s in dataset.situations))


def write_choice_sets(data: ChoiceData, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["situation_id", "zone_id", "chosen", "q", *FEATURES, "offset"])
        for n in range(len(data)):
            for j in range(data.n_alternatives):
                w.writerow([data.situation_ids[n], int(data.zone_ids[n, j]), int(j == 0),
                            repr(float(data.q[n, j])), *(repr(float(x)) for x in data.X[n, j]),
                            repr(float(data.offsets[n, j]))])
    return path
