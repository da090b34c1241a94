"""Bootstrap estimation, direct elasticities, cross-validation, segmentation
and probability curves."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import norm

from . import _random
from .domain import Dataset
from .estimator import EstimationResult, ModelSpec, choice_probabilities, estimate, predict_probabilities
from .impedance import ImpedanceKind, SpeedProvider, group_costs, participant_times
from .sampling import FEATURES, ChoiceData, SamplingConfig, chosen_mean, sample_choice_data

ELASTICITY_VARIABLES = ("ln_restaurants", "cost")
WEIGHTINGS = ("unweighted", "probability")


class FoldSizeError(ValueError):
    pass


class EmptySegmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PreparedData:
    """A dataset with member travel times computed once, reused across specs."""

    dataset: Dataset
    times: tuple

    @cached_property
    def _costs(self):
        return {}

    def costs(self, kind):
        kind = ImpedanceKind(kind)
        if kind not in self._costs:
            self._costs[kind] = group_costs(self.times, self.dataset.situations, kind)
        return self._costs[kind]

    @property
    def chosen_index(self):
        return self.dataset.chosen_index

    @property
    def zones(self):
        return self.dataset.zones

    def __len__(self):
        return len(self.dataset.situations)


def prepare(dataset, provider=None) -> PreparedData:
    if isinstance(dataset, PreparedData):
        return dataset
    provider = provider if provider is not None else SpeedProvider()
    return PreparedData(dataset, tuple(participant_times(dataset, provider)))


# ---------------------------------------------------------------------------
# elasticities


def direct_elasticity(beta_x, x, p, transform="linear"):
    """Point elasticity of an alternative's probability w.r.t. its own attribute.

    For a log-transformed variable the elasticity is taken with respect to the
    raw quantity, so ``x`` is ignored.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    if transform == "linear":
        return beta_x * np.asarray(x, dtype=float) * (1.0 - p)
    if transform == "log":
        return beta_x * (1.0 - p)
    raise ValueError(f"unknown transform {transform!r}")


def mean_elasticities(beta, data: ChoiceData, weighting="unweighted"):
    """Elasticities averaged over every alternative of every situation."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    P = predict_probabilities(beta, data)
    size_i, cost_i = FEATURES.index("ln_restaurants"), FEATURES.index("cost")
    E = {
        "ln_restaurants": direct_elasticity(beta[size_i], None, P, "log"),
        "cost": direct_elasticity(beta[cost_i], data.X[:, :, cost_i], P, "linear"),
    }
    if weighting == "unweighted":
        return {k: float(v.mean()) for k, v in E.items()}
    return {k: float((P * v).sum() / P.sum()) for k, v in E.items()}


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapConfig:
    r: int = 50
    rng_seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    weighting: str = "unweighted"
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("at least 2 bootstrap replicates are required")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")


def summarize(values):
    """Mean, sample standard deviation and 95% percentile interval."""
    v = np.asarray(values, dtype=float)
    lo, hi = np.percentile(v, [2.5, 97.5], axis=0)
    return {
        "mean": v.mean(axis=0),
        "se": v.std(axis=0, ddof=1) if len(v) > 1 else np.zeros_like(v[0]),
        "ci_low": lo,
        "ci_high": hi,
    }


@dataclass
class BootstrapResult:
    impedance_kind: str
    betas: np.ndarray  # (replicates kept, K)
    elasticities: dict  # variable -> (replicates kept,)
    rho2: np.ndarray
    adj_rho2: np.ndarray
    n_requested: int
    failed: list = field(default_factory=list)
    variables: tuple = FEATURES

    @property
    def n_replicates(self):
        return len(self.betas)

    def summary(self):
        out = {"coefficients": {}, "elasticities": {}}
        s = summarize(self.betas)
        for i, name in enumerate(self.variables):
            c = {k: float(v[i]) for k, v in s.items()}
            # bootstrap z against zero; flags mirror a two-sided 0.10 level
            c["z"] = c["mean"] / c["se"] if c["se"] > 0 else None
            c["p_value"] = float(2 * norm.sf(abs(c["z"]))) if c["se"] > 0 else None
            c["significant_10"] = c["p_value"] is not None and c["p_value"] < 0.10
            out["coefficients"][name] = c
        for name, vals in self.elasticities.items():
            out["elasticities"][name] = {k: float(v) for k, v in summarize(vals).items()}
        out["rho2"] = float(np.mean(self.rho2))
        out["adj_rho2"] = float(np.mean(self.adj_rho2))
        return out

    def to_dict(self):
        return {
            "impedance_kind": self.impedance_kind,
            "n_requested": self.n_requested,
            "n_used": self.n_replicates,
            "failed_replicates": list(self.failed),
            "betas": self.betas.tolist(),
            "elasticities": {k: [float(x) for x in v] for k, v in self.elasticities.items()},
            "summary": self.summary(),
        }


def _replicate(costs, chosen, zones, spec, config: BootstrapConfig, r):
    n = len(chosen)
    idx = _random.substream(config.rng_seed, _random.BOOTSTRAP, r).integers(0, n, n)
    sampling = dataclasses.replace(config.sampling, rng_seed=config.rng_seed)
    data = sample_choice_data(costs[idx], chosen[idx], zones, sampling, stream=(_random.BOOTSTRAP, r))
    res = estimate(data, spec, tol=config.tol, max_iter=config.max_iter)
    return res, mean_elasticities(res.beta, data, config.weighting)


def _run_parallel(fn, items, jobs):
    if jobs == 1:
        return [fn(i) for i in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(i) for i in items)


def bootstrap_estimate(dataset, spec: ModelSpec, provider=None, config: BootstrapConfig = BootstrapConfig(),
                       jobs=1) -> BootstrapResult:
    """Resample situations, redraw choice sets, re-estimate; ``config.r`` times.

    Replicate ``r`` uses only substreams keyed by ``(seed, r)``, so the output
    does not depend on ``jobs``. Non-converged replicates are dropped and
    listed in ``failed``.
    """
    prep = prepare(dataset, provider)
    costs = prep.costs(spec.impedance_kind)
    chosen = prep.chosen_index
    zones = prep.zones

    def run(r):
        return _replicate(costs, chosen, zones, spec, config, r)

    outs = _run_parallel(run, range(config.r), jobs)
    kept = [(r, res, el) for r, (res, el) in enumerate(outs) if res.converged]
    failed = [r for r, (res, _) in enumerate(outs) if not res.converged]
    if not kept:
        raise RuntimeError(f"all {config.r} bootstrap replicates failed to converge")
    return BootstrapResult(
        impedance_kind=spec.impedance_kind.value,
        betas=np.array([res.beta for _, res, _ in kept]),
        elasticities={v: np.array([el[v] for _, _, el in kept]) for v in ELASTICITY_VARIABLES},
        rho2=np.array([res.rho2 for _, res, _ in kept]),
        adj_rho2=np.array([res.adj_rho2 for _, res, _ in kept]),
        n_requested=config.r,
        failed=failed,
        variables=tuple(spec.variables),
    )


def elasticity_report(bootstrap: BootstrapResult):
    """Rows of (variable, mean, ci_low, ci_high, se) across replicates."""
    rows = []
    for name, vals in bootstrap.elasticities.items():
        s = summarize(vals)
        rows.append({"variable": name, "mean": float(s["mean"]), "ci_low": float(s["ci_low"]),
                     "ci_high": float(s["ci_high"]), "se": float(s["se"])})
    return rows


# ---------------------------------------------------------------------------
# prediction metrics


def fitting_factor(chosen_probabilities) -> float:
    p = np.asarray(chosen_probabilities, dtype=float)
    if p.size == 0:
        raise ValueError("empty input")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return 100.0 * float(p.mean())


def percent_correct(predicted, chosen) -> float:
    predicted, chosen = list(predicted), list(chosen)
    if len(predicted) != len(chosen):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(chosen)} choices")
    if not chosen:
        raise ValueError("empty input")
    return 100.0 * sum(a == b for a, b in zip(predicted, chosen)) / len(chosen)


def predicted_zones(P, zone_ids):
    """Highest-probability zone per row; ties go to the lowest zone id."""
    P = np.asarray(P)
    zone_ids = np.asarray(zone_ids)
    best = P == P.max(axis=1, keepdims=True)
    return np.where(best, zone_ids, np.iinfo(np.int64).max).min(axis=1)


@dataclass
class FoldRecord:
    fold: int
    n_train: int
    n_test: int
    percent_correct: float
    fitting_factor: float
    beta: list
    converged: bool


@dataclass
class ValidationReport:
    impedance_kind: str
    folds: list
    test_indices: list = field(repr=False, default_factory=list)

    @property
    def percent_correct(self):
        return float(np.mean([f.percent_correct for f in self.folds]))

    @property
    def fitting_factor(self):
        return float(np.mean([f.fitting_factor for f in self.folds]))

    def to_dict(self):
        return {
            "impedance_kind": self.impedance_kind,
            "percent_correct": self.percent_correct,
            "fitting_factor": self.fitting_factor,
            "folds": [dataclasses.asdict(f) for f in self.folds],
        }


def fold_partition(n, folds, rng_seed, groups=None):
    """Seeded split of ``range(n)`` into ``folds`` near-equal test folds.

    With ``groups`` (one label per item) whole groups are assigned to folds.
    """
    rng = _random.substream(rng_seed, _random.CROSS_VALIDATION)
    if groups is None:
        if n < folds:
            raise FoldSizeError(f"{n} situations cannot fill {folds} folds")
        return [np.sort(f) for f in np.array_split(rng.permutation(n), folds)]
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < folds:
        raise FoldSizeError(f"{len(labels)} groups cannot fill {folds} folds")
    parts = np.array_split(rng.permutation(labels), folds)
    return [np.flatnonzero(np.isin(groups, p)) for p in parts]


def score(beta, data: ChoiceData):
    """(percent correct, fitting factor) of ``beta`` on sampled sets."""
    P = predict_probabilities(beta, data)
    pred = predicted_zones(P, data.zone_ids)
    return percent_correct(pred, data.zone_ids[:, 0]), fitting_factor(P[:, 0])


def cross_validate(dataset, spec: ModelSpec, provider=None, folds=10, rng_seed=0,
                   sampling: SamplingConfig = SamplingConfig(), by_clique=False, fixed_beta=None,
                   jobs=1) -> ValidationReport:
    """k-fold validation over choice situations.

    Choice sets are sampled once for the whole dataset; each fold estimates on
    the remaining folds and scores its own situations. ``fixed_beta`` skips
    estimation and scores the given coefficients everywhere.
    """
    prep = prepare(dataset, provider)
    costs = prep.costs(spec.impedance_kind)
    groups = [s.clique_id for s in prep.dataset.situations] if by_clique else None
    parts = fold_partition(len(prep), folds, rng_seed, groups)
    data = sample_choice_data(costs, prep.chosen_index, prep.zones,
                              dataclasses.replace(sampling, rng_seed=rng_seed),
                              stream=(_random.CROSS_VALIDATION,),
                              situation_ids=tuple(s.id for s in prep.dataset.situations))
    n = len(prep)

    def run(f):
        test = parts[f]
        train = np.setdiff1d(np.arange(n), test)
        if fixed_beta is None:
            res = estimate(data.subset(train), spec)
            beta, ok = res.beta, res.converged
        else:
            beta, ok = np.asarray(fixed_beta, dtype=float), True
        pc, ff = score(beta, data.subset(test))
        return FoldRecord(f, len(train), len(test), pc, ff, [float(b) for b in beta], ok)

    records = _run_parallel(run, range(len(parts)), jobs)
    return ValidationReport(spec.impedance_kind.value, records, [p.tolist() for p in parts])


def compare_to_baseline(reports: dict, baseline="ego"):
    """Percentage increase of each model's metrics over the baseline model."""
    base = reports[baseline]
    out = {}
    for kind, rep in reports.items():
        if kind == baseline:
            continue
        out[kind] = {
            "percent_correct": 100.0 * (rep.percent_correct / base.percent_correct - 1.0),
            "fitting_factor": 100.0 * (rep.fitting_factor / base.fitting_factor - 1.0),
        }
    return out


# ---------------------------------------------------------------------------
# probability curves


@dataclass(frozen=True)
class CurveSpec:
    grid: tuple
    restaurant_count: float = 300.0
    k: int = 20
    background_time: float = 15.0
    background_restaurants: float | None = None
    major_station: bool = False

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or len(g) == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be nonempty, nonnegative and strictly increasing")


def probability_curve(beta, curve_spec: CurveSpec):
    """Focal-zone probability as its impedance sweeps the grid.

    The focal zone competes with ``k`` identical background zones at
    ``background_time``; all zones share the restaurant count and station flag
    unless ``background_restaurants`` is set.
    """
    beta = np.asarray(beta, dtype=float)
    m_bg = curve_spec.restaurant_count if curve_spec.background_restaurants is None \
        else curve_spec.background_restaurants
    major = float(curve_spec.major_station)
    v_bg = beta @ np.array([major, np.log(m_bg), curve_spec.background_time])
    out = []
    for t in curve_spec.grid:
        v_focal = beta @ np.array([major, np.log(curve_spec.restaurant_count), t])
        p = choice_probabilities(np.concatenate([[v_focal], np.full(curve_spec.k, v_bg)]))[0]
        out.append((float(t), float(p)))
    return out


def curves_svg(curves: dict, width=640, height=400, margin=50):
    """Minimal SVG line plot of ``{label: [(minutes, probability), ...]}``."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    xs = [t for pts in curves.values() for t, _ in pts]
    ys = [p for pts in curves.values() for _, p in pts]
    x0, x1 = min(xs), max(xs)
    y1 = max(ys) if ys else 1.0
    y1 = y1 if y1 > 0 else 1.0
    pw, ph = width - 2 * margin, height - 2 * margin

    def sx(t):
        return margin + (t - x0) / ((x1 - x0) or 1.0) * pw

    def sy(p):
        return height - margin - p / y1 * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">travel time (min)</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">choice probability</text>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="10" text-anchor="middle">{x1:g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (label, pts) in enumerate(curves.items()):
        c = colors[i % len(colors)]
        poly = " ".join(f"{sx(t):.2f},{sy(p):.2f}" for t, p in pts)
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{poly}"/>')
        parts.append(f'<text x="{width - margin - 4}" y="{margin + 14 * (i + 1)}" font-size="11" '
                     f'text-anchor="end" fill="{c}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SegmentRule:
    """Binary split of situations; ``predicate`` True puts a situation in ``names[0]``."""

    label: str
    names: tuple
    predicate: object = field(compare=False)

    def classify(self, dataset: Dataset):
        return np.array([bool(self.predicate(s, dataset.clique_of(s))) for s in dataset.situations])


def _participant_members(s, c):
    return [c.member(p.member_id) for p in s.participants]


def _majority(s, c, test):
    """Whether most participants pass ``test``; an even split follows the ego."""
    ms = _participant_members(s, c)
    n = sum(test(m) for m in ms)
    if 2 * n == len(ms):
        return bool(test(c.ego))
    return 2 * n > len(ms)


def segment_rules(wards_center=(0.0, 0.0), wards_radius_km=13.0):
    """The six segmentation standards, with the day/time standard split in two."""
    cx, cy = wards_center
    rules = [
        SegmentRule("age", ("age<60", "age>=60"), lambda s, c: not _majority(s, c, lambda m: m.is_senior)),
        SegmentRule("gender", ("female>0.5", "male>=0.5"), lambda s, c: _majority(s, c, lambda m: m.gender == "F")),
        SegmentRule("party_size", ("size<=4", "size>4"), lambda s, c: s.party_size <= 4),
        SegmentRule("time", ("noon", "evening"), lambda s, c: s.time == "noon"),
        SegmentRule("day", ("weekend", "weekday"), lambda s, c: s.day == "weekend"),
        SegmentRule("wards", ("in_wards", "outside_wards"),
                    lambda s, c: np.hypot(c.ego.home[0] - cx, c.ego.home[1] - cy) <= wards_radius_km),
        SegmentRule("relationship", ("lt5", "ge5"), lambda s, c: c.relationship_length_majority == "lt5"),
    ]
    return {r.label: r for r in rules}


@dataclass
class SegmentResult:
    rule: str
    names: tuple
    sizes: dict
    results: dict  # name -> BootstrapResult
    curves: dict  # name -> [(minutes, probability)]

    def to_dict(self):
        return {
            "rule": self.rule,
            "sizes": dict(self.sizes),
            "results": {k: v.to_dict() for k, v in self.results.items()},
            "curves": {k: [list(pt) for pt in v] for k, v in self.curves.items()},
        }


def segment_and_estimate(dataset, rule: SegmentRule, spec: ModelSpec, provider=None,
                         config: BootstrapConfig = BootstrapConfig(), curve_grid=None, jobs=1,
                         min_size=30) -> SegmentResult:
    """Bootstrap-estimate each side of a binary segmentation separately."""
    prep = prepare(dataset, provider)
    mask = rule.classify(prep.dataset)
    sides = {rule.names[0]: np.flatnonzero(mask), rule.names[1]: np.flatnonzero(~mask)}
    for name, idx in sides.items():
        if len(idx) == 0:
            raise EmptySegmentError(f"segment {rule.label}: {name} is empty")
        if len(idx) < min_size:
            warnings.warn(f"segment {rule.label}: {name} has only {len(idx)} situations", stacklevel=2)
    results, curves = {}, {}
    full_costs = prep.costs(spec.impedance_kind)
    t_ref = chosen_mean(full_costs, prep.chosen_index)
    grid = tuple(curve_grid) if curve_grid is not None else tuple(np.arange(0.0, 61.0, 1.0))
    for name, idx in sides.items():
        sub = _subset(prep, idx)
        results[name] = bootstrap_estimate(sub, spec, None, config, jobs)
        beta = results[name].summary()["coefficients"]
        b = np.array([beta[v]["mean"] for v in spec.variables])
        curves[name] = probability_curve(b, CurveSpec(grid, background_time=t_ref))
    return SegmentResult(rule.label, tuple(rule.names), {k: int(len(v)) for k, v in sides.items()},
                         results, curves)


def _subset(prep: PreparedData, idx):
    return PreparedData(prep.dataset.subset(idx), tuple(prep.times[i] for i in idx))
