"""Synthetic scenarios with known coefficients, for parameter-recovery checks.

Marginals follow the eating-out survey: party sizes and mode shares of the
last joint event, 21 of 119 zones near major stations, 300 restaurants per
zone on average. Choices are simulated over the full universe, so recovering
the coefficients from sampled choice sets exercises the sampler as well.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _random
from .analysis import BootstrapConfig, bootstrap_estimate, cross_validate, prepare
from .domain import (
    MODE_ORDER, ChoiceSituation, Clique, Dataset, Member, Participant,
    SituationKind, SituationSet, Zone, ZoneSet,
)
from .estimator import ModelSpec, choice_probabilities, estimate
from .impedance import ImpedanceKind, SpeedProvider, group_costs, participant_times
from .sampling import sample_choice_data

# survey percentages sum to 101.97, so they are renormalised
_PARTY_SIZE_PERCENT = {2: 67.32, 3: 18.81, 4: 10.89, 5: 3.96, 6: 0.99}
PARTY_SIZE_SHARES = {k: v / sum(_PARTY_SIZE_PERCENT.values()) for k, v in _PARTY_SIZE_PERCENT.items()}
MODE_SHARES = {"transit": 0.4653, "bus": 0.0099, "car": 0.2277, "bike": 0.0396, "walk": 0.2574}
TIME_SHARES = {"noon": 0.4257, "evening": 0.2673, "night": 0.3069}
AGE_SHARES = {"<30": 0.14, "30-39": 0.16, "40-49": 0.19, "50-59": 0.15, "60-69": 0.21, "70+": 0.15}
AVERAGE_MODEL_BETA = (0.0093, 0.5590, -0.2943)

# per-km penalty on a mode's log-share by distance to the nearest zone
_MODE_DISTANCE_DECAY = {"walk": 2.0, "bike": 0.25}


def _normalized(d):
    total = sum(d.values())
    return {k: v / total for k, v in d.items()}


@dataclass(frozen=True)
class ScenarioConfig:
    n_zones: int = 119
    mean_restaurants: float = 300.0
    restaurant_sigma: float = 1.0
    major_multiplier: float = 3.0
    major_share: float = 21 / 119
    n_stations: int = 6
    station_ring_km: float = 4.0
    zone_spread_km: float = 14.0
    n_cliques: int = 101
    n_situations: int = 261
    party_size_shares: dict = field(default_factory=lambda: dict(PARTY_SIZE_SHARES))
    mode_shares: dict = field(default_factory=lambda: dict(MODE_SHARES))
    home_spread_km: float = 12.0
    home_dispersion_km: float = 4.0
    origin_shift_km: float = 2.0
    weekend_share: float = 0.5446
    time_shares: dict = field(default_factory=lambda: dict(TIME_SHARES))
    age_shares: dict = field(default_factory=lambda: dict(AGE_SHARES))
    female_share: float = 0.5
    age_homophily: float = 0.8  # chance an alter shares the ego's age band
    long_relationship_share: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("party_size_shares", "mode_shares", "time_shares", "age_shares"):
            d = getattr(self, name)
            if any(v < 0 for v in d.values()) or abs(sum(d.values()) - 1.0) > 1e-3:
                raise ValueError(f"{name} must be nonnegative and sum to 1")
        if self.n_zones < 1 or self.n_cliques < 1 or self.n_situations < 1:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.age_homophily <= 1.0:
            raise ValueError("age_homophily must lie in [0, 1]")
        if min(self.party_size_shares) < 2:
            raise ValueError("joint situations need party size >= 2")


@dataclass(frozen=True)
class TrueModel:
    beta_true: tuple = AVERAGE_MODEL_BETA
    impedance_kind: ImpedanceKind = ImpedanceKind.MEAN

    def __post_init__(self):
        object.__setattr__(self, "impedance_kind", ImpedanceKind(self.impedance_kind))
        if not np.all(np.isfinite(self.beta_true)):
            raise ValueError("beta_true must be finite")


@dataclass(frozen=True, eq=False)
class Scenario:
    zones: ZoneSet
    cliques: tuple
    situations: tuple  # chosen_zone is None until simulated


def _quota(shares, n):
    """Largest-remainder allocation of ``n`` items to ``shares``."""
    keys = list(shares)
    raw = np.array([shares[k] for k in keys]) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return dict(zip(keys, counts))


def _draw(rng, shares, size=None):
    keys = list(shares)
    p = np.array([shares[k] for k in keys], dtype=float)
    idx = rng.choice(len(keys), size=size, p=p / p.sum())
    return keys[idx] if size is None else [keys[i] for i in idx]


def _zones(config, rng):
    n_major = int(round(config.n_zones * config.major_share))
    angles = 2 * np.pi * (np.arange(config.n_stations) / config.n_stations + rng.random() / config.n_stations)
    stations = config.station_ring_km * np.column_stack([np.cos(angles), np.sin(angles)])
    xy = np.empty((config.n_zones, 2))
    for i in range(n_major):
        r, a = np.sqrt(rng.random()), 2 * np.pi * rng.random()
        xy[i] = stations[i % config.n_stations] + r * np.array([np.cos(a), np.sin(a)])
    xy[n_major:] = rng.normal(0.0, config.zone_spread_km, size=(config.n_zones - n_major, 2))
    raw = rng.lognormal(0.0, config.restaurant_sigma, size=config.n_zones)
    raw[:n_major] *= config.major_multiplier
    counts = np.maximum(np.round(raw / raw.mean() * config.mean_restaurants), 0).astype(int)
    area = rng.gamma(1.5, 260.0 / 1.5, size=config.n_zones)
    order = rng.permutation(config.n_zones)
    return ZoneSet(tuple(
        Zone(k + 1, int(counts[i]), bool(i < n_major), float(xy[i, 0]), float(xy[i, 1]), float(round(area[i], 1)))
        for k, i in enumerate(order)
    ))


def _mode(rng, config, origin, zones):
    d = float(np.min(np.hypot(zones.xy[:, 0] - origin[0], zones.xy[:, 1] - origin[1])))
    logits = {m: np.log(s) - _MODE_DISTANCE_DECAY.get(m, 0.0) * d
              for m, s in config.mode_shares.items() if s > 0}
    top = max(logits.values())
    return MODE_ORDER[[m.value for m in MODE_ORDER].index(
        _draw(rng, {m: np.exp(v - top) for m, v in logits.items()}))]


def generate_scenario(config: ScenarioConfig = ScenarioConfig(), rng=None) -> Scenario:
    """Zones, cliques and unchosen situations drawn from ``config``."""
    rng = rng if rng is not None else _random.substream(config.rng_seed, _random.SYNTH)
    zones = _zones(config, rng)
    sizes = [s for s, c in _quota(_normalized(config.party_size_shares), config.n_cliques).items()
             for _ in range(c)]
    sizes = list(rng.permutation(sizes))
    ages = _normalized(config.age_shares)
    cliques = []
    for ci, size in enumerate(sizes):
        anchor = rng.normal(0.0, config.home_spread_km, size=2)
        members = []
        for j in range(int(size)):
            home = tuple(float(v) for v in anchor + rng.normal(0.0, config.home_dispersion_km, size=2))
            age = _draw(rng, ages)
            if j > 0 and rng.random() < config.age_homophily:
                age = members[0].age_band
            members.append(Member(
                "e" if j == 0 else f"a{j}", "ego" if j == 0 else "alter", home,
                age, "F" if rng.random() < config.female_share else "M",
                "" if j == 0 else ("ge5" if rng.random() < config.long_relationship_share else "lt5"),
            ))
        cliques.append(Clique(f"c{ci + 1:04d}", members[0], tuple(members[1:])))

    n_actual = min(config.n_cliques, config.n_situations)
    owners = list(range(n_actual))
    extra = config.n_situations - n_actual
    order = rng.permutation(config.n_cliques)
    owners += [int(order[i % config.n_cliques]) for i in range(extra)]
    situations = []
    for si, ci in enumerate(owners):
        c = cliques[ci]
        kind = SituationKind.ACTUAL if si < n_actual else SituationKind.ALTERNATIVE
        parts = []
        for m in c.members:
            observed = kind is SituationKind.ACTUAL and m.role == "ego"
            origin = m.home
            if observed:
                origin = tuple(float(v) for v in np.asarray(m.home) + rng.normal(0.0, config.origin_shift_km, size=2))
            parts.append(Participant(m.id, origin, _mode(rng, config, origin, zones), observed))
        day = "weekend" if rng.random() < config.weekend_share else "weekday"
        situations.append(ChoiceSituation(
            f"s{si + 1:05d}", c.id, kind, None, tuple(parts), c.ego.id, day,
            _draw(rng, _normalized(config.time_shares)),
        ))
    return Scenario(zones, tuple(cliques), tuple(situations))


def utilities(beta, zones: ZoneSet, costs):
    """(situations, zones) utilities over the full universe."""
    beta = np.asarray(beta, dtype=float)
    return beta[0] * zones.major_station + beta[1] * zones.log_size + beta[2] * np.asarray(costs)


def simulate_choices(true_model: TrueModel, scenario: Scenario, provider=None, rng=None) -> Dataset:
    """Draw each situation's chosen zone from full-universe MNL probabilities."""
    provider = provider or SpeedProvider()
    rng = rng if rng is not None else _random.substream(0, _random.SYNTH, 1)
    pending = Dataset(scenario.zones, scenario.cliques, SituationSet(scenario.situations))
    costs = group_costs(participant_times(pending, provider), pending.situations, true_model.impedance_kind)
    P = choice_probabilities(utilities(true_model.beta_true, scenario.zones, costs))
    situations = []
    for s, p in zip(scenario.situations, P):
        j = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
        j = min(j, len(p) - 1)
        situations.append(dataclasses.replace(s, chosen_zone=int(scenario.zones.ids[j])))
    return Dataset(scenario.zones, scenario.cliques, SituationSet(tuple(situations)))


def synthetic_dataset(config: ScenarioConfig = ScenarioConfig(), true_model: TrueModel = TrueModel(),
                      provider=None) -> Dataset:
    """Generate and simulate in one call, all randomness from ``config.rng_seed``."""
    scenario = generate_scenario(config, _random.substream(config.rng_seed, _random.SYNTH, 0))
    return simulate_choices(true_model, scenario, provider,
                            _random.substream(config.rng_seed, _random.SYNTH, 1))


@dataclass(frozen=True)
class PipelineConfig:
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    run_cv: bool = False
    folds: int = 10
    estimate_impedance: ImpedanceKind | None = None  # defaults to the true model's kind


@dataclass
class RecoveryReport:
    beta_true: list
    beta_mean: list
    se: list
    z: list
    ci_covers: list
    rho2: float
    adj_rho2: float
    n_failed_replicates: int
    percent_correct: float | None = None
    fitting_factor: float | None = None

    @property
    def all_within(self):
        return all(abs(z) < 2 for z in self.z)

    def to_dict(self):
        return dataclasses.asdict(self)


def recovery_test(config: ScenarioConfig, true_model: TrueModel = TrueModel(),
                  pipeline: PipelineConfig = PipelineConfig(), provider=None, jobs=1) -> RecoveryReport:
    """Generate, simulate and bootstrap-estimate; compare with the truth."""
    provider = provider or SpeedProvider()
    dataset = synthetic_dataset(config, true_model, provider)
    prep = prepare(dataset, provider)
    kind = pipeline.estimate_impedance or true_model.impedance_kind
    spec = ModelSpec(kind)
    boot = bootstrap_estimate(prep, spec, None, pipeline.bootstrap, jobs)
    summ = boot.summary()["coefficients"]
    mean = np.array([summ[v]["mean"] for v in spec.variables])
    se = np.array([summ[v]["se"] for v in spec.variables])
    lo = np.array([summ[v]["ci_low"] for v in spec.variables])
    hi = np.array([summ[v]["ci_high"] for v in spec.variables])
    truth = np.asarray(true_model.beta_true, dtype=float)
    point = estimate(sample_choice_data(prep.costs(kind), prep.chosen_index, prep.zones,
                                        dataclasses.replace(pipeline.bootstrap.sampling,
                                                            rng_seed=pipeline.bootstrap.rng_seed)), spec)
    report = RecoveryReport(
        beta_true=truth.tolist(), beta_mean=mean.tolist(), se=se.tolist(),
        z=((mean - truth) / se).tolist(), ci_covers=((lo <= truth) & (truth <= hi)).tolist(),
        rho2=float(point.rho2), adj_rho2=float(point.adj_rho2),
        n_failed_replicates=len(boot.failed),
    )
    if pipeline.run_cv:
        cv = cross_validate(prep, spec, None, pipeline.folds, pipeline.bootstrap.rng_seed,
                            pipeline.bootstrap.sampling)
        report.percent_correct, report.fitting_factor = cv.percent_correct, cv.fitting_factor
    return report

