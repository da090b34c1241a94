import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import make_situation, make_zones
from groupdest.domain import Clique, Dataset, Member, Mode, SituationSet
from groupdest.impedance import SkimProvider, SpeedProvider
from groupdest.sampling import (InsufficientAlternativesError, SamplingConfig, build_choice_set, build_choice_sets,
                                correction_offsets, exact_log_inclusion, mean_travel_time, sample_choice_data,
                                sampling_weight, weighted_sample_without_replacement, write_choice_sets)


def sequence_probability(weights, seq):
    w = np.array(weights, dtype=float)
    p = 1.0
    for j in seq:
        p *= w[j] / w.sum()
        w[j] = 0.0
    return p


def inclusion_probabilities(weights, k):
    """Brute force over ordered draw sequences."""
    n = len(weights)
    out = np.zeros(n)
    for seq in itertools.permutations(range(n), k):
        p = sequence_probability(weights, seq)
        for j in seq:
            out[j] += p
    return out


class TestWeight:
    def test_at_mean_time(self):
        assert sampling_weight(300, 15.0, 15.0) == pytest.approx(300 * math.exp(-2), rel=1e-14)
        assert sampling_weight(300, 15.0, 15.0) == pytest.approx(40.60, abs=0.005)

    def test_zero_time(self):
        assert sampling_weight(123, 0.0, 9.0) == 123.0

    def test_ratio(self):
        assert sampling_weight(50, 5.0, 10.0) / sampling_weight(50, 10.0, 10.0) == pytest.approx(math.e)

    def test_nonpositive_t_bar(self):
        with pytest.raises(ValueError):
            sampling_weight(1, 1.0, 0.0)

    @given(st.integers(0, 10_000), st.floats(0, 300), st.floats(0.1, 100))
    def test_zero_iff_empty(self, m, t, t_bar):
        w = sampling_weight(m, t, t_bar)
        assert (w == 0) == (m == 0) or t / t_bar > 300  # exp underflow aside


def _two_person_dataset(times_by_situation):
    """Situations whose mean impedance to the chosen zone is given, via a skim."""
    zones = make_zones([10, 10], xy=[(0.5, 0.5), (5.5, 0.5)])
    ego = Member("e", "ego", (0.5, 0.5))
    alter = Member("a1", "alter", (0.5, 0.5), rel_length="ge5")
    clique = Clique("c1", ego, (alter,))
    table = {}
    sits = []
    for i, t in enumerate(times_by_situation):
        table[("0:0", 1, Mode.WALK)] = t
        table[("0:0", 2, Mode.WALK)] = t
        sits.append(make_situation(f"s{i}", clique, 1))
    return Dataset(zones, (clique,), SituationSet(tuple(sits))), SkimProvider(table)


class TestMeanTravelTime:
    def test_one_situation(self):
        ds, skim = _two_person_dataset([12.0])
        assert mean_travel_time(ds, skim, "mean") == 12.0

    def test_two_situations(self):
        zones = make_zones([10, 10], xy=[(0.5, 0.5), (5.5, 0.5)])
        clique = Clique("c1", Member("e", "ego", (0.5, 0.5)), (Member("a1", "alter", (0.5, 0.5), rel_length="lt5"),))
        skim = SkimProvider({("0:0", 1, Mode.WALK): 10.0, ("0:0", 2, Mode.WALK): 30.0})
        ds = Dataset(zones, (clique,), SituationSet((make_situation("s1", clique, 1), make_situation("s2", clique, 2))))
        assert mean_travel_time(ds, skim, "max") == 20.0

    def test_paper_shaped_band(self):
        from groupdest.synth import ScenarioConfig, synthetic_dataset
        t = [mean_travel_time(synthetic_dataset(ScenarioConfig(rng_seed=s)), SpeedProvider(), "mean") for s in range(6)]
        assert 10.0 <= np.mean(t) <= 20.0


class TestSequentialDraws:
    def test_insufficient(self):
        with pytest.raises(InsufficientAlternativesError):
            weighted_sample_without_replacement([1.0, 0.0, 2.0], 3, np.random.default_rng(0))

    def test_distinct_and_positive(self):
        rng = np.random.default_rng(1)
        w = np.array([0.0, 1.0, 5.0, 0.0, 2.0, 3.0])
        for _ in range(200):
            idx = weighted_sample_without_replacement(w, 4, rng)
            assert len(set(idx)) == 4 and np.all(w[idx] > 0)

    def test_ordered_pair_frequencies(self):
        # Monte Carlo against exact ordered-sequence probabilities, chi-square
        w = [1.0, 2.0, 3.0, 4.0]
        rng = np.random.default_rng(11)
        n = 40_000
        seqs = list(itertools.permutations(range(4), 2))
        counts = dict.fromkeys(seqs, 0)
        for _ in range(n):
            counts[tuple(weighted_sample_without_replacement(w, 2, rng))] += 1
        expected = np.array([sequence_probability(w, s) for s in seqs]) * n
        assert stats.chisquare([counts[s] for s in seqs], expected).pvalue > 0.001

    @given(st.lists(st.floats(0.1, 10), min_size=3, max_size=5), st.integers(0, 4), st.floats(1.1, 5), st.integers(1, 2))
    def test_inclusion_monotone_in_weight(self, w, i, factor, k):
        i %= len(w)
        k = min(k, len(w) - 1)
        before = inclusion_probabilities(w, k)[i]
        w2 = list(w)
        w2[i] *= factor
        assert inclusion_probabilities(w2, k)[i] >= before - 1e-12


class TestChoiceSet:
    @pytest.fixture
    def setup(self, small_synth):
        s = small_synth.situations[0]
        return s, small_synth.zones

    def test_shape_and_invariants(self, setup):
        s, zones = setup
        cs = build_choice_set(s, zones, SpeedProvider(), "mean", SamplingConfig(k=20), np.random.default_rng(0), 15.0)
        assert len(cs) == 21
        assert cs.zone_ids[0] == s.chosen_zone and cs.chosen.sum() == 1 and cs.chosen[0]
        assert len(set(cs.zone_ids.tolist())) == 21
        assert np.all(cs.q[1:] > 0)
        assert np.all(cs.offsets == 0)
        idx = [zones.index[z] for z in cs.zone_ids]
        assert np.allclose(cs.features[:, 1], zones.log_size[idx])
        assert np.allclose(cs.features[:, 0], zones.major_station[idx])

    def test_deterministic(self, setup):
        s, zones = setup
        cfg = SamplingConfig(k=10)
        a = build_choice_set(s, zones, SpeedProvider(), "max", cfg, np.random.default_rng(5), 15.0)
        b = build_choice_set(s, zones, SpeedProvider(), "max", cfg, np.random.default_rng(5), 15.0)
        assert np.array_equal(a.zone_ids, b.zone_ids) and np.array_equal(a.features, b.features)

    def test_exhaustive(self, small_synth):
        zones = small_synth.zones
        positive = [z.id for z in zones if z.restaurant_count > 0]
        if len(positive) < len(zones):
            pytest.skip("needs all-positive universe")
        s = small_synth.situations[1]
        cs = build_choice_set(s, zones, SpeedProvider(), "mean", SamplingConfig(k=len(zones) - 1),
                              np.random.default_rng(0), 20.0)
        assert sorted(cs.zone_ids.tolist()) == sorted(zones.ids.tolist())

    def test_single_positive_alternative(self):
        zones = make_zones([5, 0, 7, 0])
        ego = Member("e", "ego", (0.0, 0.0))
        clique = Clique("c", ego, (Member("a1", "alter", (1.0, 0.0), rel_length="ge5"),))
        s = make_situation("s", clique, 1)
        for seed in range(20):
            cs = build_choice_set(s, zones, SpeedProvider(), "mean", SamplingConfig(k=1),
                                  np.random.default_rng(seed), 10.0)
            assert cs.zone_ids.tolist() == [1, 3]

    def test_insufficient_positive(self):
        zones = make_zones([5, 0, 7, 0])
        clique = Clique("c", Member("e", "ego", (0.0, 0.0)), (Member("a1", "alter", (1.0, 0.0), rel_length="ge5"),))
        s = make_situation("s", clique, 1)
        with pytest.raises(InsufficientAlternativesError):
            build_choice_set(s, zones, SpeedProvider(), "mean", SamplingConfig(k=2), np.random.default_rng(0), 10.0)
        with pytest.raises(InsufficientAlternativesError):
            build_choice_set(s, zones, SpeedProvider(), "mean", SamplingConfig(k=4), np.random.default_rng(0), 10.0)

    def test_toy_universe_frequencies(self):
        counts = [100, 50, 200, 80, 120]
        zones = make_zones(counts, xy=[(0, 0), (1, 0), (2, 0), (0, 3), (1, 1)])
        clique = Clique("c", Member("e", "ego", (0.0, 0.0)), (Member("a1", "alter", (1.0, 0.0), rel_length="ge5"),))
        s = make_situation("s", clique, 1)
        cost = np.mean([SpeedProvider().times(p.origin, zones, Mode.WALK) for p in s.participants], axis=0)
        t_bar = 12.0
        w = sampling_weight(np.array(counts, float), cost, t_bar)
        expected = w[1:] / w[1:].sum()
        costs = np.tile(cost, (100_000, 1))
        data = sample_choice_data(costs, np.zeros(100_000, int), zones, SamplingConfig(k=1), t_bar=t_bar)
        freq = np.bincount(data.zone_ids[:, 1], minlength=6)[2:] / 100_000
        assert np.max(np.abs(freq - expected)) < 0.01

    def test_sample_choice_data_deterministic(self, small_synth):
        cfg = SamplingConfig(k=8, rng_seed=4)
        a = build_choice_sets(small_synth, SpeedProvider(), "median", cfg)
        b = build_choice_sets(small_synth, SpeedProvider(), "median", cfg)
        assert np.array_equal(a.zone_ids, b.zone_ids)
        c = build_choice_sets(small_synth, SpeedProvider(), "median", SamplingConfig(k=8, rng_seed=5))
        assert not np.array_equal(a.zone_ids, c.zone_ids)

    def test_k_too_large(self, small_synth):
        with pytest.raises(InsufficientAlternativesError):
            build_choice_sets(small_synth, SpeedProvider(), "mean", SamplingConfig(k=len(small_synth.zones)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplingConfig(k=0)
        with pytest.raises(ValueError):
            SamplingConfig(correction="bogus")
        assert not SamplingConfig().include_correction
        assert SamplingConfig(correction="naive").include_correction

    def test_export(self, tmp_path, small_synth):
        data = build_choice_sets(small_synth, SpeedProvider(), "mean", SamplingConfig(k=5))
        path = write_choice_sets(data, tmp_path / "sets.csv")
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == len(data) * 6
        assert list(rows[0]) == ["situation_id", "zone_id", "chosen", "q", "major_station", "ln_restaurants",
                                 "cost", "offset"]
        assert sum(int(r["chosen"]) for r in rows) == len(data)
        assert float(rows[7]["cost"]) == data.X[1, 1, 2]


def brute_force_log_inclusion(q, remainder):
    """ln P(every other member drawn in |S|-1 draws | member j chosen), by permutation sums."""
    q = np.asarray(q, float)
    out = []
    for j in range(len(q)):
        others = [i for i in range(len(q)) if i != j]
        pool = np.concatenate([q[others], [remainder]])
        total = 0.0
        for seq in itertools.permutations(range(len(others))):
            total += sequence_probability(pool, seq)
        out.append(math.log(total))
    return np.array(out)


class TestCorrections:
    @given(st.lists(st.floats(0.01, 50), min_size=2, max_size=5), st.floats(0.5, 500))
    def test_exact_matches_enumeration(self, q, remainder):
        assert np.allclose(exact_log_inclusion(q, remainder), brute_force_log_inclusion(q, remainder),
                           rtol=0, atol=1e-9)

    def test_exact_matches_quadrature(self):
        rng = np.random.default_rng(3)
        q = rng.uniform(1, 300, size=21)
        R = 4000.0
        got = exact_log_inclusion(q, R)
        for j in (0, 7, 20):
            others = np.delete(q, j) / R
            val, _ = integrate.quad(lambda s: math.exp(-s) * np.prod(-np.expm1(-others * s)), 0, np.inf,
                                    limit=400, epsabs=0, epsrel=1e-12)
            assert got[j] == pytest.approx(math.log(val), abs=1e-9)

    def test_whole_pool_drawn(self):
        assert np.array_equal(exact_log_inclusion([1.0, 2.0, 3.0], 0.0), np.zeros(3))

    def test_zero_weight_member(self):
        out = exact_log_inclusion([0.0, 2.0, 3.0], 5.0)
        assert np.all(np.isneginf(out[1:]))
        assert out[0] == pytest.approx(brute_force_log_inclusion([1e-300, 2.0, 3.0], 5.0)[0], abs=1e-9)
        assert np.all(np.isneginf(exact_log_inclusion([0.0, 0.0, 1.0], 5.0)))

    def test_naive(self):
        q = np.array([1.0, 3.0])
        assert np.allclose(correction_offsets(q, 10.0, "naive"), -np.log(q / 10.0))
        assert np.array_equal(correction_offsets(q, 10.0, "none"), np.zeros(2))
        with pytest.raises(ValueError):
            correction_offsets(q, 10.0, "other")
