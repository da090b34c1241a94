import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_situation, make_zones
from groupdest.domain import (Clique, DanglingReferenceError, DataError, DatasetError, DuplicateIdError, Member,
                              ParseError, SituationKind, SituationSet, Zone, ZoneSet, load_cliques, load_dataset,
                              load_situations, load_zones, validate_dataset, write_cliques, write_dataset,
                              write_situations, write_zones)

ZONE_HEADER = "id,restaurant_count,major_station,x_km,y_km,area_ha\n"
CLIQUE_CSV = (
    "clique_id,member_id,role,home_x,home_y,age_band,gender,rel_length\n"
    "c1,e,ego,0,0,40-49,F,\n"
    "c1,a1,alter,1,1,60-69,M,ge5\n"
)
SITUATION_HEADER = "situation_id,clique_id,kind,chosen_zone,participant_ids,origin_overrides,day,time\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


@pytest.fixture
def zones_and_cliques(tmp_path):
    zones = load_zones(write(tmp_path, "zones.csv", ZONE_HEADER + "1,10,1,0,0,\n2,20,0,1,0,5.5\n"))
    cliques = load_cliques(write(tmp_path, "cliques.csv", CLIQUE_CSV))
    return zones, cliques


class TestZones:
    def test_synthetic_universe_has_21_major_zones(self, tmp_path, paper_synth):
        zones = load_zones(write_zones(paper_synth.zones, tmp_path / "zones.csv"))
        assert len(zones) == 119
        assert sum(z.major_station for z in zones) == 21

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="no zones"):
            load_zones(write(tmp_path, "z.csv", ""))
        with pytest.raises(DataError, match="no zones"):
            load_zones(write(tmp_path, "z.csv", ZONE_HEADER))

    def test_negative_count_names_row(self, tmp_path):
        with pytest.raises(ParseError, match="row 3") as e:
            load_zones(write(tmp_path, "z.csv", ZONE_HEADER + "1,10,0,0,0,\n2,-1,0,1,1,\n"))
        assert e.value.row == 3

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DuplicateIdError):
            load_zones(write(tmp_path, "z.csv", ZONE_HEADER + "1,10,0,0,0,\n1,5,0,1,1,\n"))

    def test_unparseable_number(self, tmp_path):
        with pytest.raises(ParseError, match="x_km"):
            load_zones(write(tmp_path, "z.csv", ZONE_HEADER + "1,10,0,abc,0,\n"))

    def test_lonlat_projection(self, tmp_path):
        text = "id,restaurant_count,major_station,lon,lat\n1,10,0,139.7,35.6\n2,10,0,139.7,35.61\n"
        zones = load_zones(write(tmp_path, "z.csv", text))
        dy = zones[1].y - zones[0].y
        assert dy == pytest.approx(0.01 * math.pi / 180 * 6371.0088, rel=1e-9)
        assert zones[0].x == pytest.approx(0.0, abs=1e-9)

    def test_zone_invariants(self):
        with pytest.raises(DataError):
            Zone(1, -1, False, 0.0, 0.0)
        with pytest.raises(DataError):
            Zone(1, 1, False, float("nan"), 0.0)
        with pytest.raises(DataError):
            ZoneSet(())


class TestSituations:
    def test_synthetic_261_situations(self, tmp_path, paper_synth):
        write_dataset(paper_synth, tmp_path)
        ds = load_dataset(tmp_path)
        assert len(ds.situations) == 261

    def test_unknown_zone(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        p = write(tmp_path, "s.csv", SITUATION_HEADER + "s1,c1,alt,9,e;a1,,weekend,noon\n")
        with pytest.raises(DanglingReferenceError, match="unknown zone 9"):
            load_situations(p, zones, cliques)

    def test_unknown_clique(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        p = write(tmp_path, "s.csv", SITUATION_HEADER + "s1,c9,alt,1,e;a1,,weekend,noon\n")
        with pytest.raises(DanglingReferenceError):
            load_situations(p, zones, cliques)

    def test_actual_event_requires_ego_origin(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        p = write(tmp_path, "s.csv", SITUATION_HEADER + "s1,c1,actual,1,e;a1,,weekend,noon\n")
        with pytest.raises(ParseError, match="observed origin"):
            load_situations(p, zones, cliques)

    def test_alternative_rejects_overrides(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        p = write(tmp_path, "s.csv", SITUATION_HEADER + "s1,c1,alt,1,e;a1,e:0.5:0.5,weekend,noon\n")
        with pytest.raises(ParseError, match="origin policy"):
            load_situations(p, zones, cliques)

    def test_actual_event_rejects_alter_override(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        p = write(tmp_path, "s.csv", SITUATION_HEADER + "s1,c1,actual,1,e;a1,e:0:1;a1:2:2,weekend,noon\n")
        with pytest.raises(ParseError, match="origin policy"):
            load_situations(p, zones, cliques)

    def test_origin_policy_applied(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        text = SITUATION_HEADER + "s1,c1,actual,1,e;a1,e:0.5:0.25,weekend,noon\ns2,c1,alt,2,e;a1,,weekday,night\n"
        s1, s2 = load_situations(write(tmp_path, "s.csv", text), zones, cliques)
        assert s1.participants[0].origin == (0.5, 0.25) and s1.participants[0].observed_origin
        assert s1.participants[1].origin == (1.0, 1.0)
        assert all(p.origin == cliques[0].member(p.member_id).home for p in s2.participants)

    def test_party_size_mismatch(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        text = ("situation_id,clique_id,kind,chosen_zone,participant_ids,origin_overrides,party_size,day,time\n"
                "s1,c1,alt,1,e;a1,,3,weekend,noon\n")
        with pytest.raises(ParseError, match="party_size"):
            load_situations(write(tmp_path, "s.csv", text), zones, cliques)

    def test_duplicate_situation(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        text = SITUATION_HEADER + "s1,c1,alt,1,e;a1,,weekend,noon\ns1,c1,alt,2,e;a1,,weekend,noon\n"
        with pytest.raises(DuplicateIdError):
            load_situations(write(tmp_path, "s.csv", text), zones, cliques)

    def test_bad_mode(self, tmp_path, zones_and_cliques):
        zones, cliques = zones_and_cliques
        text = ("situation_id,clique_id,kind,chosen_zone,participant_ids,origin_overrides,modes,day,time\n"
                "s1,c1,alt,1,e;a1,,e:rocket,weekend,noon\n")
        with pytest.raises(ParseError, match="mode"):
            load_situations(write(tmp_path, "s.csv", text), zones, cliques)

    def test_lonlat_origin_override(self, tmp_path):
        zones = load_zones(write(tmp_path, "z.csv", "id,restaurant_count,major_station,lon,lat\n1,1,0,139.7,35.6\n"
                                 "2,1,0,139.8,35.7\n"))
        cliques = load_cliques(write(tmp_path, "c.csv", CLIQUE_CSV))
        text = SITUATION_HEADER + "s1,c1,actual,1,e;a1,e:ll:139.75:35.65,weekend,noon\n"
        (s,) = load_situations(write(tmp_path, "s.csv", text), zones, cliques)
        assert s.participants[0].origin == pytest.approx((0.0, 0.0), abs=1e-9)


class TestValidation:
    def test_paper_shaped_party_share(self, paper_synth):
        rep = validate_dataset(paper_synth.zones, paper_synth.cliques, paper_synth.situations)
        assert rep.ok
        assert rep.party_size_shares[2] == pytest.approx(0.6732 / 1.0197, abs=0.05)
        assert rep.kind_counts == {"actual": 101, "alt": 160}

    def test_single_clique_single_situation(self, tiny_dataset):
        rep = validate_dataset(tiny_dataset.zones, tiny_dataset.cliques, tiny_dataset.situations)
        assert rep.ok and rep.n_situations == 1 and rep.n_cliques == 1

    def test_zero_alters_listed(self):
        zones = make_zones([1, 1])
        loner = Clique("c1", Member("e", "ego", (0.0, 0.0)), ())
        s = make_situation("s1", loner, 1)
        rep = validate_dataset(zones, (loner,), SituationSet((s,)), strict=False)
        assert any("no alters" in v for v in rep.violations)
        with pytest.raises(DatasetError) as e:
            validate_dataset(zones, (loner,), SituationSet((s,)))
        assert any("party size" in v for v in e.value.violations)

    def test_origin_policy_violation(self, tiny_dataset):
        import dataclasses
        s = tiny_dataset.situations[0]
        moved = dataclasses.replace(s.participants[1], origin=(9.0, 9.0))
        bad = dataclasses.replace(s, participants=(s.participants[0], moved))
        rep = validate_dataset(tiny_dataset.zones, tiny_dataset.cliques, SituationSet((bad,)), strict=False)
        assert any("not their home" in v for v in rep.violations)

    def test_synthetic_origin_policy(self, paper_synth):
        for s in paper_synth.situations:
            c = paper_synth.clique_of(s)
            for p in s.participants:
                if s.kind is SituationKind.ACTUAL and p.member_id == c.ego.id:
                    assert p.observed_origin
                else:
                    assert p.origin == c.member(p.member_id).home


finite = st.floats(-50, 50, allow_nan=False)


@st.composite
def zone_sets(draw):
    n = draw(st.integers(1, 12))
    ids = draw(st.lists(st.integers(1, 10_000), min_size=n, max_size=n, unique=True))
    zones = tuple(Zone(i, draw(st.integers(0, 5000)), draw(st.booleans()), draw(finite), draw(finite),
                       draw(st.none() | st.floats(0, 1e4, allow_nan=False)))
                  for i in ids)
    return ZoneSet(zones)


@given(zone_sets())
def test_zone_round_trip(tmp_path_factory, zones):
    path = tmp_path_factory.mktemp("rt") / "zones.csv"
    assert load_zones(write_zones(zones, path)) == zones


def test_dataset_round_trip(tmp_path, small_synth):
    write_dataset(small_synth, tmp_path)
    assert load_dataset(tmp_path) == small_synth


def test_clique_round_trip_with_work(tmp_path):
    c = Clique("c1", Member("e", "ego", (0.5, 1.5), "<30", "M", work=(2.0, 3.0)),
               (Member("a1", "alter", (1.0, 1.0), "70+", "F", "lt5"),), "weekly")
    assert load_cliques(write_cliques((c,), tmp_path / "c.csv")) == (c,)


def test_situation_writer_needs_chosen_zone(tmp_path, tiny_dataset):
    import dataclasses
    s = dataclasses.replace(tiny_dataset.situations[0], chosen_zone=None)
    with pytest.raises(DataError):
        write_situations((s,), tmp_path / "s.csv")
