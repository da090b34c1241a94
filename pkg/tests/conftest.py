import numpy as np
import pytest
from hypothesis import settings

from groupdest.domain import (ChoiceSituation, Clique, Dataset, Member, Mode, Participant, SituationKind,
                              SituationSet, Zone, ZoneSet)
from groupdest.sampling import ChoiceData
from groupdest.synth import ScenarioConfig, synthetic_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_zones(counts, xy=None, major=None):
    n = len(counts)
    xy = xy if xy is not None else [(float(i), 0.0) for i in range(n)]
    major = major if major is not None else [False] * n
    return ZoneSet(tuple(Zone(i + 1, int(c), bool(m), float(p[0]), float(p[1]))
                         for i, (c, p, m) in enumerate(zip(counts, xy, major))))


def make_situation(sid, clique, chosen, origins=None, modes=None, kind=SituationKind.ALTERNATIVE,
                   day="weekend", time="evening"):
    origins = origins or {}
    modes = modes or {}
    parts = tuple(Participant(m.id, origins.get(m.id, m.home), modes.get(m.id, Mode.WALK), m.id in origins)
                  for m in clique.members)
    return ChoiceSituation(sid, clique.id, kind, chosen, parts, clique.ego.id, day, time)


def random_choice_data(rng, n, j, k=3, scale=1.0, offsets=False):
    X = rng.normal(0.0, scale, size=(n, j, k))
    off = rng.normal(0.0, 1.0, size=(n, j)) if offsets else np.zeros((n, j))
    ids = np.tile(np.arange(1, j + 1), (n, 1))
    return ChoiceData(tuple(str(i) for i in range(n)), ids, X, np.ones((n, j)), off, 10.0)


@pytest.fixture
def tiny_dataset():
    zones = make_zones([100, 200, 50, 0], xy=[(0, 0), (1, 0), (0, 2), (3, 3)], major=[True, False, False, False])
    ego = Member("e", "ego", (0.0, 0.0), "40-49", "F")
    alter = Member("a1", "alter", (1.0, 1.0), "60-69", "M", "ge5")
    clique = Clique("c1", ego, (alter,))
    s = make_situation("s1", clique, 2, origins={"e": (0.5, 0.0)}, kind=SituationKind.ACTUAL)
    return Dataset(zones, (clique,), SituationSet((s,)))


@pytest.fixture(scope="session")
def small_synth():
    return synthetic_dataset(ScenarioConfig(n_zones=40, n_cliques=30, n_situations=80, rng_seed=3))


@pytest.fixture(scope="session")
def paper_synth():
    return synthetic_dataset(ScenarioConfig(rng_seed=0))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
