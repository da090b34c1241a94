"""Zones, cliques and choice situations, with CSV ingestion and validation.

All coordinates are planar kilometres. Files may instead carry lon/lat
columns, which are projected with an equirectangular approximation about the
zone centroid.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0088

AGE_BANDS = ("<30", "30-39", "40-49", "50-59", "60-69", "70+")
GENDERS = ("F", "M")
REL_LENGTHS = ("lt5", "ge5")
DAYS = ("weekday", "weekend")
TIMES = ("noon", "evening", "night")

ZONE_FIELDS = ["id", "restaurant_count", "major_station", "x_km", "y_km", "area_ha"]
CLIQUE_FIELDS = [
    "clique_id", "member_id", "role", "home_x", "home_y",
    "age_band", "gender", "rel_length", "eat_out_freq",
]
SITUATION_FIELDS = [
    "situation_id", "clique_id", "kind", "chosen_zone", "participant_ids",
    "origin_overrides", "modes", "party_size", "day", "time",
]


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, row, message):
        self.path, self.row = path, row
        super().__init__(f"{path}: row {row}: {message}")


class DuplicateIdError(DataError):
    pass


class DanglingReferenceError(DataError):
    pass


class DatasetError(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            f"{len(self.violations)} invariant violation(s):\n  " + "\n  ".join(self.violations)
        )


class Mode(str, Enum):
    TRANSIT = "transit"
    BUS = "bus"
    CAR = "car"
    BIKE = "bike"
    WALK = "walk"


# fixed class order, also the predict tie-break order
MODE_ORDER = tuple(Mode)


class SituationKind(str, Enum):
    ACTUAL = "actual"
    ALTERNATIVE = "alt"


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection about a reference point."""

    lon0: float
    lat0: float

    def project(self, lon, lat):
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        x = (lon - self.lon0) * k * math.cos(math.radians(self.lat0))
        y = (lat - self.lat0) * k
        return x, y


@dataclass(frozen=True)
class Zone:
    id: int
    restaurant_count: int
    major_station: bool
    x: float
    y: float
    area: float | None = None

    def __post_init__(self):
        if self.restaurant_count < 0:
            raise DataError(f"zone {self.id}: negative restaurant count {self.restaurant_count}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"zone {self.id}: non-finite centroid")

    @property
    def centroid(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class ZoneSet:
    """Ordered universal choice set."""

    zones: tuple[Zone, ...]
    projection: Projection | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.zones:
            raise DataError("no zones")
        seen = set()
        for z in self.zones:
            if z.id in seen:
                raise DuplicateIdError(f"duplicate zone id {z.id}")
            seen.add(z.id)

    def __len__(self):
        return len(self.zones)

    def __iter__(self):
        return iter(self.zones)

    def __getitem__(self, i):
        return self.zones[i]

    def __contains__(self, zone_id):
        return zone_id in self.index

    @cached_property
    def index(self) -> dict[int, int]:
        return {z.id: i for i, z in enumerate(self.zones)}

    @cached_property
    def ids(self):
        return np.array([z.id for z in self.zones])

    @cached_property
    def xy(self):
        return np.array([[z.x, z.y] for z in self.zones], dtype=float)

    @cached_property
    def restaurant_counts(self):
        return np.array([z.restaurant_count for z in self.zones], dtype=float)

    @cached_property
    def major_station(self):
        return np.array([z.major_station for z in self.zones], dtype=float)

    @cached_property
    def log_size(self):
        # zero-count zones are never sampled; if one is chosen its size term is ln(1) = 0
        return np.log(np.maximum(self.restaurant_counts, 1.0))


@dataclass(frozen=True)
class Member:
    id: str
    role: str  # "ego" | "alter"
    home: tuple[float, float]
    age_band: str = "30-39"
    gender: str = "F"
    rel_length: str = ""  # "lt5" | "ge5" for alters, blank for the ego
    work: tuple[float, float] | None = None

    @property
    def is_senior(self):
        return self.age_band in ("60-69", "70+")


@dataclass(frozen=True)
class Clique:
    id: str
    ego: Member
    alters: tuple[Member, ...]
    eating_out_frequency: str = ""

    @property
    def members(self):
        return (self.ego, *self.alters)

    def member(self, member_id):
        for m in self.members:
            if m.id == member_id:
                return m
        raise DanglingReferenceError(f"clique {self.id}: unknown member {member_id!r}")

    @property
    def relationship_length_majority(self):
        """'ge5' when at least half the alters have known the ego five years or more."""
        if not self.alters:
            return "ge5"
        long = sum(a.rel_length == "ge5" for a in self.alters)
        return "ge5" if 2 * long >= len(self.alters) else "lt5"


@dataclass(frozen=True)
class Participant:
    member_id: str
    origin: tuple[float, float]
    mode: Mode | None = None
    observed_origin: bool = False


@dataclass(frozen=True)
class ChoiceSituation:
    id: str
    clique_id: str
    kind: SituationKind
    chosen_zone: int | None
    participants: tuple[Participant, ...]
    ego_id: str
    day: str = "weekend"
    time: str = "evening"

    @property
    def party_size(self):
        return len(self.participants)

    @property
    def ego_index(self):
        for i, p in enumerate(self.participants):
            if p.member_id == self.ego_id:
                return i
        raise DataError(f"situation {self.id}: ego {self.ego_id!r} not among participants")

    @property
    def weekend(self):
        return self.day == "weekend"

    @property
    def origins(self):
        return np.array([p.origin for p in self.participants], dtype=float)


@dataclass(frozen=True)
class SituationSet:
    situations: tuple[ChoiceSituation, ...]

    def __post_init__(self):
        if not self.situations:
            raise DataError("no choice situations")

    def __len__(self):
        return len(self.situations)

    def __iter__(self):
        return iter(self.situations)

    def __getitem__(self, i):
        return self.situations[i]


@dataclass(frozen=True)
class Dataset:
    zones: ZoneSet
    cliques: tuple[Clique, ...]
    situations: SituationSet

    @cached_property
    def clique_index(self) -> dict[str, Clique]:
        return {c.id: c for c in self.cliques}

    def clique_of(self, situation):
        return self.clique_index[situation.clique_id]

    def subset(self, indices):
        """Dataset restricted to (possibly repeated) situation positions."""
        return Dataset(self.zones, self.cliques, SituationSet(tuple(self.situations[i] for i in indices)))

    @cached_property
    def chosen_index(self):
        idx = self.zones.index
        return np.array([idx[s.chosen_zone] for s in self.situations], dtype=int)


# ---------------------------------------------------------------------------
# ingestion


def _read_rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return path, [], []
        rows = list(reader)
        return path, list(reader.fieldnames), rows


def _float(path, row, value, name):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ParseError(path, row, f"{name}: cannot parse {value!r} as a number") from None
    if not math.isfinite(x):
        raise ParseError(path, row, f"{name}: non-finite value {value!r}")
    return x


def _int(path, row, value, name):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ParseError(path, row, f"{name}: cannot parse {value!r} as an integer") from None


def load_zones(path) -> ZoneSet:
    """Read ``zones.csv``. Row numbers in errors count the header as row 1."""
    path, header, rows = _read_rows(path)
    if not rows:
        raise DataError("no zones")
    lonlat = "x_km" not in header and {"lon", "lat"} <= set(header)
    projection = None
    if lonlat:
        lons = [_float(path, i + 2, r["lon"], "lon") for i, r in enumerate(rows)]
        lats = [_float(path, i + 2, r["lat"], "lat") for i, r in enumerate(rows)]
        projection = Projection(float(np.mean(lons)), float(np.mean(lats)))
    zones = []
    seen = set()
    for i, r in enumerate(rows):
        line = i + 2
        zid = _int(path, line, r.get("id"), "id")
        if zid in seen:
            raise DuplicateIdError(f"{path}: row {line}: duplicate zone id {zid}")
        seen.add(zid)
        count = _int(path, line, r.get("restaurant_count"), "restaurant_count")
        if count < 0:
            raise ParseError(path, line, f"negative restaurant_count {count}")
        major = r.get("major_station", "").strip()
        if major not in ("0", "1"):
            raise ParseError(path, line, f"major_station must be 0 or 1, got {major!r}")
        if lonlat:
            x, y = projection.project(lons[i], lats[i])
        else:
            x = _float(path, line, r.get("x_km"), "x_km")
            y = _float(path, line, r.get("y_km"), "y_km")
        area = r.get("area_ha", "")
        area = _float(path, line, area, "area_ha") if area not in ("", None) else None
        zones.append(Zone(zid, count, major == "1", x, y, area))
    return ZoneSet(tuple(zones), projection)


def _coords(path, line, r, prefix, projection):
    if f"{prefix}_x" in r and r.get(f"{prefix}_x") not in ("", None):
        return (_float(path, line, r[f"{prefix}_x"], f"{prefix}_x"),
                _float(path, line, r[f"{prefix}_y"], f"{prefix}_y"))
    if r.get(f"{prefix}_lon") not in ("", None):
        if projection is None:
            raise ParseError(path, line, "lon/lat coordinates need zones given in lon/lat")
        return projection.project(_float(path, line, r[f"{prefix}_lon"], f"{prefix}_lon"),
                                  _float(path, line, r[f"{prefix}_lat"], f"{prefix}_lat"))
    return None


def load_cliques(path, projection=None) -> tuple[Clique, ...]:
    path, _, rows = _read_rows(path)
    if not rows:
        raise DataError("no cliques")
    egos, alters, freq, order = {}, {}, {}, []
    for i, r in enumerate(rows):
        line = i + 2
        cid, mid, role = r.get("clique_id", ""), r.get("member_id", ""), r.get("role", "")
        if not cid or not mid:
            raise ParseError(path, line, "clique_id and member_id are required")
        if role not in ("ego", "alter"):
            raise ParseError(path, line, f"role must be ego or alter, got {role!r}")
        home = _coords(path, line, r, "home", projection)
        if home is None:
            raise ParseError(path, line, "missing home coordinates")
        work = _coords(path, line, r, "work", projection)
        age, gender = r.get("age_band", ""), r.get("gender", "")
        if age not in AGE_BANDS:
            raise ParseError(path, line, f"unknown age_band {age!r}")
        if gender not in GENDERS:
            raise ParseError(path, line, f"unknown gender {gender!r}")
        rel = r.get("rel_length", "") or ""
        if role == "alter" and rel not in REL_LENGTHS:
            raise ParseError(path, line, f"alter rel_length must be lt5 or ge5, got {rel!r}")
        m = Member(mid, role, home, age, gender, rel if role == "alter" else "", work)
        if cid not in egos and cid not in alters:
            order.append(cid)
        known = [x.id for x in alters.get(cid, [])] + ([egos[cid].id] if cid in egos else [])
        if mid in known:
            raise DuplicateIdError(f"{path}: row {line}: duplicate member {mid!r} in clique {cid}")
        if role == "ego":
            if cid in egos:
                raise ParseError(path, line, f"clique {cid} has more than one ego")
            egos[cid] = m
        else:
            alters.setdefault(cid, []).append(m)
        if r.get("eat_out_freq"):
            freq[cid] = r["eat_out_freq"]
    out = []
    for cid in order:
        if cid not in egos:
            raise DataError(f"{path}: clique {cid} has no ego")
        out.append(Clique(cid, egos[cid], tuple(alters.get(cid, ())), freq.get(cid, "")))
    return tuple(out)


def _split(value):
    return [v for v in (value or "").split(";") if v != ""]


def load_situations(path, zones: ZoneSet, cliques) -> SituationSet:
    """Read ``situations.csv`` and resolve origins under the origin policy.

    Actual events take the ego's recorded origin (mandatory override) and the
    alters' homes; alternative places take everybody's home.
    """
    path, _, rows = _read_rows(path)
    if not rows:
        raise DataError("no choice situations")
    index = {c.id: c for c in cliques}
    projection = zones.projection
    out, seen = [], set()
    for i, r in enumerate(rows):
        line = i + 2
        sid = r.get("situation_id", "")
        if not sid:
            raise ParseError(path, line, "missing situation_id")
        if sid in seen:
            raise DuplicateIdError(f"{path}: row {line}: duplicate situation id {sid!r}")
        seen.add(sid)
        clique = index.get(r.get("clique_id", ""))
        if clique is None:
            raise DanglingReferenceError(f"{path}: row {line}: unknown clique {r.get('clique_id')!r}")
        try:
            kind = SituationKind(r.get("kind", ""))
        except ValueError:
            raise ParseError(path, line, f"kind must be actual or alt, got {r.get('kind')!r}") from None
        chosen = _int(path, line, r.get("chosen_zone"), "chosen_zone")
        if chosen not in zones:
            raise DanglingReferenceError(f"{path}: row {line}: unknown zone {chosen}")
        pids = _split(r.get("participant_ids"))
        if len(set(pids)) != len(pids):
            raise ParseError(path, line, "repeated participant id")
        members = {}
        for pid in pids:
            try:
                members[pid] = clique.member(pid)
            except DanglingReferenceError:
                raise DanglingReferenceError(
                    f"{path}: row {line}: participant {pid!r} not in clique {clique.id}") from None
        if clique.ego.id not in members:
            raise ParseError(path, line, "ego must participate")
        overrides = {}
        for item in _split(r.get("origin_overrides")):
            parts = item.split(":")
            if len(parts) == 3:
                xy = (_float(path, line, parts[1], "origin x"), _float(path, line, parts[2], "origin y"))
            elif len(parts) == 4 and parts[1] == "ll":
                if projection is None:
                    raise ParseError(path, line, "lon/lat origin needs zones given in lon/lat")
                xy = projection.project(_float(path, line, parts[2], "origin lon"),
                                        _float(path, line, parts[3], "origin lat"))
            else:
                raise ParseError(path, line, f"bad origin override {item!r}")
            if parts[0] not in members:
                raise DanglingReferenceError(f"{path}: row {line}: override for non-participant {parts[0]!r}")
            overrides[parts[0]] = xy
        if kind is SituationKind.ACTUAL:
            if clique.ego.id not in overrides:
                raise ParseError(path, line, "actual event requires the ego's observed origin")
            extra = set(overrides) - {clique.ego.id}
        else:
            extra = set(overrides)
        if extra:
            raise ParseError(path, line, f"origin policy: overrides not allowed for {sorted(extra)}")
        modes = {}
        for item in _split(r.get("modes")):
            mid, _, mode = item.partition(":")
            if mid not in members:
                raise DanglingReferenceError(f"{path}: row {line}: mode for non-participant {mid!r}")
            try:
                modes[mid] = Mode(mode)
            except ValueError:
                raise ParseError(path, line, f"unknown mode {mode!r}") from None
        if r.get("party_size") not in (None, ""):
            ps = _int(path, line, r["party_size"], "party_size")
            if ps != len(pids):
                raise ParseError(path, line, f"party_size {ps} does not match {len(pids)} participants")
        day, time = r.get("day", ""), r.get("time", "")
        if day not in DAYS:
            raise ParseError(path, line, f"unknown day {day!r}")
        if time not in TIMES:
            raise ParseError(path, line, f"unknown time {time!r}")
        parts = tuple(
            Participant(pid, overrides.get(pid, members[pid].home), modes.get(pid), pid in overrides)
            for pid in pids
        )
        out.append(ChoiceSituation(sid, clique.id, kind, chosen, parts, clique.ego.id, day, time))
    return SituationSet(tuple(out))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    zones = load_zones(d / "zones.csv")
    cliques = load_cliques(d / "cliques.csv", zones.projection)
    situations = load_situations(d / "situations.csv", zones, cliques)
    return Dataset(zones, cliques, situations)


# ---------------------------------------------------------------------------
# writing


def _fmt(x):
    return repr(float(x))


def _write(path, fields, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def write_zones(zones: ZoneSet, path):
    rows = [
        {"id": z.id, "restaurant_count": z.restaurant_count, "major_station": int(z.major_station),
         "x_km": _fmt(z.x), "y_km": _fmt(z.y), "area_ha": "" if z.area is None else _fmt(z.area)}
        for z in zones
    ]
    return _write(path, ZONE_FIELDS, rows)


def write_cliques(cliques, path):
    rows = []
    for c in cliques:
        for m in c.members:
            rows.append({
                "clique_id": c.id, "member_id": m.id, "role": m.role,
                "home_x": _fmt(m.home[0]), "home_y": _fmt(m.home[1]),
                "age_band": m.age_band, "gender": m.gender, "rel_length": m.rel_length,
                "eat_out_freq": c.eating_out_frequency if m.role == "ego" else "",
            })
    fields = list(CLIQUE_FIELDS)
    if any(m.work is not None for c in cliques for m in c.members):
        fields += ["work_x", "work_y"]
        for row, m in zip(rows, (m for c in cliques for m in c.members)):
            row["work_x"] = "" if m.work is None else _fmt(m.work[0])
            row["work_y"] = "" if m.work is None else _fmt(m.work[1])
    return _write(path, fields, rows)


def write_situations(situations, path):
    rows = []
    for s in situations:
        if s.chosen_zone is None:
            raise DataError(f"situation {s.id} has no chosen zone")
        rows.append({
            "situation_id": s.id, "clique_id": s.clique_id, "kind": s.kind.value,
            "chosen_zone": s.chosen_zone,
            "participant_ids": ";".join(p.member_id for p in s.participants),
            "origin_overrides": ";".join(
                f"{p.member_id}:{_fmt(p.origin[0])}:{_fmt(p.origin[1])}"
                for p in s.participants if p.observed_origin),
            "modes": ";".join(f"{p.member_id}:{p.mode.value}" for p in s.participants if p.mode),
            "party_size": s.party_size, "day": s.day, "time": s.time,
        })
    return _write(path, SITUATION_FIELDS, rows)


def write_dataset(dataset: Dataset, directory):
    d = Path(directory)
    return [
        write_zones(dataset.zones, d / "zones.csv"),
        write_cliques(dataset.cliques, d / "cliques.csv"),
        write_situations(dataset.situations, d / "situations.csv"),
    ]


# ---------------------------------------------------------------------------
# validation


@dataclass
class DatasetReport:
    n_zones: int
    n_major_station: int
    n_cliques: int
    n_situations: int
    kind_counts: dict
    party_size_counts: dict
    violations: list

    @property
    def ok(self):
        return not self.violations

    @property
    def party_size_shares(self):
        n = sum(self.party_size_counts.values())
        return {k: v / n for k, v in sorted(self.party_size_counts.items())}

    def to_dict(self):
        return {
            "n_zones": self.n_zones,
            "n_major_station": self.n_major_station,
            "n_cliques": self.n_cliques,
            "n_situations": self.n_situations,
            "kind_counts": dict(sorted(self.kind_counts.items())),
            "party_size_counts": {str(k): v for k, v in sorted(self.party_size_counts.items())},
            "violations": list(self.violations),
        }


def validate_dataset(zones: ZoneSet, cliques, situations, strict=True) -> DatasetReport:
    """Count summary plus every invariant breach found.

    With ``strict`` (the default) any violation raises :class:`DatasetError`
    listing all of them; otherwise the report carries them.
    """
    violations = []
    index = {}
    for c in cliques:
        if c.id in index:
            violations.append(f"duplicate clique id {c.id}")
        index[c.id] = c
    seen = set()
    for s in situations:
        where = f"situation {s.id}"
        if s.id in seen:
            violations.append(f"{where}: duplicate id")
        seen.add(s.id)
        if s.chosen_zone is None or s.chosen_zone not in zones:
            violations.append(f"{where}: chosen zone {s.chosen_zone} not in zone set")
        c = index.get(s.clique_id)
        if c is None:
            violations.append(f"{where}: unknown clique {s.clique_id}")
            continue
        if not c.alters:
            violations.append(f"{where}: clique {c.id} has no alters for a joint situation")
        if s.party_size < 2:
            violations.append(f"{where}: party size {s.party_size} < 2")
        ids = [p.member_id for p in s.participants]
        if s.ego_id != c.ego.id or c.ego.id not in ids:
            violations.append(f"{where}: ego {c.ego.id} missing from participants")
        members = {m.id: m for m in c.members}
        for p in s.participants:
            m = members.get(p.member_id)
            if m is None:
                violations.append(f"{where}: participant {p.member_id} not in clique {c.id}")
                continue
            if not all(math.isfinite(v) for v in p.origin):
                violations.append(f"{where}: non-finite origin for {p.member_id}")
            is_ego = p.member_id == c.ego.id
            if s.kind is SituationKind.ACTUAL and is_ego:
                if not p.observed_origin:
                    violations.append(f"{where}: actual event without the ego's observed origin")
            elif p.observed_origin or tuple(p.origin) != tuple(m.home):
                violations.append(f"{where}: origin of {p.member_id} is not their home")
    kinds = Counter(s.kind.value for s in situations)
    sizes = Counter(s.party_size for s in situations)
    report = DatasetReport(
        n_zones=len(zones),
        n_major_station=int(sum(z.major_station for z in zones)),
        n_cliques=len(index),
        n_situations=len(situations),
        kind_counts=dict(kinds),
        party_size_counts=dict(sizes),
        violations=violations,
    )
    if strict and violations:
        raise DatasetError(violations)
    return report
