"""Domain types, case-file ingestion and network matrices.

A case is a JSON document (see ``README.md`` for the schema).  Everything is
loaded into frozen dataclasses; derived quantities such as link capacities and
incidence matrices are computed once and cached on the instance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

PROB_TOL = 1e-9
WIND_MEAN_TOL = 1e-6


@dataclass(frozen=True)
class Node:
    id: str
    area: str
    demand: float = 0.0


@dataclass(frozen=True)
class AcLine:
    id: str
    from_node: str
    to_node: str
    capacity: float
    susceptance: float
    tie_link: str | None = None


@dataclass(frozen=True)
class InterAreaLink:
    id: str
    sending_area: str
    receiving_area: str
    lines: tuple[str, ...]
    capacity: float  # sum of member tie-line capacities

    def incidence(self, area: str) -> int:
        if area == self.receiving_area:
            return 1
        if area == self.sending_area:
            return -1
        return 0

    def touches(self, area: str) -> bool:
        return area in (self.sending_area, self.receiving_area)


@dataclass(frozen=True)
class Generator:
    id: str
    node: str
    cost: float
    capacity: float
    reserve_up_cost: float = 0.0
    reserve_down_cost: float = 0.0
    reserve_up: float = 0.0
    reserve_down: float = 0.0
    flexible: bool = True


@dataclass(frozen=True)
class WindFarm:
    id: str
    node: str
    capacity: float
    expected: float


@dataclass(frozen=True)
class Scenario:
    id: str
    probability: float
    wind: Mapping[str, float]

    def __hash__(self):
        return hash((self.id, self.probability, tuple(sorted(self.wind.items()))))


@dataclass(frozen=True)
class ReserveRequirements:
    up: Mapping[str, float]
    down: Mapping[str, float]

    def __post_init__(self):
        for side in (self.up, self.down):
            for a, v in side.items():
                if v < 0:
                    raise ValidationError(f"reserve requirement of {a} is negative ({v})", "reserve_requirements")


@dataclass(frozen=True, eq=False)
class CaseData:
    """A complete market instance.  Immutable after :func:`load_case`."""

    name: str
    areas: tuple[str, ...]
    nodes: tuple[Node, ...]
    lines: tuple[AcLine, ...]
    links: tuple[InterAreaLink, ...]
    generators: tuple[Generator, ...]
    wind_farms: tuple[WindFarm, ...]
    scenarios: tuple[Scenario, ...]
    shed_cost: float
    existing_chi: Mapping[str, float]
    reserve_requirements: ReserveRequirements | None = None
    description: str = ""

    # -- lookups ---------------------------------------------------------------
    @cached_property
    def node_area(self) -> dict[str, str]:
        return {n.id: n.area for n in self.nodes}

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: k for k, n in enumerate(self.nodes)}

    @cached_property
    def link_by_id(self) -> dict[str, InterAreaLink]:
        return {e.id: e for e in self.links}

    @cached_property
    def line_by_id(self) -> dict[str, AcLine]:
        return {ln.id: ln for ln in self.lines}

    @property
    def reference_node(self) -> str:
        return self.nodes[0].id

    def generator_area(self, g: Generator) -> str:
        return self.node_area[g.node]

    def wind_area(self, j: WindFarm) -> str:
        return self.node_area[j.node]

    def line_areas(self, ln: AcLine) -> tuple[str, str]:
        return self.node_area[ln.from_node], self.node_area[ln.to_node]

    def line_chi(self, chi: Mapping[str, float]) -> dict[str, float]:
        """Per-line share of capacity withheld from the day-ahead market."""
        return {ln.id: (float(chi[ln.tie_link]) if ln.tie_link else 0.0) for ln in self.lines}

    def chi_vector(self, values: Sequence[float] | Mapping[str, float] | None = None) -> dict[str, float]:
        """Normalize ``values`` (ordered by link id or keyed) to a chi mapping."""
        if values is None:
            return dict(self.existing_chi)
        if isinstance(values, Mapping):
            out = dict(self.existing_chi)
            out.update({k: float(v) for k, v in values.items()})
        else:
            ids = self.link_ids_sorted
            if len(values) != len(ids):
                raise ValidationError(f"expected {len(ids)} chi values, got {len(values)}", "chi")
            out = dict(zip(ids, map(float, values)))
        for k, v in out.items():
            if k not in self.link_by_id:
                raise ValidationError(f"unknown link {k!r} in chi", "chi")
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"chi[{k}] = {v} outside [0, 1]", "chi")
        return out

    @cached_property
    def link_ids_sorted(self) -> list[str]:
        return [e.id for e in self.links]

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.probability for s in self.scenarios])

    def scenario(self, sid: str) -> Scenario:
        for s in self.scenarios:
            if s.id == sid:
                return s
        raise ValidationError(f"unknown scenario {sid!r}", "scenario")

    @cached_property
    def network(self) -> "NetworkMatrices":
        return build_incidence(self)

    def requirements(self) -> ReserveRequirements:
        return self.reserve_requirements or compute_reserve_requirements(self)


@dataclass(frozen=True, eq=False)
class NetworkMatrices:
    line_node: np.ndarray  # A, lines x nodes, +1 at from-node, -1 at to-node
    link_area: np.ndarray  # H, links x areas
    node_ids: tuple[str, ...]
    line_ids: tuple[str, ...]
    link_ids: tuple[str, ...]
    area_ids: tuple[str, ...]
    link_capacity: np.ndarray = field(repr=False)


def build_incidence(case: CaseData) -> NetworkMatrices:
    A = np.zeros((len(case.lines), len(case.nodes)))
    for r, ln in enumerate(case.lines):
        A[r, case.node_index[ln.from_node]] = 1.0
        A[r, case.node_index[ln.to_node]] = -1.0
    aidx = {a: k for k, a in enumerate(case.areas)}
    H = np.zeros((len(case.links), len(case.areas)))
    for r, e in enumerate(case.links):
        H[r, aidx[e.receiving_area]] = 1.0
        H[r, aidx[e.sending_area]] = -1.0
    for arr in (A, H):
        arr.flags.writeable = False
    return NetworkMatrices(
        A,
        H,
        tuple(n.id for n in case.nodes),
        tuple(ln.id for ln in case.lines),
        tuple(e.id for e in case.links),
        tuple(case.areas),
        np.array([e.capacity for e in case.links]),
    )


def compute_reserve_requirements(case: CaseData) -> ReserveRequirements:
    """Size area reserves to cover the extreme wind deviations domestically.

    Upward requirement is expected area wind minus the lowest scenario total,
    downward is the highest scenario total minus the expected total.
    """
    up: dict[str, float] = {}
    down: dict[str, float] = {}
    for a in case.areas:
        farms = [j for j in case.wind_farms if case.wind_area(j) == a]
        if not farms:
            up[a] = down[a] = 0.0
            continue
        expected = sum(j.expected for j in farms)
        totals = [sum(s.wind[j.id] for j in farms) for s in case.scenarios]
        up[a] = max(0.0, expected - min(totals))
        down[a] = max(0.0, max(totals) - expected)
    return ReserveRequirements(up, down)


# -- ingestion -------------------------------------------------------------------


def _req(d: Mapping, key: str, where: str):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ValidationError(f"{where}: missing field {key!r}", f"{where}.{key}") from None


def _num(d: Mapping, key: str, where: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ValidationError(f"{where}: missing field {key!r}", f"{where}.{key}")
        return float(default)
    try:
        v = float(d[key])
    except (TypeError, ValueError):
        raise ValidationError(f"{where}.{key} is not a number: {d[key]!r}", f"{where}.{key}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{where}.{key} is not finite", f"{where}.{key}")
    return v


def _read_scenario_csv(path: Path, farms: Iterable[str]) -> list[dict]:
    farms = list(farms)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read scenario CSV {path}: {exc}") from exc
    out = []
    for k, row in enumerate(rows):
        sid = row.get("scenario") or row.get("id") or f"s{k + 1}"
        if "probability" not in row:
            raise ValidationError(f"{path}: missing probability column", "scenarios.probability")
        try:
            wind = {j: float(row[j]) for j in farms}
        except KeyError as exc:
            raise ValidationError(f"{path}: missing wind farm column {exc}", "scenarios.wind") from None
        out.append({"id": sid, "probability": float(row["probability"]), "wind": wind})
    return out


def case_from_dict(doc: Mapping, base_dir: Path | None = None, name: str = "case") -> CaseData:
    """Build and validate a :class:`CaseData` from a decoded case document."""
    if not isinstance(doc, Mapping):
        raise ParseError("case document must be a JSON object")
    for key in ("areas", "nodes", "lines", "links", "generators", "wind_farms", "scenarios", "shed_cost"):
        if key not in doc:
            raise ValidationError(f"missing top-level key {key!r}", key)

    areas = tuple(str(a) for a in doc["areas"])
    if len(set(areas)) != len(areas) or not areas:
        raise ValidationError("area ids must be unique and nonempty", "areas")
    area_set = set(areas)

    nodes = []
    for k, n in enumerate(doc["nodes"]):
        where = f"nodes[{k}]"
        node = Node(str(_req(n, "id", where)), str(_req(n, "area", where)), _num(n, "demand", where, 0.0))
        if node.area not in area_set:
            raise ValidationError(f"{where}: unknown area {node.area!r}", f"{where}.area")
        if node.demand < 0:
            raise ValidationError(f"{where}: negative demand", f"{where}.demand")
        nodes.append(node)
    node_area = {n.id: n.area for n in nodes}
    if len(node_area) != len(nodes) or not nodes:
        raise ValidationError("node ids must be unique and nonempty", "nodes")

    link_docs = list(doc["links"])
    tie_of: dict[str, str] = {}
    for k, e in enumerate(link_docs):
        for lid in _req(e, "lines", f"links[{k}]"):
            if lid in tie_of:
                raise ValidationError(f"line {lid!r} belongs to two links", f"links[{k}].lines")
            tie_of[str(lid)] = str(_req(e, "id", f"links[{k}]"))

    lines = []
    for k, ln in enumerate(doc["lines"]):
        where = f"lines[{k}]"
        lid = str(_req(ln, "id", where))
        fr, to = str(_req(ln, "from", where)), str(_req(ln, "to", where))
        for nd in (fr, to):
            if nd not in node_area:
                raise ValidationError(f"{where}: unknown node {nd!r}", where)
        if fr == to:
            raise ValidationError(f"{where}: line connects a node to itself", where)
        if "susceptance" in ln:
            b = _num(ln, "susceptance", where)
        else:
            x = _num(ln, "reactance", where)
            if x <= 0:
                raise ValidationError(f"{where}: reactance must be positive", f"{where}.reactance")
            b = 1.0 / x
        cap = _num(ln, "capacity", where)
        if cap <= 0:
            raise ValidationError(f"{where}: capacity must be positive", f"{where}.capacity")
        if b <= 0:
            raise ValidationError(f"{where}: susceptance must be positive", f"{where}.susceptance")
        link = tie_of.get(lid)
        if link is None and node_area[fr] != node_area[to]:
            raise ValidationError(f"{where}: line crosses areas but is in no link", where)
        if link is not None and node_area[fr] == node_area[to]:
            raise ValidationError(f"{where}: intra-area line listed as tie-line of {link}", where)
        lines.append(AcLine(lid, fr, to, cap, b, link))
    line_by_id = {ln.id: ln for ln in lines}
    if len(line_by_id) != len(lines):
        raise ValidationError("line ids must be unique", "lines")
    for lid in tie_of:
        if lid not in line_by_id:
            raise ValidationError(f"link references unknown line {lid!r}", "links")

    links = []
    for k, e in enumerate(link_docs):
        where = f"links[{k}]"
        eid = str(e["id"])
        sa, ra = str(_req(e, "from_area", where)), str(_req(e, "to_area", where))
        if sa not in area_set or ra not in area_set:
            raise ValidationError(f"{where}: unknown area", where)
        if sa == ra:
            raise ValidationError(f"{where}: sending and receiving area coincide", where)
        members = tuple(str(x) for x in e["lines"])
        if not members:
            raise ValidationError(f"{where}: link {eid} has no tie-lines (capacity would be 0)", f"{where}.lines")
        for lid in members:
            if set(line_areas := (node_area[line_by_id[lid].from_node], node_area[line_by_id[lid].to_node])) != {sa, ra}:
                raise ValidationError(f"{where}: tie-line {lid} joins {line_areas}, not {sa}-{ra}", where)
        links.append(InterAreaLink(eid, sa, ra, members, sum(line_by_id[lid].capacity for lid in members)))
    if len({e.id for e in links}) != len(links):
        raise ValidationError("link ids must be unique", "links")

    gens = []
    for k, g in enumerate(doc["generators"]):
        where = f"generators[{k}]"
        flexible = bool(g.get("flexible", True))
        gen = Generator(
            str(_req(g, "id", where)),
            str(_req(g, "node", where)),
            _num(g, "cost", where),
            _num(g, "capacity", where),
            _num(g, "reserve_up_cost", where, 0.0),
            _num(g, "reserve_down_cost", where, 0.0),
            _num(g, "reserve_up", where, 0.0),
            _num(g, "reserve_down", where, 0.0),
            flexible,
        )
        if gen.node not in node_area:
            raise ValidationError(f"{where}: unknown node {gen.node!r}", f"{where}.node")
        for fld in ("cost", "capacity", "reserve_up_cost", "reserve_down_cost", "reserve_up", "reserve_down"):
            if getattr(gen, fld) < 0:
                raise ValidationError(f"{where}.{fld} is negative", f"{where}.{fld}")
        if gen.reserve_up > gen.capacity or gen.reserve_down > gen.capacity:
            raise ValidationError(f"{where}: reserve offer exceeds capacity", where)
        if not flexible and (gen.reserve_up or gen.reserve_down):
            raise ValidationError(f"{where}: inflexible unit offers reserves", where)
        gens.append(gen)
    if len({g.id for g in gens}) != len(gens):
        raise ValidationError("generator ids must be unique", "generators")

    farm_docs = list(doc["wind_farms"])
    farm_ids = [str(_req(j, "id", f"wind_farms[{k}]")) for k, j in enumerate(farm_docs)]
    if len(set(farm_ids)) != len(farm_ids):
        raise ValidationError("wind farm ids must be unique", "wind_farms")

    sdoc = doc["scenarios"]
    if isinstance(sdoc, Mapping) and "csv" in sdoc:
        path = Path(sdoc["csv"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        sdoc = _read_scenario_csv(path, farm_ids)
    scenarios = []
    for k, s in enumerate(sdoc):
        where = f"scenarios[{k}]"
        wind = {str(j): float(v) for j, v in dict(_req(s, "wind", where)).items()}
        missing = set(farm_ids) - set(wind)
        if missing:
            raise ValidationError(f"{where}: no production for {sorted(missing)}", f"{where}.wind")
        p = _num(s, "probability", where)
        if p < 0:
            raise ValidationError(f"{where}: negative probability", f"{where}.probability")
        scenarios.append(Scenario(str(s.get("id", f"s{k + 1}")), p, wind))
    if not scenarios:
        raise ValidationError("at least one scenario is required", "scenarios")
    total = sum(s.probability for s in scenarios)
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError(f"scenario probabilities sum to {total:.12g}, not 1", "scenarios.probability")

    farms = []
    for k, j in enumerate(farm_docs):
        where = f"wind_farms[{k}]"
        jid = farm_ids[k]
        cap = _num(j, "capacity", where)
        node = str(_req(j, "node", where))
        if node not in node_area:
            raise ValidationError(f"{where}: unknown node {node!r}", f"{where}.node")
        for s in scenarios:
            w = s.wind[jid]
            if w < 0 or w > cap + WIND_MEAN_TOL:
                raise ValidationError(f"{where}: production {w} in {s.id} outside [0, {cap}]", f"{where}.capacity")
        mean = sum(s.probability * s.wind[jid] for s in scenarios)
        if j.get("expected") is not None:
            exp = _num(j, "expected", where)
            if abs(exp - mean) > WIND_MEAN_TOL:
                raise ValidationError(
                    f"{where}: expected production {exp} disagrees with scenario mean {mean}", f"{where}.expected"
                )
        else:
            exp = mean
        farms.append(WindFarm(jid, node, cap, exp))

    shed = _num(doc, "shed_cost", "case")
    if shed < 0:
        raise ValidationError("shed_cost is negative", "shed_cost")

    chi_doc = doc.get("existing_chi", {}) or {}
    chi = {}
    for e in links:
        v = float(chi_doc.get(e.id, 0.0))
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"existing_chi[{e.id}] = {v} outside [0, 1]", f"existing_chi.{e.id}")
        chi[e.id] = v
    unknown = set(chi_doc) - set(chi)
    if unknown:
        raise ValidationError(f"existing_chi names unknown links {sorted(unknown)}", "existing_chi")

    rr = None
    if doc.get("reserve_requirements"):
        rdoc = doc["reserve_requirements"]
        stray = set(rdoc) - set(areas)
        if stray:
            raise ValidationError(f"reserve_requirements names unknown areas {sorted(stray)}", "reserve_requirements")
        up, down = {}, {}
        for a in areas:
            entry = rdoc.get(a, {})
            up[a] = float(entry.get("up", 0.0))
            down[a] = float(entry.get("down", 0.0))
        rr = ReserveRequirements(up, down)

    return CaseData(
        name=str(doc.get("name", name)),
        areas=areas,
        nodes=tuple(nodes),
        lines=tuple(lines),
        links=tuple(links),
        generators=tuple(gens),
        wind_farms=tuple(farms),
        scenarios=tuple(scenarios),
        shed_cost=shed,
        existing_chi=chi,
        reserve_requirements=rr,
        description=str(doc.get("description", "")),
    )


def load_case(path) -> CaseData:
    """Read a case JSON file.  Bare fixture names resolve to bundled data."""
    p = Path(path)
    if not p.exists():
        bundled = fixture_path(str(path))
        if bundled is None:
            raise ParseError(f"case file not found: {path}")
        p = bundled
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse {p}: {exc}") from exc
    return case_from_dict(doc, base_dir=p.parent, name=p.stem)


def fixture_path(name: str) -> Path | None:
    """Locate a bundled fixture by file name, with or without ``.json``.

    Three-area fixtures may be named by their suffix, e.g. ``base``.
    """
    stem = name if name.endswith(".json") else name + ".json"
    if "/" in stem or "\\" in stem:
        return None
    root = resources.files("reservex") / "data"
    for cand in (stem, "three_area_" + stem):
        ref = root / cand
        if ref.is_file():
            return Path(str(ref))
    return None


def bundled_fixtures() -> list[str]:
    root = resources.files("reservex") / "data"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def case_to_dict(case: CaseData) -> dict:
    """Inverse of :func:`case_from_dict` (scenarios are always inlined)."""
    doc = {
        "name": case.name,
        "description": case.description,
        "areas": list(case.areas),
        "nodes": [{"id": n.id, "area": n.area, "demand": n.demand} for n in case.nodes],
        "lines": [
            {"id": ln.id, "from": ln.from_node, "to": ln.to_node, "capacity": ln.capacity, "susceptance": ln.susceptance}
            for ln in case.lines
        ],
        "links": [
            {"id": e.id, "from_area": e.sending_area, "to_area": e.receiving_area, "lines": list(e.lines)}
            for e in case.links
        ],
        "generators": [
            {
                "id": g.id,
                "node": g.node,
                "cost": g.cost,
                "capacity": g.capacity,
                "reserve_up_cost": g.reserve_up_cost,
                "reserve_down_cost": g.reserve_down_cost,
                "reserve_up": g.reserve_up,
                "reserve_down": g.reserve_down,
                "flexible": g.flexible,
            }
            for g in case.generators
        ],
        "wind_farms": [{"id": j.id, "node": j.node, "capacity": j.capacity, "expected": j.expected} for j in case.wind_farms],
        "scenarios": [{"id": s.id, "probability": s.probability, "wind": dict(s.wind)} for s in case.scenarios],
        "shed_cost": case.shed_cost,
        "existing_chi": dict(case.existing_chi),
    }
    if case.reserve_requirements is not None:
        rr = case.reserve_requirements
        doc["reserve_requirements"] = {a: {"up": rr.up[a], "down": rr.down[a]} for a in case.areas}
    return doc


def dump_case(case: CaseData, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n", encoding="utf-8")


# -- coalitions ------------------------------------------------------------------


def parse_coalition(case: CaseData, spec: str | Iterable[str] | None) -> frozenset[str]:
    """``"ALL"``, ``""``/``"NONE"``, or comma-separated area ids."""
    if spec is None:
        return frozenset()
    if isinstance(spec, str):
        s = spec.strip()
        if s.upper() == "ALL":
            return frozenset(case.areas)
        if s in ("", "NONE", "none", "{}"):
            return frozenset()
        items = [x.strip() for x in s.split(",") if x.strip()]
    else:
        items = list(spec)
    bad = [a for a in items if a not in case.areas]
    if bad:
        raise ValidationError(f"unknown areas in coalition: {bad}", "coalition")
    return frozenset(items)


def coalition_mask(case: CaseData, coalition: Iterable[str]) -> int:
    pos = {a: k for k, a in enumerate(case.areas)}
    m = 0
    for a in coalition:
        m |= 1 << pos[a]
    return m


def mask_coalition(case: CaseData, mask: int) -> frozenset[str]:
    return frozenset(a for k, a in enumerate(case.areas) if mask >> k & 1)


def coalition_label(case: CaseData, coalition: Iterable[str]) -> str:
    members = [a for a in case.areas if a in set(coalition)]
    return "{" + ",".join(members) + "}"
