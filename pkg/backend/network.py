"""
Metro network model: stations, directed in-vehicle links, transfer links,
feasible path sets and the layout of the network cost vector.

The cost vector x has four blocks in a fixed order:

    access (one per in-vehicle link) | in-vehicle (per link) | transfer (per transfer link) | egress (per station)

so c = 2l + s + n. Access is charged on the first in-vehicle link of a path,
which makes it direction specific; egress is charged at the destination.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy import sparse

from errors import NetworkError

logger = logging.getLogger(__name__)

COST_KINDS = ("access", "invehicle", "transfer", "egress")

DEFAULT_K_MAX = 5
DEFAULT_DETOUR_CAP = 1.5


# ── Network file schema ──

class StationSpec(BaseModel):
    id: str
    name: str = ""
    x: Optional[float] = None
    y: Optional[float] = None


class InVehicleLinkSpec(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    id: str
    from_station: str = Field(alias="from")
    to_station: str = Field(alias="to")
    line: str
    time_s: float = 120.0

    @field_validator('time_s')
    @classmethod
    def validate_time(cls, v):
        if v <= 0:
            raise ValueError('time_s must be positive')
        return v


class TransferLinkSpec(BaseModel):
    id: str
    station: str
    from_line: str
    to_line: str
    time_s: float = 180.0

    @field_validator('time_s')
    @classmethod
    def validate_time(cls, v):
        if v <= 0:
            raise ValueError('time_s must be positive')
        return v


class PathSpec(BaseModel):
    origin: str
    destination: str
    links: list[str]

    @field_validator('links')
    @classmethod
    def validate_links(cls, v):
        if not v:
            raise ValueError('a path needs at least one link')
        return v


class NetworkSpec(BaseModel):
    """Structured network description as stored in a network JSON file"""

    model_config = ConfigDict(extra="forbid")

    name: str = "network"
    stations: list[StationSpec]
    invehicle_links: list[InVehicleLinkSpec]
    transfer_links: list[TransferLinkSpec] = Field(default_factory=list)
    paths: list[PathSpec] = Field(default_factory=list)
    adjacency: Optional[dict[str, list[str]]] = None
    access_time_s: float = 60.0
    egress_time_s: float = 60.0


# ── Domain types ──

@dataclass(frozen=True)
class Path:
    """One feasible path r_od^k, as an ordered sequence of link ids"""
    origin: str
    destination: str
    elements: tuple[str, ...]
    invehicle: tuple[str, ...]
    transfers: tuple[str, ...]

    @property
    def od(self) -> tuple[str, str]:
        return (self.origin, self.destination)

    @property
    def access_link(self) -> str:
        return self.invehicle[0]


@dataclass(frozen=True)
class PathSet:
    od: tuple[str, str]
    paths: tuple[Path, ...]

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def choice_relevant(self) -> bool:
        return len(self.paths) > 1


@dataclass(frozen=True, eq=False)
class RoutingRow:
    """Binary indicator row over the c cost attributes, stored as column indices"""
    cols: np.ndarray
    c: int

    def to_dense(self) -> np.ndarray:
        row = np.zeros(self.c)
        row[self.cols] = 1.0
        return row

    def dot(self, x: np.ndarray) -> float:
        return float(np.sum(np.asarray(x)[self.cols]))

    def __len__(self) -> int:
        return len(self.cols)


class IndexMap:
    """Bijection between (cost kind, element id) and positions in [0, c)"""

    def __init__(self, link_ids: tuple, transfer_ids: tuple, station_ids: tuple):
        blocks = (link_ids, link_ids, transfer_ids, station_ids)
        self._positions: dict[tuple[str, str], int] = {}
        self._elements: list[tuple[str, str]] = []
        self.offsets: dict[str, int] = {}
        for kind, ids in zip(COST_KINDS, blocks):
            self.offsets[kind] = len(self._elements)
            for element_id in ids:
                self._positions[(kind, element_id)] = len(self._elements)
                self._elements.append((kind, element_id))
        self.sizes = {kind: len(ids) for kind, ids in zip(COST_KINDS, blocks)}

    def position(self, kind: str, element_id: str) -> int:
        try:
            return self._positions[(kind, element_id)]
        except KeyError:
            raise NetworkError(f"Unknown {kind} element '{element_id}'")

    def element(self, position: int) -> tuple[str, str]:
        return self._elements[position]

    def block(self, kind: str) -> slice:
        start = self.offsets[kind]
        return slice(start, start + self.sizes[kind])

    def block_of(self) -> np.ndarray:
        """Block number (0..3) of every position"""
        return np.repeat(np.arange(4), [self.sizes[k] for k in COST_KINDS])

    def __len__(self) -> int:
        return len(self._elements)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    spec: NetworkSpec
    station_ids: tuple[str, ...]
    link_ids: tuple[str, ...]
    transfer_ids: tuple[str, ...]
    adjacency: np.ndarray
    path_sets: Mapping[tuple[str, str], PathSet] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.station_ids)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.link_ids)

    @property
    def s(self) -> int:
        return len(self.transfer_ids)

    @property
    def c(self) -> int:
        return 2 * self.l + self.s + self.n

    @cached_property
    def index_map(self) -> IndexMap:
        return IndexMap(self.link_ids, self.transfer_ids, self.station_ids)

    @cached_property
    def station_index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.station_ids)}

    @cached_property
    def links(self) -> dict[str, InVehicleLinkSpec]:
        return {link.id: link for link in self.spec.invehicle_links}

    @cached_property
    def transfers(self) -> dict[str, TransferLinkSpec]:
        return {tr.id: tr for tr in self.spec.transfer_links}

    @property
    def ods(self) -> list[tuple[str, str]]:
        return list(self.path_sets.keys())

    @cached_property
    def nominal_costs(self) -> np.ndarray:
        """Per-attribute nominal times in seconds, from the network description"""
        x = np.empty(self.c)
        x[self.index_map.block("access")] = self.spec.access_time_s
        x[self.index_map.block("invehicle")] = [self.links[k].time_s for k in self.link_ids]
        x[self.index_map.block("transfer")] = [self.transfers[k].time_s for k in self.transfer_ids]
        x[self.index_map.block("egress")] = self.spec.egress_time_s
        return x

    @cached_property
    def network_hash(self) -> str:
        payload = self.to_spec().model_dump_json(by_alias=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @cached_property
    def path_table(self) -> "PathTable":
        return PathTable(self)

    def to_spec(self) -> NetworkSpec:
        """Network description including the current path sets"""
        paths = [
            PathSpec(origin=p.origin, destination=p.destination, links=list(p.elements))
            for ps in self.path_sets.values() for p in ps.paths
        ]
        return self.spec.model_copy(update={"paths": paths})

    def path_length(self, path: Path) -> float:
        """Nominal length: sum of in-vehicle and transfer times"""
        return (sum(self.links[k].time_s for k in path.invehicle)
                + sum(self.transfers[k].time_s for k in path.transfers))


class PathTable:
    """
    Flat, index-based view of all feasible paths used by the samplers.

    Paths are numbered 0..P-1 in O-D order; ``od_paths`` holds the path numbers
    of every O-D pair padded with -1 to the largest path-set size.
    """

    def __init__(self, net: NetworkModel):
        self.ods = net.ods
        self.od_index = {od: i for i, od in enumerate(self.ods)}
        sizes = [len(net.path_sets[od]) for od in self.ods]
        self.k_max = max(sizes) if sizes else 1
        self.od_n_paths = np.asarray(sizes, dtype=int)
        self.od_origin = np.asarray([net.station_index[o] for o, _ in self.ods], dtype=int)
        self.od_paths = -np.ones((len(self.ods), self.k_max), dtype=int)

        paths: list[Path] = []
        for i, od in enumerate(self.ods):
            for k, path in enumerate(net.path_sets[od].paths):
                self.od_paths[i, k] = len(paths)
                paths.append(path)
        self.paths = paths
        self.path_od = np.asarray(
            [self.od_index[p.od] for p in paths], dtype=int)
        self.path_slot = np.asarray(
            [k for i in range(len(self.ods)) for k in range(sizes[i])], dtype=int)

        c = net.c
        rows = [routing_row(p, net).cols for p in paths]
        self.routing = _indicator_matrix(rows, c)
        imap = net.index_map
        h = imap.block("invehicle")
        u = imap.block("transfer")
        self.invehicle = _indicator_matrix(
            [[imap.position("invehicle", k) for k in p.invehicle] for p in paths], c)
        self.transfer = _indicator_matrix(
            [[imap.position("transfer", k) for k in p.transfers] for p in paths], c)
        # per-block routing, used to split the observation variance by cost kind
        block_of = imap.block_of()
        self.routing_blocks = []
        for b in range(4):
            mask = sparse.diags((block_of == b).astype(float))
            self.routing_blocks.append((self.routing @ mask).tocsr())
        # path x in-vehicle link incidence, for link flows
        self.link_incidence = self.invehicle[:, h].tocsr()
        self.transfer_incidence = self.transfer[:, u].tocsr()
        self.multi_path_ods = np.flatnonzero(self.od_n_paths > 1)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def slot_mask(self) -> np.ndarray:
        return self.od_paths >= 0


def _indicator_matrix(rows: list, c: int) -> sparse.csr_matrix:
    indptr = np.cumsum([0] + [len(r) for r in rows])
    indices = np.concatenate([np.asarray(r, dtype=int) for r in rows]) if rows else np.zeros(0, int)
    data = np.ones(len(indices))
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), c))


# ── Construction and validation ──

def _check_ids(spec: NetworkSpec) -> list[str]:
    problems = []
    seen: dict[str, str] = {}
    for kind, items in (("station", spec.stations),
                        ("in-vehicle link", spec.invehicle_links),
                        ("transfer link", spec.transfer_links)):
        for item in items:
            if item.id in seen:
                problems.append(f"duplicate id '{item.id}' ({kind}, already used by a {seen[item.id]})")
            else:
                seen[item.id] = kind
    return problems


def build_network(spec) -> NetworkModel:
    """Validate a network description and build the immutable NetworkModel"""
    if isinstance(spec, dict):
        try:
            spec = NetworkSpec.model_validate(spec)
        except ValidationError as e:
            raise NetworkError("Invalid network description", _pydantic_details(e)) from e

    problems = _check_ids(spec)
    station_ids = tuple(st.id for st in spec.stations)
    stations = set(station_ids)
    lines_at: dict[str, set] = {sid: set() for sid in station_ids}
    endpoints = set()

    for link in spec.invehicle_links:
        for end in (link.from_station, link.to_station):
            if end not in stations:
                problems.append(f"link '{link.id}' references unknown station '{end}'")
        if link.from_station == link.to_station:
            problems.append(f"link '{link.id}' starts and ends at '{link.from_station}'")
        key = (link.from_station, link.to_station, link.line)
        if key in endpoints:
            problems.append(f"link '{link.id}' duplicates {key[0]}->{key[1]} on line '{link.line}'")
        endpoints.add(key)
        for end in (link.from_station, link.to_station):
            if end in lines_at:
                lines_at[end].add(link.line)

    for tr in spec.transfer_links:
        if tr.station not in stations:
            problems.append(f"transfer '{tr.id}' references unknown station '{tr.station}'")
            continue
        for line in (tr.from_line, tr.to_line):
            if line not in lines_at[tr.station]:
                problems.append(f"transfer '{tr.id}': line '{line}' does not serve '{tr.station}'")
        if tr.from_line == tr.to_line:
            problems.append(f"transfer '{tr.id}' connects line '{tr.from_line}' to itself")

    if problems:
        raise NetworkError("Invalid network description", problems)

    idx = {sid: i for i, sid in enumerate(station_ids)}
    adjacency = np.zeros((len(station_ids), len(station_ids)))
    if spec.adjacency is not None:
        for a, neighbours in spec.adjacency.items():
            for b in neighbours:
                if a not in idx or b not in idx:
                    problems.append(f"adjacency references unknown station '{a if a not in idx else b}'")
                    continue
                adjacency[idx[a], idx[b]] = 1.0
        if problems:
            raise NetworkError("Invalid adjacency", problems)
        if not np.array_equal(adjacency, adjacency.T):
            asym = np.argwhere(adjacency != adjacency.T)
            raise NetworkError("Adjacency is not symmetric", [
                f"{station_ids[i]} -> {station_ids[j]} has no reverse entry" for i, j in asym[:20]])
    else:
        for link in spec.invehicle_links:
            i, j = idx[link.from_station], idx[link.to_station]
            adjacency[i, j] = adjacency[j, i] = 1.0
    np.fill_diagonal(adjacency, 0.0)
    adjacency.setflags(write=False)

    net = NetworkModel(
        spec=spec.model_copy(update={"paths": []}),
        station_ids=station_ids,
        link_ids=tuple(link.id for link in spec.invehicle_links),
        transfer_ids=tuple(tr.id for tr in spec.transfer_links),
        adjacency=adjacency,
    )

    if spec.paths:
        path_sets: dict[tuple[str, str], list[Path]] = {}
        path_problems = []
        for i, ps in enumerate(spec.paths):
            path = make_path(net, ps.origin, ps.destination, ps.links)
            issues = validate_path(net, path)
            if issues:
                path_problems.extend(f"paths[{i}] {ps.origin}->{ps.destination}: {msg}" for msg in issues)
            path_sets.setdefault(path.od, []).append(path)
        if path_problems:
            raise NetworkError("Invalid path definitions", path_problems)
        net = with_path_sets(net, {od: PathSet(od, tuple(p)) for od, p in path_sets.items()})

    logger.info(f"[Network] Built '{spec.name}': n={net.n} l={net.l} s={net.s} c={net.c}, "
                f"{len(net.path_sets)} O-D pairs")
    return net


def with_path_sets(net: NetworkModel, path_sets: Mapping[tuple[str, str], PathSet]) -> NetworkModel:
    """Return a copy of the network carrying the given path sets (in station order)"""
    for od, ps in path_sets.items():
        if len(ps) == 0:
            raise NetworkError(f"O-D pair {od} has an empty path set")
    order = sorted(path_sets, key=lambda od: (net.station_index[od[0]], net.station_index[od[1]]))
    fresh = replace(net, path_sets=MappingProxyType({od: path_sets[od] for od in order}))
    return fresh


def make_path(net: NetworkModel, origin: str, destination: str, elements: Iterable[str]) -> Path:
    elements = tuple(elements)
    return Path(
        origin=origin,
        destination=destination,
        elements=elements,
        invehicle=tuple(e for e in elements if e in net.links),
        transfers=tuple(e for e in elements if e in net.transfers),
    )


def validate_path(net: NetworkModel, path: Path) -> list[str]:
    """Connectivity checks shared by file-loaded and enumerated paths"""
    problems = []
    if path.origin == path.destination:
        return ["origin equals destination"]
    for end in (path.origin, path.destination):
        if end not in net.station_index:
            problems.append(f"unknown station '{end}'")
    unknown = [e for e in path.elements if e not in net.links and e not in net.transfers]
    if unknown:
        problems.append(f"unknown link ids {unknown}")
    if problems:
        return problems
    if not path.invehicle:
        return ["path has no in-vehicle link"]
    if path.elements[0] not in net.links:
        problems.append("path must start with an in-vehicle link")
    if path.elements[-1] not in net.links:
        problems.append("path must end with an in-vehicle link")
    if problems:
        return problems

    station = path.origin
    line = None
    previous_kind = None
    visited = {station}
    for e in path.elements:
        if e in net.links:
            link = net.links[e]
            if link.from_station != station:
                problems.append(f"link '{e}' starts at '{link.from_station}', expected '{station}'")
            if line is not None and link.line != line:
                problems.append(f"link '{e}' on line '{link.line}' follows line '{line}' without a transfer")
            station, line = link.to_station, link.line
            if station in visited:
                problems.append(f"path revisits station '{station}'")
            visited.add(station)
            previous_kind = "invehicle"
        else:
            tr = net.transfers[e]
            if previous_kind == "transfer":
                problems.append(f"consecutive transfers at '{tr.station}'")
            if tr.station != station:
                problems.append(f"transfer '{e}' is at '{tr.station}', path is at '{station}'")
            if tr.from_line != line:
                problems.append(f"transfer '{e}' leaves line '{tr.from_line}', path is on '{line}'")
            line = tr.to_line
            previous_kind = "transfer"
    if station != path.destination:
        problems.append(f"path ends at '{station}', expected '{path.destination}'")
    return problems


def routing_row(path: Path, net: NetworkModel) -> RoutingRow:
    """Indicator row A_od^k: access, in-vehicle, transfer and egress attributes of the path"""
    imap = net.index_map
    if path.destination not in net.station_index:
        raise NetworkError(f"Unknown station '{path.destination}'")
    cols = [imap.position("access", path.access_link)]
    cols += [imap.position("invehicle", k) for k in path.invehicle]
    cols += [imap.position("transfer", k) for k in path.transfers]
    cols.append(imap.position("egress", path.destination))
    return RoutingRow(cols=np.asarray(sorted(cols), dtype=int), c=net.c)


# ── Path enumeration ──

def platform_graph(net: NetworkModel) -> nx.DiGraph:
    """
    Directed graph over (station, line) platforms. Rides and transfers are
    weighted by their nominal times; every station also has a zero-cost entry
    node ("in", s) and exit node ("out", s).
    """
    G = nx.DiGraph()
    for link in net.spec.invehicle_links:
        G.add_edge(("p", link.from_station, link.line), ("p", link.to_station, link.line),
                   weight=link.time_s, element=link.id)
    for tr in net.spec.transfer_links:
        G.add_edge(("p", tr.station, tr.from_line), ("p", tr.station, tr.to_line),
                   weight=tr.time_s, element=tr.id)
    for node in list(G.nodes):
        _, station, _ = node
        G.add_edge(("in", station), node, weight=0.0, element=None)
        G.add_edge(node, ("out", station), weight=0.0, element=None)
    return G


def enumerate_paths(net: NetworkModel, od: tuple[str, str], k_max: int = DEFAULT_K_MAX,
                    detour_cap: float = DEFAULT_DETOUR_CAP,
                    graph: Optional[nx.DiGraph] = None) -> PathSet:
    """
    Loop-free paths for an O-D pair ordered by nominal length, keeping those
    within detour_cap x the shortest length, at most k_max of them. Ties are
    broken by the lexicographic link-id sequence.
    """
    origin, destination = od
    if k_max < 1:
        raise NetworkError("k_max must be >= 1")
    for end in od:
        if end not in net.station_index:
            raise NetworkError(f"Unknown station '{end}'")
    if origin == destination:
        raise NetworkError(f"O-D pair {od} has identical stations")

    G = graph if graph is not None else platform_graph(net)
    source, target = ("in", origin), ("out", destination)
    if source not in G or target not in G:
        raise NetworkError(f"O-D pair {od} is disconnected: empty path set")

    candidates = []
    shortest = None
    try:
        # Yen's algorithm yields simple paths by non-decreasing weight
        for nodes in nx.shortest_simple_paths(G, source, target, weight="weight"):
            hops = list(zip(nodes[:-1], nodes[1:]))
            length = sum(G.edges[u, v]["weight"] for u, v in hops)
            if shortest is not None and length > detour_cap * shortest + 1e-9:
                break
            # k_max kept and no tie left to break
            if len(candidates) >= k_max and length > candidates[-1][0] + 1e-9:
                break
            elements = tuple(G.edges[u, v]["element"] for u, v in hops
                             if G.edges[u, v]["element"] is not None)
            path = make_path(net, origin, destination, elements)
            if validate_path(net, path):
                continue
            if shortest is None:
                shortest = length
            candidates.append((round(length, 9), elements, path))
    except nx.NetworkXNoPath:
        pass

    if not candidates:
        raise NetworkError(f"O-D pair {od} is disconnected: empty path set")
    candidates.sort(key=lambda item: (item[0], item[1]))
    return PathSet(od=od, paths=tuple(p for _, _, p in candidates[:k_max]))


def with_enumerated_paths(net: NetworkModel, ods: Optional[list[tuple[str, str]]] = None,
                          k_max: int = DEFAULT_K_MAX,
                          detour_cap: float = DEFAULT_DETOUR_CAP) -> NetworkModel:
    """Enumerate path sets for the given O-D pairs (all ordered pairs by default)"""
    if ods is None:
        ods = [(o, d) for o in net.station_ids for d in net.station_ids if o != d]
    G = platform_graph(net)
    path_sets = {}
    for od in ods:
        path_sets[od] = enumerate_paths(net, od, k_max, detour_cap, graph=G)
    multi = sum(ps.choice_relevant for ps in path_sets.values())
    logger.info(f"[Network] Enumerated {sum(len(ps) for ps in path_sets.values())} paths "
                f"for {len(path_sets)} O-D pairs ({multi} with alternatives)")
    return with_path_sets(net, path_sets)


# ── File IO ──

def _pydantic_details(exc: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()]


def load_network(path: str) -> NetworkModel:
    """Read and validate a network JSON file"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except FileNotFoundError:
        raise NetworkError(f"Network file not found: {path}")
    try:
        spec = NetworkSpec.model_validate_json(text)
    except ValidationError as e:
        raise NetworkError(f"Network file {path} failed schema validation", _pydantic_details(e)) from e
    return build_network(spec)


def save_network(net: NetworkModel, path: str) -> None:
    payload = net.to_spec().model_dump(by_alias=True, exclude_none=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
