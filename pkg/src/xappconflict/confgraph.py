"""Conflict graphs over xApps, RCPs and KPIs, and the causal DAG over RCPs and KPIs.

The conflict graph has three edge types: ``control`` (xApp -> RCP),
``influence`` (RCP -> KPI) and ``structural`` (RCP -> RCP). The causal DAG
keeps the last two. Conflicts are classified as

* direct: two xApps control the same RCP;
* indirect: two xApps control distinct RCPs that influence a shared KPI;
* implicit: xApp i controls ``p_m``, xApp j controls ``p_n``, ``p_m -> p_n``
  is an edge, ``p_n -> k_z`` and ``p_m -> k_y`` for some ``k_y != k_z``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx

from xappconflict.errors import CycleError, DataError

CONTROL, INFLUENCE, STRUCTURAL = "control", "influence", "structural"
EDGE_KINDS = (CONTROL, INFLUENCE, STRUCTURAL)


@dataclass(frozen=True)
class XApp:
    id: str
    name: str = ""
    controls: tuple = ()
    targets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "targets", tuple(self.targets))

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "controls": list(self.controls), "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "XApp":
        return cls(d["id"], d.get("name", ""), tuple(d.get("controls", ())), tuple(d.get("targets", ())))


class CausalDag:
    """Directed acyclic graph over RCP, KPI and (optionally) context nodes.

    ``roles`` maps each node to ``rcp``, ``kpi`` or ``context``. Acyclicity is
    checked on construction.
    """

    def __init__(self, roles: Mapping[str, str], edges: Iterable[tuple[str, str]], structural: Iterable[tuple[str, str]] = ()):
        self.roles = dict(sorted(roles.items()))
        self.nodes = tuple(self.roles)
        self.structural = frozenset(tuple(e) for e in structural)
        self.edges = frozenset(tuple(e) for e in edges) | self.structural
        for u, v in self.edges:
            if u not in self.roles or v not in self.roles:
                raise DataError(f"edge {u}->{v} references an unknown node")
            if u == v:
                raise CycleError([u, u])
        self._parents = {n: set() for n in self.nodes}
        self._children = {n: set() for n in self.nodes}
        for u, v in self.edges:
            self._children[u].add(v)
            self._parents[v].add(u)
        g = nx.DiGraph(self.edges)
        g.add_nodes_from(self.nodes)
        try:
            cycle = nx.find_cycle(g)
        except nx.NetworkXNoCycle:
            cycle = None
        if cycle:
            raise CycleError([u for u, _ in cycle] + [cycle[0][0]])

    def __eq__(self, other):
        return isinstance(other, CausalDag) and self.roles == other.roles and self.edges == other.edges

    def __repr__(self):
        return f"CausalDag({len(self.nodes)} nodes, {len(self.edges)} edges)"

    def parents(self, node: str) -> set[str]:
        return set(self._parents[node])

    def children(self, node: str) -> set[str]:
        return set(self._children[node])

    def descendants(self, node: str) -> set[str]:
        seen, stack = set(), [node]
        while stack:
            for c in self._children[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def ancestors_of(self, nodes: Iterable[str]) -> set[str]:
        seen, stack = set(nodes), list(nodes)
        while stack:
            for p in self._parents[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def without_outgoing(self, node: str) -> "CausalDag":
        edges = {(u, v) for u, v in self.edges if u != node}
        return CausalDag(self.roles, edges, {e for e in self.structural if e[0] != node})

    def influence_edges(self) -> list[tuple[str, str]]:
        return sorted(e for e in self.edges if e not in self.structural)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n, "role": r} for n, r in self.roles.items()],
            "edges": [{"source": u, "target": v, "kind": STRUCTURAL if (u, v) in self.structural else INFLUENCE} for u, v in sorted(self.edges)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CausalDag":
        roles = {n["id"]: n["role"] for n in d["nodes"]}
        edges = [(e["source"], e["target"]) for e in d["edges"]]
        structural = [(e["source"], e["target"]) for e in d["edges"] if e.get("kind") == STRUCTURAL]
        return cls(roles, edges, structural)


def _node_set(nodes) -> set[str]:
    if isinstance(nodes, str):
        return {nodes}
    return set(nodes)


def d_separated(dag: CausalDag, X, Y, Z=()) -> bool:
    """True iff every path between ``X`` and ``Y`` is blocked by ``Z``.

    Reachability search over (node, direction) states: a trail may pass a
    non-collider only when it is not in ``Z`` and a collider only when the
    collider has a descendant in ``Z`` (itself included).
    """
    X, Y, Z = _node_set(X), _node_set(Y), _node_set(Z)
    for name, s in (("X", X), ("Y", Y), ("Z", Z)):
        unknown = s - set(dag.nodes)
        if unknown:
            raise DataError(f"{name} contains unknown nodes {sorted(unknown)}")
    if X & Y or X & Z or Y & Z:
        raise DataError("X, Y and Z must be disjoint")
    if not X or not Y:
        return True

    z_ancestors = dag.ancestors_of(Z)
    # "up": arrived from a child (moving against an edge); "down": arrived from a parent
    frontier = [(x, "up") for x in X]
    visited = set()
    while frontier:
        node, direction = frontier.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node in Y:
            return False
        if direction == "up":
            if node in Z:
                continue
            frontier.extend((p, "up") for p in dag._parents[node])
            frontier.extend((c, "down") for c in dag._children[node])
        else:
            if node not in Z:
                frontier.extend((c, "down") for c in dag._children[node])
            if node in z_ancestors:
                frontier.extend((p, "up") for p in dag._parents[node])
    return True


def is_valid_backdoor_set(dag: CausalDag, treatment: str, outcome: str, Z: Iterable[str]) -> bool:
    Z = set(Z)
    if Z & dag.descendants(treatment) or treatment in Z or outcome in Z:
        return False
    return d_separated(dag.without_outgoing(treatment), {treatment}, {outcome}, Z)


def backdoor_sets(dag: CausalDag, treatment: str, outcome: str, max_size: int = 4) -> list[tuple[str, ...]]:
    """All minimal valid adjustment sets with at most ``max_size`` members.

    Ordered by size, then lexicographically. ``[()]`` means no adjustment is needed.
    """
    for n in (treatment, outcome):
        if n not in dag.roles:
            raise DataError(f"node {n!r} is not in the DAG")
    if treatment == outcome:
        raise DataError("treatment and outcome must differ")
    descendants = dag.descendants(treatment)
    candidates = sorted(set(dag.nodes) - {treatment, outcome} - descendants)
    pruned = dag.without_outgoing(treatment)
    found: list[tuple[str, ...]] = []
    for size in range(0, max_size + 1):
        for Z in itertools.combinations(candidates, size):
            if any(set(f) <= set(Z) for f in found):
                continue
            if d_separated(pruned, {treatment}, {outcome}, set(Z)):
                found.append(Z)
    return found


def build_dag(
    importance,
    structural_edges: Sequence[tuple[str, str]] = (),
    tau: float = 0.10,
    rcps: Iterable[str] | None = None,
    context: Iterable[str] = (),
    include_context: bool = False,
    deny_edges: Iterable[tuple[str, str]] = (),
    declared_edges: Iterable[tuple[str, str]] = (),
) -> CausalDag:
    """Causal DAG with an RCP -> KPI edge wherever the normalized share reaches ``tau``.

    Features not listed in ``context`` are treated as RCPs unless ``rcps`` is
    given. ``declared_edges`` are added and ``deny_edges`` removed regardless of
    the shares; ``structural_edges`` are always kept.
    """
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    context = set(context)
    rows = list(importance)
    rcp_set = set(rcps) if rcps is not None else {r.feature for r in rows} - context
    roles: dict[str, str] = {}
    for r in rows:
        roles.setdefault(r.kpi, "kpi")
        if r.feature in rcp_set:
            roles.setdefault(r.feature, "rcp")
        elif r.feature in context and include_context:
            roles.setdefault(r.feature, "context")
    for p in rcp_set:
        roles.setdefault(p, "rcp")
    for u, v in list(structural_edges) + list(declared_edges):
        for n in (u, v):
            if n not in roles:
                roles[n] = "rcp"
    deny = {tuple(e) for e in deny_edges}
    edges = set()
    for r in rows:
        if r.normalized_share >= tau and r.feature in roles and roles[r.feature] in ("rcp", "context"):
            edges.add((r.feature, r.kpi))
    edges |= {tuple(e) for e in declared_edges}
    edges -= deny
    for u, v in structural_edges:
        if roles.get(u) != "rcp" or roles.get(v) != "rcp":
            raise DataError(f"structural edge {u}->{v} must join two RCPs")
    return CausalDag(roles, edges, [tuple(e) for e in structural_edges])


class ConflictGraph:
    """Tripartite directed graph: xApps control RCPs, RCPs influence KPIs and other RCPs."""

    def __init__(self, xapps: Sequence[XApp], rcps: Iterable[str], kpis: Iterable[str], edges: Iterable[tuple[str, str, str]]):
        self.xapps = {a.id: a for a in xapps}
        if len(self.xapps) != len(xapps):
            raise DataError("duplicate xApp ids")
        self.rcps = frozenset(rcps)
        self.kpis = frozenset(kpis)
        ids = list(self.xapps) + list(self.rcps) + list(self.kpis)
        if len(set(ids)) != len(ids):
            raise DataError("node ids must be unique across xApps, RCPs and KPIs")
        self.edges = frozenset(edges)
        sig = {CONTROL: (set(self.xapps), self.rcps), INFLUENCE: (self.rcps, self.kpis), STRUCTURAL: (self.rcps, self.rcps)}
        for u, v, kind in self.edges:
            if kind not in sig:
                raise DataError(f"unknown edge kind {kind!r}")
            src, dst = sig[kind]
            if u not in src or v not in dst:
                raise DataError(f"{kind} edge {u}->{v} violates the node-type signature")

    @classmethod
    def from_scenario(cls, xapps: Sequence[XApp], dag: CausalDag) -> "ConflictGraph":
        rcps = {n for n, r in dag.roles.items() if r == "rcp"}
        kpis = {n for n, r in dag.roles.items() if r == "kpi"}
        edges = set()
        for a in xapps:
            for p in a.controls:
                if p not in rcps:
                    raise DataError(f"xApp {a.id!r} controls unknown RCP {p!r}")
                edges.add((a.id, p, CONTROL))
            for k in a.targets:
                if k not in kpis:
                    raise DataError(f"xApp {a.id!r} targets unknown KPI {k!r}")
        for u, v in dag.edges:
            if u in rcps and v in kpis:
                edges.add((u, v, INFLUENCE))
            elif u in rcps and v in rcps:
                edges.add((u, v, STRUCTURAL))
        return cls(list(xapps), rcps, kpis, edges)

    def controllers(self, rcp: str) -> list[str]:
        return sorted(u for u, v, k in self.edges if k == CONTROL and v == rcp)

    def controlled_by(self, xapp: str) -> list[str]:
        return sorted(v for u, v, k in self.edges if k == CONTROL and u == xapp)


@dataclass(frozen=True)
class Finding:
    kind: str
    participants: tuple[str, str]
    rcps: tuple[str, ...]
    kpi: str | None = None
    path: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "participants": list(self.participants),
            "rcps": list(self.rcps),
            "kpi": self.kpi,
            "path": list(self.path),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Finding":
        return cls(d["kind"], tuple(d["participants"]), tuple(d["rcps"]), d.get("kpi"), tuple(d.get("path", ())))

    def effect_pairs(self) -> list[tuple[str, str]]:
        """(rcp, kpi) pairs whose causal effect quantifies this finding."""
        if self.kind == "direct" or self.kpi is None:
            return []
        return [(p, self.kpi) for p in self.rcps]


_KIND_ORDER = {"direct": 0, "indirect": 1, "implicit": 2}


@dataclass
class ConflictReport:
    findings: list[Finding] = field(default_factory=list)

    def of_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]

    def to_dict(self) -> dict:
        return {"findings": [f.to_dict() for f in self.findings]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConflictReport":
        return cls([Finding.from_dict(f) for f in d["findings"]])


def classify_conflicts(graph: ConflictGraph, dag: CausalDag) -> ConflictReport:
    for n, role in dag.roles.items():
        if role == "rcp" and n not in graph.rcps:
            raise DataError(f"DAG RCP {n!r} missing from the conflict graph")
    kpis_of = {p: sorted(v for u, v in dag.edges if u == p and dag.roles.get(v) == "kpi") for p in graph.rcps if p in dag.roles}
    found: set[Finding] = set()
    xids = sorted(graph.xapps)
    for a_i, a_j in itertools.combinations(xids, 2):
        ctrl_i, ctrl_j = graph.controlled_by(a_i), graph.controlled_by(a_j)
        for p in sorted(set(ctrl_i) & set(ctrl_j)):
            found.add(Finding("direct", (a_i, a_j), (p,)))
        for p_m in ctrl_i:
            for p_n in ctrl_j:
                if p_m == p_n:
                    continue
                for k in sorted(set(kpis_of.get(p_m, ())) & set(kpis_of.get(p_n, ()))):
                    found.add(Finding("indirect", (a_i, a_j), tuple(sorted((p_m, p_n))), k))
    for a_i in xids:
        for a_j in xids:
            if a_i == a_j:
                continue
            for p_m in graph.controlled_by(a_i):
                for p_n in graph.controlled_by(a_j):
                    if p_m == p_n or (p_m, p_n) not in dag.edges:
                        continue
                    for k_z in kpis_of.get(p_n, ()):
                        if any(k_y != k_z for k_y in kpis_of.get(p_m, ())):
                            found.add(Finding("implicit", (a_i, a_j), (p_m, p_n), k_z, (p_m, p_n, k_z)))
    ordered = sorted(found, key=lambda f: (f.participants, _KIND_ORDER[f.kind], f.rcps, f.kpi or "", f.path))
    return ConflictReport(ordered)


_SHAPES = {"xapp": "box", "rcp": "ellipse", "kpi": "doubleoctagon", "context": "note"}
_STYLES = {CONTROL: "solid", INFLUENCE: "bold", STRUCTURAL: "dashed"}


def _q(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(obj, name: str = "G") -> str:
    """GraphViz DOT text for a :class:`ConflictGraph` or :class:`CausalDag`, one cluster per node role."""
    if isinstance(obj, ConflictGraph):
        groups = {"xapp": sorted(obj.xapps), "rcp": sorted(obj.rcps), "kpi": sorted(obj.kpis)}
        edges = sorted(obj.edges)
    elif isinstance(obj, CausalDag):
        groups = {}
        for n, r in obj.roles.items():
            groups.setdefault(r, []).append(n)
        edges = sorted((u, v, STRUCTURAL if (u, v) in obj.structural else INFLUENCE) for u, v in obj.edges)
    else:
        raise TypeError(f"cannot render {type(obj).__name__} as DOT")
    groups = {r: ns for r, ns in groups.items() if ns}
    if not groups and not edges:
        return f"digraph {name} {{ }}\n"
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for role in ("xapp", "rcp", "context", "kpi"):
        if role not in groups:
            continue
        lines.append(f"  subgraph cluster_{role} {{")
        lines.append(f"    label={_q(role)};")
        for n in sorted(groups[role]):
            lines.append(f"    {_q(n)} [shape={_SHAPES[role]}];")
        lines.append("  }")
    for u, v, kind in edges:
        lines.append(f"  {_q(u)} -> {_q(v)} [style={_STYLES[kind]}, label={_q(kind)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def report_json(report: ConflictReport, dag: CausalDag, **extra) -> str:
    doc = {"dag": dag.to_dict(), **report.to_dict(), **extra}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
