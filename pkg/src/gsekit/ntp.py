"""Network topology processor: node-breaker model -> bus-branch model.

Three steps: raw data consistency checks, bus section processing (merge
nodes joined by closed switches), and connectivity analysis (label islands,
reassign meters to buses).  The full model is always reprocessed; there is
no incremental tracking mode.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nbmodel import MeasurementSet, MeterKind, NBCase, Status


class UnionFind:
    """Disjoint sets over arbitrary hashable keys, with path compression."""

    def __init__(self, keys=()):
        self.parent = {k: k for k in keys}

    def add(self, k):
        self.parent.setdefault(k, k)

    def find(self, k):
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic representative: keep the smaller key as root
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra
        return ra

    def groups(self) -> dict:
        out = {}
        for k in self.parent:
            out.setdefault(self.find(k), []).append(k)
        return out


@dataclass(frozen=True)
class BusBranch:
    """A branch or transformer lifted to bus endpoints."""

    device: str  # "branch" | "transformer"
    id: int
    from_bus: int
    to_bus: int


@dataclass(frozen=True)
class BusMeter:
    """A meter relocated onto the bus-branch model; keeps its original node."""

    id: str
    kind: MeterKind
    bus: int
    node: int
    branch: int | None = None


@dataclass(frozen=True)
class BBModel:
    """Bus-branch model produced from a node-breaker case plus statuses.

    ``node_to_bus`` maps every node id onto a dense bus index; two nodes
    share a bus exactly when a path of closed switches joins them.  Islands
    are connected components of the bus graph under branches/transformers;
    an island is flagged energized when it hosts at least one PMU (the only
    synchronized anchor this model knows about).
    """

    node_to_bus: dict[int, int]
    buses: tuple[tuple[int, ...], ...]  # node ids per bus, sorted
    branches: tuple[BusBranch, ...]
    shunt_buses: dict[int, int]  # shunt id -> bus
    meters: tuple[BusMeter, ...]
    island_of_bus: tuple[int, ...]
    energized: tuple[bool, ...]  # per island

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_islands(self) -> int:
        return len(self.energized)

    def partition(self) -> frozenset[frozenset[int]]:
        """Node partition induced by the buses (id-free, for comparisons)."""
        return frozenset(frozenset(b) for b in self.buses)


def bus_section_processing(case: NBCase, statuses: dict[int, Status]) -> dict[int, int]:
    """Merge nodes connected by closed switches; return node id -> bus index.

    ``statuses`` must cover every switch of the case. Bus indices are dense
    and ordered by the smallest node id they contain.
    """
    missing = [s.id for s in case.switches if s.id not in statuses]
    if missing:
        raise ValueError(f"missing status for switch(es): {missing}")
    uf = UnionFind(case.node_ids)
    for s in case.switches:
        if statuses[s.id] == Status.CLOSED:
            uf.union(s.from_node, s.to_node)
    roots = sorted({uf.find(n) for n in case.node_ids})
    bus_of_root = {r: i for i, r in enumerate(roots)}
    return {n: bus_of_root[uf.find(n)] for n in case.node_ids}


def connectivity_analysis(case: NBCase, node_to_bus: dict[int, int]) -> BBModel:
    """Lift devices/meters onto buses and label islands of the bus graph."""
    n_buses = max(node_to_bus.values()) + 1 if node_to_bus else 0
    members = [[] for _ in range(n_buses)]
    for n, b in node_to_bus.items():
        members[b].append(n)
    buses = tuple(tuple(sorted(m)) for m in members)

    bb = []
    uf = UnionFind(range(n_buses))
    for br in case.branches:
        fb, tb = node_to_bus[br.from_node], node_to_bus[br.to_node]
        bb.append(BusBranch("branch", br.id, fb, tb))
        uf.union(fb, tb)
    for tr in case.transformers:
        fb, tb = node_to_bus[tr.from_node], node_to_bus[tr.to_node]
        bb.append(BusBranch("transformer", tr.id, fb, tb))
        uf.union(fb, tb)

    island_roots = sorted({uf.find(b) for b in range(n_buses)})
    island_of_root = {r: i for i, r in enumerate(island_roots)}
    island_of_bus = tuple(island_of_root[uf.find(b)] for b in range(n_buses))

    meters = tuple(
        BusMeter(m.id, m.kind, node_to_bus[m.node], m.node, m.branch) for m in case.meters
    )
    energized = [False] * len(island_roots)
    for m in meters:
        if m.kind == MeterKind.PMU_INJECTION:
            energized[island_of_bus[m.bus]] = True

    return BBModel(
        node_to_bus=dict(node_to_bus),
        buses=buses,
        branches=tuple(bb),
        shunt_buses={sh.id: node_to_bus[sh.node] for sh in case.shunts},
        meters=meters,
        island_of_bus=island_of_bus,
        energized=tuple(energized),
    )


def process(case: NBCase, statuses: dict[int, Status]) -> BBModel:
    """Full topology processing: bus merge followed by connectivity analysis."""
    return connectivity_analysis(case, bus_section_processing(case, statuses))


@dataclass(frozen=True)
class ConsistencyWarning:
    """One raw-data check violation; checks never abort processing."""

    kind: str
    subject: str
    detail: str

    def __str__(self):
        return f"{self.kind} @ {self.subject}: {self.detail}"


def _conductive_degree(case: NBCase) -> dict[int, int]:
    deg = {n: 0 for n in case.node_ids}
    for s in case.switches:
        deg[s.from_node] += 1
        deg[s.to_node] += 1
    for b in case.branches:
        deg[b.from_node] += 1
        deg[b.to_node] += 1
    for t in case.transformers:
        deg[t.from_node] += 1
        deg[t.to_node] += 1
    return deg


def raw_data_checks(
    case: NBCase,
    meas: MeasurementSet,
    voltage_tol: float = 0.05,
    flow_tol: float = 0.01,
) -> list[ConsistencyWarning]:
    """Cheap physical plausibility checks on a snapshot before estimation.

    Closed switches should see (near) zero voltage across them; open
    switches should carry (near) zero flow.  Both are checked only where the
    snapshot actually measures the relevant quantity.
    """
    from .nbmodel import effective_statuses

    warnings = []
    statuses = effective_statuses(case, meas)
    deg = _conductive_degree(case)

    pmu_at = {}
    rtu_at = {}
    for m in case.meters:
        r = meas.reading_for(m)
        if r is None:
            continue
        if m.kind == MeterKind.PMU_INJECTION:
            pmu_at[m.node] = r
        elif m.kind == MeterKind.RTU_INJECTION:
            rtu_at[m.node] = r

    for s in case.switches:
        st = statuses.get(s.id)
        if st == Status.CLOSED:
            pi, pj = pmu_at.get(s.from_node), pmu_at.get(s.to_node)
            if pi is not None and pj is not None:
                dv = abs(complex(pi.v_re - pj.v_re, pi.v_im - pj.v_im))
                if dv > voltage_tol:
                    warnings.append(ConsistencyWarning(
                        "closed-switch voltage", f"switch {s.id}",
                        f"PMU voltages across closed switch differ by {dv:.4f} p.u.",
                    ))
            ri, rj = rtu_at.get(s.from_node), rtu_at.get(s.to_node)
            if ri is not None and rj is not None:
                dv = abs(ri.v_mag - rj.v_mag)
                if dv > voltage_tol:
                    warnings.append(ConsistencyWarning(
                        "closed-switch voltage", f"switch {s.id}",
                        f"RTU |V| across closed switch differ by {dv:.4f} p.u.",
                    ))
        elif st == Status.OPEN:
            # a node dangling behind an open switch should show no injection
            for node in (s.from_node, s.to_node):
                if deg[node] != 1:
                    continue
                p = pmu_at.get(node)
                if p is not None:
                    mag = abs(complex(p.i_re, p.i_im))
                    if mag > flow_tol:
                        warnings.append(ConsistencyWarning(
                            "open-switch flow", f"switch {s.id}",
                            f"PMU at dangling node {node} injects {mag:.4f} p.u. current",
                        ))
                r = rtu_at.get(node)
                if r is not None and max(abs(r.p), abs(r.q)) > flow_tol:
                    warnings.append(ConsistencyWarning(
                        "open-switch flow", f"switch {s.id}",
                        f"RTU at dangling node {node} reports nonzero injection "
                        f"(P={r.p:.4f}, Q={r.q:.4f})",
                    ))
    return warnings
