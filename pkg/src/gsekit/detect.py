"""Post-solution anomaly identification.

Switch hypothesis tests (an open switch should carry no current, a closed
switch should see no voltage across it), gross-error flags on continuous
meters from their noise magnitudes, and a purely topological scan for
structures whose status errors are undetectable or only localizable up to
an equivalence group.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nbmodel import MeterKind, NBCase, Status
from .ntp import BBModel, process
from .solver import WlavSolution

TAU_CURRENT = 0.01
TAU_VOLTAGE = 0.01
CONTINUOUS_NOISE_LIMIT = 0.1  # p.u.; an order below 1 p.u. gross errors


@dataclass(frozen=True)
class SwitchReading:
    """Per-switch quantities evaluated at the solution.

    ``v_across`` is |V_i - V_j|; ``current`` the magnitude of the total
    device current (admittance part plus slack); ``noise`` the slack
    magnitude.  For a reported-open switch the current IS the slack.
    """

    switch_id: int
    reported: Status
    v_across: float
    current: float
    noise: float


@dataclass(frozen=True)
class Alarm:
    """One anomaly flag with the evidence that raised it."""

    target: object  # switch id or meter id
    kind: str  # "open_should_close" | "closed_should_open" | "bad_continuous"
    evidence: float
    threshold: float
    detail: str = ""

    def __str__(self):
        return f"{self.kind} @ {self.target}: {self.detail or self.evidence}"


def switch_readings(solution: WlavSolution, case: NBCase) -> list[SwitchReading]:
    """Evaluate voltage across, current through, and slack of every switch."""
    circuit = solution.circuit
    vec = solution.full_vector()
    cat = circuit.catalog
    out = []
    for s in case.switches:
        status = circuit.statuses[s.id]
        dv = cat.voltage(vec, s.from_node) - cat.voltage(vec, s.to_node)
        n_sw = cat.noise_value(vec, "sw", s.id)
        if status == Status.CLOSED:
            current = dv / complex(0.0, s.reactance) + n_sw
        else:
            current = n_sw
        out.append(SwitchReading(
            switch_id=s.id,
            reported=status,
            v_across=abs(dv),
            current=abs(current),
            noise=abs(n_sw),
        ))
    return out


def hypothesis_test(
    readings: list[SwitchReading],
    tau_current: float = TAU_CURRENT,
    tau_voltage: float = TAU_VOLTAGE,
) -> list[Alarm]:
    """Flag switches whose estimated physics contradicts their reported status."""
    alarms = []
    for r in readings:
        if r.reported == Status.OPEN and r.current > tau_current:
            alarms.append(Alarm(
                r.switch_id, "open_should_close", r.current, tau_current,
                f"|I|={r.current:.4f} > {tau_current} through a reported-open switch",
            ))
        elif r.reported == Status.CLOSED and r.v_across > tau_voltage:
            alarms.append(Alarm(
                r.switch_id, "closed_should_open", r.v_across, tau_voltage,
                f"|V|={r.v_across:.4f} > {tau_voltage} across a reported-closed switch",
            ))
    return alarms


def flag_bad_continuous(
    solution: WlavSolution, noise_limit: float = CONTINUOUS_NOISE_LIMIT
) -> list[Alarm]:
    """Flag continuous meters whose slack magnitude exceeds ``noise_limit``.

    The same rule applies to RTU injection, line-flow, and both PMU noise
    pairs; the evidence is the largest complex slack magnitude of the meter.
    """
    vec = solution.full_vector()
    cat = solution.circuit.catalog
    seen: dict[str, float] = {}
    for label in cat.noise_labels:
        if label.kind == "sw" or label.part != "R":
            continue
        mag = abs(cat.noise_value(vec, label.kind, label.device))
        key = label.device
        seen[key] = max(seen.get(key, 0.0), mag)
    alarms = []
    for meter_id, mag in seen.items():
        if mag > noise_limit:
            alarms.append(Alarm(
                meter_id, "bad_continuous", mag, noise_limit,
                f"|n|={mag:.4f} > {noise_limit} on meter {meter_id}",
            ))
    return alarms


@dataclass(frozen=True)
class DetectabilityWarning:
    """A structural pattern limiting what any estimator can identify."""

    pattern: str  # "equivalent_line_switches" | "switch_cycle" | "stub_switch"
    switches: tuple[int, ...]
    detail: str

    def __str__(self):
        return f"{self.pattern} {self.switches}: {self.detail}"


def detectability_scan(case: NBCase) -> list[DetectabilityWarning]:
    """Scan the case topology for known undetectable/mis-localizable patterns.

    (a) a branch with a switch in series at each end (disconnecting either
    one has the same effect), (b) cycles made entirely of switches, and
    (c) a switch feeding a degree-one stub node (no effect when the stub
    device is idle).  Purely topological: no measurement data involved.
    """
    warnings = []

    degree = {n: 0 for n in case.node_ids}
    switches_at = {n: [] for n in case.node_ids}
    for s in case.switches:
        degree[s.from_node] += 1
        degree[s.to_node] += 1
        switches_at[s.from_node].append(s)
        switches_at[s.to_node].append(s)
    for b in case.branches:
        degree[b.from_node] += 1
        degree[b.to_node] += 1
    for t in case.transformers:
        degree[t.from_node] += 1
        degree[t.to_node] += 1

    # (a) switches in series at both ends of one branch
    for br in case.branches:
        if degree[br.from_node] == 2 and degree[br.to_node] == 2:
            end_sw = switches_at[br.from_node]
            far_sw = switches_at[br.to_node]
            if len(end_sw) == 1 and len(far_sw) == 1:
                pair = (end_sw[0].id, far_sw[0].id)
                warnings.append(DetectabilityWarning(
                    "equivalent_line_switches", tuple(sorted(pair)),
                    f"branch {br.id} has a series switch at each end; a wrong status "
                    f"on either is equivalent to one on the other",
                ))

    # (b) cycles consisting only of switches
    from .ntp import UnionFind

    uf = UnionFind(case.node_ids)
    adj: dict[int, list[tuple[int, int]]] = {n: [] for n in case.node_ids}
    for s in sorted(case.switches, key=lambda s: s.id):
        if uf.find(s.from_node) == uf.find(s.to_node):
            cycle = _switch_path(adj, s.from_node, s.to_node) + [s.id]
            warnings.append(DetectabilityWarning(
                "switch_cycle", tuple(sorted(set(cycle))),
                "switches form a cycle; one wrong status inside it can be "
                "mis-localized onto the others",
            ))
        else:
            uf.union(s.from_node, s.to_node)
        adj[s.from_node].append((s.to_node, s.id))
        adj[s.to_node].append((s.from_node, s.id))

    # (c) switch into a degree-one node (single stub device)
    for s in case.switches:
        for node in (s.from_node, s.to_node):
            if degree[node] == 1:
                warnings.append(DetectabilityWarning(
                    "stub_switch", (s.id,),
                    f"switch {s.id} is the only connection of node {node}; its "
                    f"status has no effect while the stub injects nothing",
                ))
                break
    return warnings


def _switch_path(adj, start, goal):
    """Switch ids along one path start->goal in the switch-only graph (BFS)."""
    from collections import deque

    prev = {start: (None, None)}
    dq = deque([start])
    while dq:
        u = dq.popleft()
        if u == goal:
            break
        for v, sid in adj[u]:
            if v not in prev:
                prev[v] = (u, sid)
                dq.append(v)
    path = []
    node = goal
    while prev.get(node, (None, None))[0] is not None:
        u, sid = prev[node]
        path.append(sid)
        node = u
    return path


def pattern_groups(case: NBCase) -> list[frozenset[int]]:
    """Switch-id groups from the detectability scan, merged when overlapping."""
    groups = [set(w.switches) for w in detectability_scan(case)]
    merged: list[set] = []
    for g in groups:
        hit = [m for m in merged if m & g]
        for m in hit:
            g |= m
            merged.remove(m)
        merged.append(g)
    return [frozenset(g) for g in merged]


def corrected_topology(
    case: NBCase, statuses: dict[int, Status], alarms: list[Alarm]
) -> tuple[dict[int, Status], BBModel]:
    """Flip every alarmed switch status and reprocess the topology.

    Alarms are advisory; this is the explicit actuation step.  Only
    switch-status alarms participate.
    """
    corrected = dict(statuses)
    for a in alarms:
        if a.kind in ("open_should_close", "closed_should_open"):
            corrected[a.target] = corrected[a.target].flipped()
    return corrected, process(case, corrected)
