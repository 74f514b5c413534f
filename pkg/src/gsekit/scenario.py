"""Synthetic scenarios: ground truth, measurement synthesis, error injection.

A scenario owns a case plus the physical truth behind it: constant-admittance
loads, current-source generators, and the case's filed switch statuses taken
as the true ones.  Ground truth is the exact solution of that linear network
(closed switches modeled with their low reactance, open switches absent), so
a circuit stamped from error-free measurements is satisfied exactly by the
true state with zero noise.

Measured snapshots add seeded Gaussian noise to every continuous value,
flip the reported status of selected switches, and offset selected RTUs by
a gross deviation.  RTU meters measure the load/generator injection at
their node; shunts remain part of the network model and are not folded
into RTU readings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FormatError, SingularNetworkError
from .nbmodel import (
    Branch,
    MeasurementSet,
    MeterKind,
    MeterPlacement,
    NBCase,
    NodeSection,
    PmuReading,
    RtuReading,
    Shunt,
    Status,
    Switch,
    Transformer,
    _iter_section_lines,
    _kv,
    _parse_float,
    _parse_int,
    _parse_status,
    parse_case,
    serialize_case,
)
from .solver import SolverConfig

DEFAULT_SIGMA = 0.001
DEFAULT_BAD_RTU_DEVIATION = 1.0  # p.u., added to both P and Q


@dataclass(frozen=True)
class ScenarioSpec:
    """A case plus its physical truth and the errors to inject.

    The case's filed switch statuses are the true ones; ``flips`` lists the
    switches whose REPORTED status will be wrong in the synthesized
    snapshot.  ``bad_rtus`` maps meter ids to the deviation added to their
    measured P and Q.
    """

    case: NBCase
    loads: dict[int, complex] = field(default_factory=dict)
    gens: dict[int, complex] = field(default_factory=dict)
    sigma: float = DEFAULT_SIGMA
    sigma_by_kind: dict[MeterKind, float] = field(default_factory=dict)
    flips: tuple[int, ...] = ()
    bad_rtus: tuple[tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or any(s < 0 for s in self.sigma_by_kind.values()):
            raise ValueError("noise sigma must be nonnegative")
        node_ids = set(self.case.node_ids)
        for node in list(self.loads) + list(self.gens):
            if node not in node_ids:
                raise ValueError(f"load/generator at unknown node {node}")
        switch_ids = {s.id for s in self.case.switches}
        for sid in self.flips:
            if sid not in switch_ids:
                raise ValueError(f"injected flip references unknown switch {sid}")
        rtu_ids = {
            m.id for m in self.case.meters
            if m.kind in (MeterKind.RTU_INJECTION, MeterKind.RTU_LINEFLOW)
        }
        for mid, _ in self.bad_rtus:
            if mid not in rtu_ids:
                raise ValueError(f"injected bad RTU references unknown RTU meter {mid}")

    def sigma_for(self, kind: MeterKind) -> float:
        return self.sigma_by_kind.get(kind, self.sigma)

    def true_statuses(self) -> dict[int, Status]:
        return {s.id: s.status for s in self.case.switches}


@dataclass
class GroundTruth:
    """Exact electrical state and exact (pre-noise) meter values."""

    voltages: dict[int, complex]
    switch_currents: dict[int, complex]
    branch_currents: dict[int, complex]  # current into the branch at its from end
    exact: MeasurementSet
    kcl_residual: float


def _network_matrix(case: NBCase, loads, gens, statuses):
    """Complex nodal admittance matrix and injection vector of the true network."""
    idx = case.node_index
    n = len(case.nodes)
    rows, cols, vals = [], [], []

    def add(i, j, y):
        rows.append(idx[i])
        cols.append(idx[j])
        vals.append(y)

    for b in case.branches:
        y = complex(b.conductance, b.susceptance)
        ysh = complex(0.0, b.charging / 2.0)
        add(b.from_node, b.from_node, y + ysh)
        add(b.to_node, b.to_node, y + ysh)
        add(b.from_node, b.to_node, -y)
        add(b.to_node, b.from_node, -y)
    for t in case.transformers:
        y = complex(t.conductance, t.susceptance)
        ratio = t.tap * np.exp(1j * t.phase_shift)
        add(t.from_node, t.from_node, y / t.tap**2)
        add(t.from_node, t.to_node, -y / np.conj(ratio))
        add(t.to_node, t.from_node, -y / ratio)
        add(t.to_node, t.to_node, y)
    for sh in case.shunts:
        add(sh.node, sh.node, complex(sh.conductance, sh.susceptance))
    for s in case.switches:
        if statuses[s.id] == Status.CLOSED:
            y = 1.0 / complex(0.0, s.reactance)
            add(s.from_node, s.from_node, y)
            add(s.to_node, s.to_node, y)
            add(s.from_node, s.to_node, -y)
            add(s.to_node, s.from_node, -y)
    for node, y in loads.items():
        add(node, node, y)

    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    inj = np.zeros(n, dtype=complex)
    for node, cur in gens.items():
        inj[idx[node]] += cur
    return Y, inj


def _conductive_islands(case: NBCase, statuses) -> list[set[int]]:
    from .ntp import UnionFind

    uf = UnionFind(case.node_ids)
    for b in case.branches:
        uf.union(b.from_node, b.to_node)
    for t in case.transformers:
        uf.union(t.from_node, t.to_node)
    for s in case.switches:
        if statuses[s.id] == Status.CLOSED:
            uf.union(s.from_node, s.to_node)
    return [set(g) for g in uf.groups().values()]


def solve_network(case: NBCase, loads, gens, statuses) -> dict[int, complex]:
    """Voltages of the linear network; islands without sources sit at zero.

    Raises SingularNetworkError when an island with generation has no
    solvable admittance structure (a floating island).
    """
    Y, inj = _network_matrix(case, loads, gens, statuses)
    idx = case.node_index
    v = np.zeros(len(case.nodes), dtype=complex)
    for island in _conductive_islands(case, statuses):
        members = sorted(idx[n] for n in island)
        if not any(gens.get(n, 0j) != 0 for n in island):
            continue  # no source: dead island, stays at 0 V
        sub = Y[members][:, members].tocsc()
        rhs = inj[members]
        try:
            sol = spla.splu(sub).solve(rhs)
        except RuntimeError as exc:
            raise SingularNetworkError(
                f"island containing node {min(island)} is floating: {exc}"
            ) from None
        if not np.all(np.isfinite(sol)):
            raise SingularNetworkError(
                f"island containing node {min(island)} is floating (singular solve)"
            )
        resid = float(np.max(np.abs(sub @ sol - rhs)))
        if resid > 1e-8:
            raise SingularNetworkError(
                f"island containing node {min(island)} is numerically floating "
                f"(residual {resid:.2e})"
            )
        v[members] = sol
    return {n: complex(v[idx[n]]) for n in case.node_ids}


def solve_ground_truth(spec: ScenarioSpec) -> GroundTruth:
    """Solve the true network and derive every meter's exact reading."""
    case = spec.case
    statuses = spec.true_statuses()
    voltages = solve_network(case, spec.loads, spec.gens, statuses)

    Y, inj = _network_matrix(case, spec.loads, spec.gens, statuses)
    idx = case.node_index
    varr = np.array([voltages[n] for n in case.node_ids])
    kcl = float(np.max(np.abs(Y @ varr - inj))) if len(varr) else 0.0

    def drawn_current(node: int) -> complex:
        return spec.loads.get(node, 0j) * voltages[node] - spec.gens.get(node, 0j)

    rtu, lineflow, pmu = {}, {}, {}
    for m in case.meters:
        vk = voltages[m.node]
        if m.kind == MeterKind.RTU_INJECTION:
            s_drawn = vk * np.conj(drawn_current(m.node))
            rtu[m.id] = RtuReading(float(s_drawn.real), float(s_drawn.imag), abs(vk))
        elif m.kind == MeterKind.PMU_INJECTION:
            i_inj = -drawn_current(m.node)
            pmu[m.id] = PmuReading(float(vk.real), float(vk.imag), float(i_inj.real), float(i_inj.imag))
        else:
            br = case.branch_by_id[m.branch]
            other = br.to_node if m.node == br.from_node else br.from_node
            y = complex(br.conductance, br.susceptance)
            i_end = y * (vk - voltages[other]) + complex(0.0, br.charging / 2.0) * vk
            s_flow = vk * np.conj(i_end)
            lineflow[m.id] = RtuReading(float(s_flow.real), float(s_flow.imag), abs(vk))

    switch_currents = {}
    for s in case.switches:
        if statuses[s.id] == Status.CLOSED:
            switch_currents[s.id] = (
                voltages[s.from_node] - voltages[s.to_node]
            ) / complex(0.0, s.reactance)
        else:
            switch_currents[s.id] = 0j
    branch_currents = {}
    for b in case.branches:
        y = complex(b.conductance, b.susceptance)
        branch_currents[b.id] = y * (voltages[b.from_node] - voltages[b.to_node]) + complex(
            0.0, b.charging / 2.0
        ) * voltages[b.from_node]

    exact = MeasurementSet(
        timestamp="truth", rtu=rtu, lineflow=lineflow, pmu=pmu, statuses=dict(statuses)
    )
    return GroundTruth(voltages, switch_currents, branch_currents, exact, kcl)


def synthesize_measurements(truth: GroundTruth, spec: ScenarioSpec) -> MeasurementSet:
    """Exact values plus seeded Gaussian noise, injected flips, and bad RTUs.

    The draw order is fixed (meters in case order, then each reading's
    fields), so a given spec and seed always produce the same snapshot.
    """
    rng = np.random.default_rng(spec.seed)
    bad = dict(spec.bad_rtus)

    def noisy(value: float, sigma: float) -> float:
        return float(value + rng.normal(0.0, sigma)) if sigma > 0 else float(value)

    rtu, lineflow, pmu = {}, {}, {}
    for m in spec.case.meters:
        if m.kind == MeterKind.PMU_INJECTION:
            r = truth.exact.pmu[m.id]
            sig = spec.sigma_for(m.kind)
            pmu[m.id] = PmuReading(
                noisy(r.v_re, sig), noisy(r.v_im, sig), noisy(r.i_re, sig), noisy(r.i_im, sig)
            )
            continue
        exact = truth.exact.rtu[m.id] if m.kind == MeterKind.RTU_INJECTION else truth.exact.lineflow[m.id]
        sig = spec.sigma_for(m.kind)
        dev = bad.get(m.id, 0.0)
        reading = RtuReading(
            noisy(exact.p, sig) + dev,
            noisy(exact.q, sig) + dev,
            max(noisy(exact.v_mag, sig), 1e-6),
        )
        if m.kind == MeterKind.RTU_INJECTION:
            rtu[m.id] = reading
        else:
            lineflow[m.id] = reading

    statuses = spec.true_statuses()
    for sid in spec.flips:
        statuses[sid] = statuses[sid].flipped()

    return MeasurementSet(
        timestamp=f"seed{spec.seed}", rtu=rtu, lineflow=lineflow, pmu=pmu, statuses=statuses
    )


def topology_equivalent(
    spec: ScenarioSpec,
    statuses_a: dict[int, Status],
    statuses_b: dict[int, Status],
    tol: float = 2e-3,
) -> bool:
    """True when both status vectors produce the same operating state.

    Solves the true physical network under each vector and compares
    voltages on every node energized under ``statuses_a``.  This is the
    meaningful notion of topology equality for mis-localized statuses
    inside detectability pattern groups.  The tolerance sits above the
    voltage differences a closed switch's small reactance introduces
    (~1e-4 p.u.) and below any real topology change (line drops, 1e-2+).
    """
    try:
        va = solve_network(spec.case, spec.loads, spec.gens, statuses_a)
        vb = solve_network(spec.case, spec.loads, spec.gens, statuses_b)
    except SingularNetworkError:
        return False
    for node, v in va.items():
        if abs(v) > 1e-6 and abs(v - vb[node]) > tol:
            return False
    return True


@dataclass
class AccuracyMetrics:
    mean_v_err: float
    mean_angle_err_deg: float
    max_v_err: float
    max_angle_err_deg: float
    rows: list  # (node, |V|_est, |V|_true, v_err, angle_err_deg)


def accuracy_metrics(
    est_voltages: dict[int, complex],
    truth: GroundTruth,
    case: NBCase | None = None,
    statuses: dict[int, Status] | None = None,
) -> AccuracyMetrics:
    """Voltage-magnitude and angle errors of an estimate against the truth.

    Nodes dead in the truth (|V| ~ 0) are excluded.  Islands without any
    PMU have no absolute angle reference; when ``case`` and ``statuses``
    are given, those islands are aligned by their mean angle difference
    before the error is taken.
    """
    aligned = dict(est_voltages)
    if case is not None and statuses is not None:
        pmu_nodes = {m.node for m in case.meters if m.kind == MeterKind.PMU_INJECTION}
        for island in _conductive_islands(case, statuses):
            if island & pmu_nodes:
                continue
            diffs = [
                np.angle(est_voltages[n]) - np.angle(truth.voltages[n])
                for n in island
                if abs(truth.voltages[n]) > 1e-6 and abs(est_voltages[n]) > 1e-9
            ]
            if diffs:
                rot = np.exp(-1j * float(np.mean(diffs)))
                for n in island:
                    aligned[n] = est_voltages[n] * rot

    rows = []
    for node, v_true in truth.voltages.items():
        if abs(v_true) <= 1e-6:
            continue
        v_est = aligned[node]
        v_err = abs(abs(v_est) - abs(v_true))
        dang = np.angle(v_est) - np.angle(v_true)
        dang = (dang + np.pi) % (2 * np.pi) - np.pi
        rows.append((node, abs(v_est), abs(v_true), v_err, abs(math.degrees(dang))))
    if not rows:
        return AccuracyMetrics(0.0, 0.0, 0.0, 0.0, [])
    v_errs = [r[3] for r in rows]
    a_errs = [r[4] for r in rows]
    return AccuracyMetrics(
        mean_v_err=float(np.mean(v_errs)),
        mean_angle_err_deg=float(np.mean(a_errs)),
        max_v_err=float(np.max(v_errs)),
        max_angle_err_deg=float(np.max(a_errs)),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# parametric case generator

@dataclass
class GeneratorOptions:
    """Knobs of the substation-template generator."""

    lineflow_density: float = 0.9
    selector_fraction: float = 0.14
    open_tie_fraction: float = 0.5
    sigma: float = DEFAULT_SIGMA
    pmu_sigma: float = 0.0005  # PMUs are an accuracy class above SCADA meters
    lineflow_sigma: float = 0.002  # CT/PT chains on lines are noisier than bus meters
    nominal_kv: float = 138.0
    base_mva: float = 100.0


def build_scenario(
    target_nodes: int = 52, seed: int = 0, options: GeneratorOptions | None = None
) -> ScenarioSpec:
    """Generate a connected node-breaker scenario of roughly ``target_nodes``.

    Each substation has two main sections joined by a bus coupler; every
    piece of equipment (line end, transformer end, generator, load, shunt)
    sits on its own bay node behind a breaker.  A ring of lines connects
    the substations, plus tie lines, some normally open at one end.  A few
    bays get a second (open) selector switch to the other main section.
    Meters: PMUs on generator nodes, RTUs on load and shunt nodes, and
    line-flow RTUs on a subset of lines adjacent to an RTU bus.
    """
    options = options or GeneratorOptions()
    rng = np.random.default_rng(seed)
    if target_nodes < 4:
        raise ValueError("need at least 4 nodes")

    n_subs = max(2, round(target_nodes / 6.5))
    budget = target_nodes - 2 * n_subs
    n_gens = max(1, round(n_subs * 5 / 8))
    n_shunts = max(1, n_subs // 8)
    ring = [(i, (i + 1) % n_subs) for i in range(n_subs)]
    if n_subs == 2:
        ring = ring[:1]

    n_loads_target = max(1, round(n_subs * 0.75))
    n_ties = max(0, (budget - n_gens - n_shunts - n_loads_target - 2 * len(ring)) // 2)
    tie_pairs = []
    if n_subs > 3:
        candidates = [
            (i, j)
            for i in range(n_subs)
            for j in range(i + 2, n_subs)
            if not (i == 0 and j == n_subs - 1)
        ]
        order = rng.permutation(len(candidates))
        tie_pairs = [candidates[k] for k in order[:n_ties]]
    # loads absorb the node budget left over by the realized tie count
    while tie_pairs and budget - 2 * (len(ring) + len(tie_pairs)) - n_gens - n_shunts < 1:
        tie_pairs.pop()
    n_loads = budget - 2 * (len(ring) + len(tie_pairs)) - n_gens - n_shunts
    if n_loads < 1:
        raise ValueError(f"target of {target_nodes} nodes is too small for {n_subs} substations")
    lines = ring + tie_pairs  # the first ring edge becomes the transformer
    use_transformer = n_subs >= 3

    # bay bookkeeping: list of (sub, role, payload) in creation order
    bays = []

    for li, (a, b) in enumerate(lines):
        bays.append((a, "line", li))
        bays.append((b, "line", li))
    gen_subs = [round(i * n_subs / n_gens) % n_subs for i in range(n_gens)]
    for i, s in enumerate(gen_subs):
        bays.append((s, "gen", i))
    load_subs = [(s + 1) % n_subs for s in range(n_loads)]
    for i, s in enumerate(load_subs):
        bays.append((s % n_subs, "load", i))
    for i in range(n_shunts):
        bays.append(((2 * i + 3) % n_subs, "shunt", i))

    # node numbering: per substation, mains first, then its bays
    nodes, node_id = [], 0
    mains = {}
    bay_node = {}
    per_sub = {s: [] for s in range(n_subs)}
    for bi, (s, role, payload) in enumerate(bays):
        per_sub[s].append(bi)
    for s in range(n_subs):
        m1, m2 = node_id + 1, node_id + 2
        node_id += 2
        mains[s] = (m1, m2)
        nodes.append(NodeSection(m1, f"S{s + 1}", options.nominal_kv, True))
        nodes.append(NodeSection(m2, f"S{s + 1}", options.nominal_kv, True))
        for bi in per_sub[s]:
            node_id += 1
            bay_node[bi] = node_id
            role = bays[bi][1]
            nodes.append(NodeSection(node_id, f"S{s + 1}", options.nominal_kv, role == "line"))

    switches = []
    sw_id = 0
    coupler_ids = {}
    bay_breaker = {}
    for s in range(n_subs):
        sw_id += 1
        coupler_ids[s] = sw_id
        switches.append(Switch(sw_id, mains[s][0], mains[s][1], Status.CLOSED))
    side_toggle = {s: 0 for s in range(n_subs)}
    bay_side = {}
    for bi, (s, role, payload) in enumerate(bays):
        side = side_toggle[s] % 2
        side_toggle[s] += 1
        bay_side[bi] = side
        sw_id += 1
        bay_breaker[bi] = sw_id
        switches.append(Switch(sw_id, bay_node[bi], mains[s][side], Status.CLOSED))

    # normally-open selector switches to the other main section
    n_selectors = max(0, round(options.selector_fraction * len(bays)))
    selector_bays = rng.permutation(len(bays))[:n_selectors]
    for bi in sorted(selector_bays):
        s = bays[bi][0]
        other_main = mains[s][1 - bay_side[bi]]
        sw_id += 1
        switches.append(Switch(sw_id, bay_node[bi], other_main, Status.OPEN))

    # open one end of some tie lines (reserve ties)
    n_open_ties = round(options.open_tie_fraction * len(tie_pairs))
    open_tie_lines = {len(ring) + k for k in range(int(n_open_ties))}
    line_end_bays = {}
    for bi, (s, role, li) in enumerate(bays):
        if role == "line":
            line_end_bays.setdefault(li, []).append(bi)
    for li in open_tie_lines:
        far = line_end_bays[li][1]
        k = next(i for i, sw in enumerate(switches) if sw.id == bay_breaker[far])
        switches[k] = replace(switches[k], status=Status.OPEN)

    branches, transformers = [], []
    for li, (a, b) in enumerate(lines):
        na = bay_node[line_end_bays[li][0]]
        nb = bay_node[line_end_bays[li][1]]
        r = rng.uniform(0.015, 0.035)
        xr = rng.uniform(0.15, 0.35)
        y = 1.0 / complex(r, xr)
        if use_transformer and li == 0:
            transformers.append(Transformer(li + 1, na, nb, y.real, y.imag, tap=0.98))
        else:
            branches.append(Branch(li + 1, na, nb, y.real, y.imag, charging=rng.uniform(0.01, 0.03)))

    shunts = []
    loads: dict[int, complex] = {}
    gens: dict[int, complex] = {}
    for bi, (s, role, payload) in enumerate(bays):
        node = bay_node[bi]
        if role == "load":
            p = rng.uniform(0.2, 0.6)
            q = rng.uniform(0.05, 0.2)
            loads[node] = complex(p, -q)  # constant admittance drawing P + jQ at 1 p.u.
        elif role == "shunt":
            shunts.append(Shunt(payload + 1, node, 0.0, rng.uniform(0.03, 0.08)))
        elif role == "gen":
            gens[node] = 0j  # filled below once total load is known

    total_draw = sum(loads.values()) + sum(
        complex(sh.conductance, sh.susceptance) for sh in shunts
    )
    gen_nodes = sorted(gens)
    shares = rng.uniform(0.8, 1.2, size=len(gen_nodes))
    shares /= shares.sum()
    for node, share in zip(gen_nodes, shares):
        gens[node] = total_draw * share

    pmu_w = SolverConfig.rtu_weight(options.pmu_sigma) if options.pmu_sigma > 0 else 1.0
    meters = [
        MeterPlacement(f"pmu{n}", MeterKind.PMU_INJECTION, n, None, pmu_w, pmu_w)
        for n in gen_nodes
    ]
    alpha = SolverConfig.rtu_weight(options.sigma) if options.sigma > 0 else 1.0
    rtu_nodes = sorted(set(loads) | {sh.node for sh in shunts})
    meters += [
        MeterPlacement(f"rtu{n}", MeterKind.RTU_INJECTION, n, None, alpha) for n in rtu_nodes
    ]

    # line-flow meters on line ends whose substation hosts any injection meter
    sub_of_node = {n.id: n.substation for n in nodes}
    metered_subs = {sub_of_node[n] for n in rtu_nodes} | {sub_of_node[n] for n in gen_nodes}
    ends = []
    for br in branches:
        for end in (br.from_node, br.to_node):
            if sub_of_node[end] in metered_subs:
                ends.append((br, end))
    lf_w = SolverConfig.rtu_weight(options.lineflow_sigma) if options.lineflow_sigma > 0 else 1.0
    n_lf = round(options.lineflow_density * len(ends))
    picked = sorted(rng.permutation(len(ends))[:n_lf])
    for k in picked:
        br, end = ends[k]
        side = "f" if end == br.from_node else "t"
        meters.append(MeterPlacement(f"lf{br.id}{side}", MeterKind.RTU_LINEFLOW, end, br.id, lf_w))

    case = NBCase(
        base_mva=options.base_mva,
        nodes=tuple(nodes),
        switches=tuple(switches),
        branches=tuple(branches),
        transformers=tuple(transformers),
        shunts=tuple(shunts),
        meters=tuple(meters),
    )
    return ScenarioSpec(
        case=case,
        loads=loads,
        gens=gens,
        sigma=options.sigma,
        sigma_by_kind={
            MeterKind.PMU_INJECTION: options.pmu_sigma,
            MeterKind.RTU_LINEFLOW: options.lineflow_sigma,
        },
        seed=seed,
    )


def generate_case_family(sizes, seed: int = 0) -> list[NBCase]:
    """One validated NB case per requested size (nodes hit exactly)."""
    from .nbmodel import validate_case

    cases = []
    for i, size in enumerate(sizes):
        spec = build_scenario(size, seed=seed + i)
        validate_case(spec.case)
        cases.append(spec.case)
    return cases


def pick_flips(
    spec: ScenarioSpec,
    truth: GroundTruth,
    count: int,
    rng: np.random.Generator,
    detectable_only: bool = True,
    current_floor: float = 0.05,
    voltage_floor: float = 0.05,
) -> tuple[int, ...]:
    """Choose switches to misreport.

    With ``detectable_only`` the candidates are restricted to switches whose
    flip has observable physics: closed switches actually carrying current,
    and open switches with a real potential difference across them.
    """
    statuses = spec.true_statuses()
    candidates = []
    for s in spec.case.switches:
        if detectable_only:
            if statuses[s.id] == Status.CLOSED:
                if abs(truth.switch_currents[s.id]) < current_floor:
                    continue
            else:
                dv = truth.voltages[s.from_node] - truth.voltages[s.to_node]
                if abs(dv) < voltage_floor:
                    continue
        candidates.append(s.id)
    if len(candidates) < count:
        raise ValueError(f"only {len(candidates)} flippable switches for {count} requested")
    picked = rng.permutation(len(candidates))[:count]
    return tuple(sorted(candidates[k] for k in picked))


def pick_bad_rtus(
    spec: ScenarioSpec,
    count: int,
    rng: np.random.Generator,
    deviation: float = DEFAULT_BAD_RTU_DEVIATION,
) -> tuple[tuple[str, float], ...]:
    """Choose injection RTUs to corrupt with a gross deviation."""
    rtus = [m.id for m in spec.case.meters if m.kind == MeterKind.RTU_INJECTION]
    if len(rtus) < count:
        raise ValueError(f"only {len(rtus)} RTUs for {count} requested")
    picked = rng.permutation(len(rtus))[:count]
    return tuple((rtus[k], deviation) for k in sorted(picked))


def pick_injections(
    spec: ScenarioSpec,
    truth: GroundTruth,
    n_flips: int,
    n_bad_rtus: int,
    rng: np.random.Generator,
    deviation: float = DEFAULT_BAD_RTU_DEVIATION,
):
    """Choose spread-out, individually identifiable error locations.

    Two gross errors inside one substation are not separately identifiable:
    nothing meters the current between bays of a common bus, so their
    residuals can trade off against each other.  This picker places every
    injected error in a distinct substation, keeps flips out of
    equivalent-switch and switch-cycle pattern groups (where localization
    is ambiguous by construction), and corrupts only RTUs that do not share
    a substation with another injection meter.  Returns (flips, bad_rtus).
    """
    from .detect import detectability_scan

    case = spec.case
    sub_of = {n.id: n.substation for n in case.nodes}
    ambiguous = set()
    for w in detectability_scan(case):
        if w.pattern in ("equivalent_line_switches", "switch_cycle"):
            ambiguous.update(w.switches)

    statuses = spec.true_statuses()
    flip_pool = []
    for s in case.switches:
        if s.id in ambiguous:
            continue
        if statuses[s.id] == Status.CLOSED:
            if abs(truth.switch_currents[s.id]) < 0.05:
                continue
        else:
            dv = truth.voltages[s.from_node] - truth.voltages[s.to_node]
            if abs(dv) < 0.05:
                continue
        flip_pool.append(s)

    inj_subs: dict[str, int] = {}
    for m in case.meters:
        if m.kind != MeterKind.RTU_LINEFLOW:
            inj_subs[sub_of[m.node]] = inj_subs.get(sub_of[m.node], 0) + 1
    rtu_pool = [
        m for m in case.meters
        if m.kind == MeterKind.RTU_INJECTION and inj_subs[sub_of[m.node]] == 1
    ]

    used_subs: set[str] = set()
    bad = []
    for k in rng.permutation(len(rtu_pool)):
        m = rtu_pool[k]
        if sub_of[m.node] in used_subs:
            continue
        bad.append((m.id, deviation))
        used_subs.add(sub_of[m.node])
        if len(bad) == n_bad_rtus:
            break
    flips = []
    for k in rng.permutation(len(flip_pool)):
        s = flip_pool[k]
        subs = {sub_of[s.from_node], sub_of[s.to_node]}
        if subs & used_subs:
            continue
        flips.append(s.id)
        used_subs |= subs
        if len(flips) == n_flips:
            break
    if len(bad) < n_bad_rtus or len(flips) < n_flips:
        raise ValueError(
            f"could not separate {n_flips} flips and {n_bad_rtus} bad RTUs "
            f"across substations (pools: {len(flip_pool)} switches, {len(rtu_pool)} RTUs)"
        )
    return tuple(sorted(flips)), tuple(bad)


# ---------------------------------------------------------------------------
# error-density sweep

@dataclass
class SweepRow:
    fraction: float
    seed: int
    n_flips: int
    mean_v_err: float
    mean_angle_err_deg: float
    precision: float
    recall: float
    iterations: int
    seconds: float
    converged: bool


def sweep_error_density(
    spec: ScenarioSpec,
    fractions,
    seeds: int = 20,
    config: SolverConfig | None = None,
) -> list[SweepRow]:
    """Degradation experiment: flip a growing fraction of switch statuses.

    For each fraction and seed, a random flip set of the given size is
    injected (no detectability screening: the point is to observe failure),
    the estimator runs, and state accuracy plus switch-alarm precision and
    recall are recorded.
    """
    import time

    from . import detect
    from .circuit import assemble
    from .errors import SolverFailure
    from .solver import solve_wlav

    config = config or SolverConfig()
    truth = solve_ground_truth(spec)
    n_sw = len(spec.case.switches)
    rows = []
    for fraction in fractions:
        n_flips = round(fraction * n_sw)
        for k in range(seeds):
            seed = spec.seed + 1000 * (k + 1)
            rng = np.random.default_rng((seed, int(round(fraction * 1e6))))
            perm = rng.permutation(n_sw)[:n_flips]
            flips = tuple(sorted(spec.case.switches[int(i)].id for i in perm))
            variant = replace(spec, flips=flips, seed=seed)
            meas = synthesize_measurements(truth, variant)
            start = time.perf_counter()
            try:
                circ = assemble(spec.case, meas, check_rank=False)
                sol = solve_wlav(circ, config)
                converged = True
            except SolverFailure:
                rows.append(SweepRow(fraction, seed, n_flips, float("nan"), float("nan"),
                                     0.0, 0.0, config.max_iter, time.perf_counter() - start, False))
                continue
            seconds = time.perf_counter() - start
            est = {n: sol.voltage(n) for n in spec.case.node_ids}
            metrics = accuracy_metrics(est, truth, spec.case, circ.statuses)
            alarms = detect.hypothesis_test(detect.switch_readings(sol, spec.case))
            alarmed = {a.target for a in alarms}
            injected = set(flips)
            tp = len(alarmed & injected)
            precision = tp / len(alarmed) if alarmed else (1.0 if not injected else 0.0)
            recall = tp / len(injected) if injected else 1.0
            rows.append(SweepRow(
                fraction, seed, n_flips, metrics.mean_v_err, metrics.mean_angle_err_deg,
                precision, recall, sol.iterations, seconds, converged,
            ))
    return rows


# ---------------------------------------------------------------------------
# scenario / truth file formats

def serialize_scenario(spec: ScenarioSpec) -> str:
    """Case sections plus [loads], [gens], [noise], and [inject]."""
    out = [serialize_case(spec.case), "[loads]", "# node g b"]
    for node in sorted(spec.loads):
        y = spec.loads[node]
        out.append(f"{node} {y.real!r} {y.imag!r}")
    out += ["", "[gens]", "# node i_re i_im"]
    for node in sorted(spec.gens):
        cur = spec.gens[node]
        out.append(f"{node} {cur.real!r} {cur.imag!r}")
    out += ["", "[noise]", f"sigma = {spec.sigma!r}"]
    for kind, sig in sorted(spec.sigma_by_kind.items(), key=lambda kv: kv[0].value):
        out.append(f"sigma_{kind.value} = {sig!r}")
    out += ["", "[inject]", f"seed = {spec.seed}"]
    for sid in spec.flips:
        out.append(f"flip {sid}")
    for mid, dev in spec.bad_rtus:
        out.append(f"bad_rtu {mid} {dev!r}")
    return "\n".join(out) + "\n"


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse a scenario file: a case file with truth and injection sections."""
    case = parse_case(text)
    loads, gens, sigma_by_kind = {}, {}, {}
    sigma = DEFAULT_SIGMA
    flips, bad_rtus = [], []
    seed = 0
    for section, ln, tok in _iter_section_lines(text):
        if section == "loads":
            if len(tok) != 3:
                raise FormatError("load row needs: node g b", section, ln)
            loads[_parse_int(tok[0], "node", section, ln)] = complex(
                _parse_float(tok[1], "g", section, ln), _parse_float(tok[2], "b", section, ln)
            )
        elif section == "gens":
            if len(tok) != 3:
                raise FormatError("gen row needs: node i_re i_im", section, ln)
            gens[_parse_int(tok[0], "node", section, ln)] = complex(
                _parse_float(tok[1], "i_re", section, ln), _parse_float(tok[2], "i_im", section, ln)
            )
        elif section == "noise":
            key, value = _kv(tok, section, ln)
            if key == "sigma":
                sigma = _parse_float(value, "sigma", section, ln)
            elif key.startswith("sigma_"):
                try:
                    kind = MeterKind(key[len("sigma_"):])
                except ValueError:
                    raise FormatError(f"unknown meter kind in {key!r}", section, ln) from None
                sigma_by_kind[kind] = _parse_float(value, key, section, ln)
            else:
                raise FormatError(f"unknown key {key!r}", section, ln)
        elif section == "inject":
            if tok[0] == "flip" and len(tok) == 2:
                flips.append(_parse_int(tok[1], "switch id", section, ln))
            elif tok[0] == "bad_rtu" and len(tok) in (2, 3):
                dev = _parse_float(tok[2], "deviation", section, ln) if len(tok) == 3 else DEFAULT_BAD_RTU_DEVIATION
                bad_rtus.append((tok[1], dev))
            elif tok[0] == "seed":
                _, value = _kv(tok, section, ln)
                seed = _parse_int(value, "seed", section, ln)
            else:
                raise FormatError(f"unknown inject directive {tok[0]!r}", section, ln)
    return ScenarioSpec(
        case=case, loads=loads, gens=gens, sigma=sigma, sigma_by_kind=sigma_by_kind,
        flips=tuple(flips), bad_rtus=tuple(bad_rtus), seed=seed,
    )


def serialize_truth(truth: GroundTruth, case: NBCase) -> str:
    """True node voltages and true switch statuses, for --truth evaluation."""
    out = ["[truth_state]", "# node v_re v_im"]
    for n in case.node_ids:
        v = truth.voltages[n]
        out.append(f"{n} {v.real!r} {v.imag!r}")
    out += ["", "[truth_statuses]", "# switch status"]
    for s in case.switches:
        out.append(f"{s.id} {truth.exact.statuses[s.id].value}")
    return "\n".join(out) + "\n"


def parse_truth(text: str, case: NBCase):
    """Returns (voltages, statuses) from a truth file."""
    voltages: dict[int, complex] = {}
    statuses: dict[int, Status] = {}
    for section, ln, tok in _iter_section_lines(text):
        if section == "truth_state":
            if len(tok) != 3:
                raise FormatError("truth row needs: node v_re v_im", section, ln)
            node = _parse_int(tok[0], "node", section, ln)
            if node not in case.node_index:
                raise FormatError(f"unknown node {node}", section, ln)
            voltages[node] = complex(
                _parse_float(tok[1], "v_re", section, ln), _parse_float(tok[2], "v_im", section, ln)
            )
        elif section == "truth_statuses":
            if len(tok) != 2:
                raise FormatError("truth status row needs: switch status", section, ln)
            statuses[_parse_int(tok[0], "switch", section, ln)] = _parse_status(tok[1], section, ln)
        else:
            raise FormatError(f"unknown section [{section}]", section, ln)
    return voltages, statuses
