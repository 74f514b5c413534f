"""Stamp grid and measurement devices into one sparse linear equality system.

Every device contributes linear current terms to the Kirchhoff current law
(KCL) rows of its nodes, split into real and imaginary parts.  Measurement
devices additionally carry noise (slack) variables that absorb data errors;
each noise scalar has an objective weight.  The assembled system is

    A @ [x; n] = b

with ``x`` the rectangular node voltages ``[V1_R, V1_I, ..., VN_R, VN_I]``
and ``n`` the noise vector.  PMU voltage readings and RTU line-flow
readings add control rows below the KCL block; reference rows pin angle
(and, for floating dead segments, voltage) where nothing else does.

Sign conventions: device current flows out of its node, loads positive, so
an RTU sensitivity conductance carries the sign of the measured P.  PMU
current measurements are injections into the node.  Switch and line-flow
noise currents flow from the device's from-side to its to-side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, MeasurementError
from .nbmodel import (
    MeasurementSet,
    MeterKind,
    MeterPlacement,
    NBCase,
    Status,
    Switch,
    effective_statuses,
)


@dataclass(frozen=True)
class RtuSensitivity:
    """Admittance equivalent of one RTU reading: G = P/|V|^2, B = -Q/|V|^2."""

    conductance: float
    susceptance: float


def rtu_sensitivity(p: float, q: float, v_mag: float) -> RtuSensitivity:
    """Map an RTU (P, Q, |V|) reading to its admittance sensitivities."""
    if v_mag == 0:
        raise MeasurementError("RTU reading with |V| = 0 has no admittance equivalent")
    return RtuSensitivity(p / v_mag**2, -q / v_mag**2)


@dataclass(frozen=True)
class NoiseVar:
    """Identity of one scalar noise variable.

    kind: "sw" (switch), "rtu" (injection RTU), "lf" (line-flow RTU),
    "pmu_i" (PMU current), "pmu_v" (PMU voltage); part is "R" or "I".
    """

    kind: str
    device: object  # switch id (int) or meter id (str)
    part: str

    def __str__(self):
        return f"{self.kind}:{self.device}:{self.part}"


class VariableCatalog:
    """Dense column layout: x = voltages first, then noise scalars.

    The state block is ``[V1_R, V1_I, ...]`` in case node order, so the
    state is recoverable from a solution vector by slicing ``[:2N]``.
    """

    def __init__(self, case: NBCase):
        self.node_index = dict(case.node_index)
        self.n_nodes = len(case.nodes)
        self.noise_labels: list[NoiseVar] = []
        self.noise_weights: list[float] = []
        self._noise_pos: dict[tuple, int] = {}

    @property
    def n_state(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_noise(self) -> int:
        return len(self.noise_labels)

    @property
    def n_columns(self) -> int:
        return self.n_state + self.n_noise

    def vr(self, node_id: int) -> int:
        return 2 * self.node_index[node_id]

    def vi(self, node_id: int) -> int:
        return 2 * self.node_index[node_id] + 1

    def add_noise(self, kind: str, device, weight: float) -> tuple[int, int]:
        """Register a complex noise pair; returns (col_R, col_I)."""
        cols = []
        for part in ("R", "I"):
            j = len(self.noise_labels)
            self.noise_labels.append(NoiseVar(kind, device, part))
            self.noise_weights.append(weight)
            self._noise_pos[(kind, device, part)] = j
            cols.append(self.n_state + j)
        return tuple(cols)

    def noise_col(self, kind: str, device, part: str) -> int:
        return self.n_state + self._noise_pos[(kind, device, part)]

    def noise_value(self, vector: np.ndarray, kind: str, device) -> complex:
        """Complex noise value of a device from a full [x; n] vector."""
        return complex(
            vector[self.noise_col(kind, device, "R")],
            vector[self.noise_col(kind, device, "I")],
        )

    def voltage(self, vector: np.ndarray, node_id: int) -> complex:
        return complex(vector[self.vr(node_id)], vector[self.vi(node_id)])

    def weights(self) -> np.ndarray:
        return np.asarray(self.noise_weights, dtype=float)


class CircuitBuilder:
    """Accumulates COO triplets and right-hand side during stamping.

    Rows are logical until :meth:`finish`: the KCL block comes first (two
    rows per node, case order), then rows appended by :meth:`new_row`.
    """

    def __init__(self, catalog: VariableCatalog):
        self.catalog = catalog
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        n_kcl = catalog.n_state
        self.provenance: list[str] = []
        for node_id in catalog.node_index:
            self.provenance.append(f"kcl:{node_id}:R")
            self.provenance.append(f"kcl:{node_id}:I")
        self.rhs: dict[int, float] = {}
        self.n_rows = n_kcl

    def kcl_r(self, node_id: int) -> int:
        return 2 * self.catalog.node_index[node_id]

    def kcl_i(self, node_id: int) -> int:
        return 2 * self.catalog.node_index[node_id] + 1

    def add(self, row: int, col: int, val: float) -> None:
        if val != 0.0:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(val)

    def add_rhs(self, row: int, val: float) -> None:
        if val != 0.0:
            self.rhs[row] = self.rhs.get(row, 0.0) + val

    def new_row(self, provenance: str) -> int:
        self.provenance.append(provenance)
        self.n_rows += 1
        return self.n_rows - 1

    def stamp_current(self, row_r: int, row_i: int, node_id: int, y: complex, sign: float = 1.0):
        """Add the current ``sign * y * V_node`` to a real/imaginary row pair."""
        g, b = y.real, y.imag
        vr, vi = self.catalog.vr(node_id), self.catalog.vi(node_id)
        self.add(row_r, vr, sign * g)
        self.add(row_r, vi, -sign * b)
        self.add(row_i, vi, sign * g)
        self.add(row_i, vr, sign * b)

    def stamp_admittance_into_kcl(self, at_node: int, of_node: int, y: complex):
        """Current ``y * V_of_node`` flowing out of ``at_node``."""
        self.stamp_current(self.kcl_r(at_node), self.kcl_i(at_node), of_node, y)


@dataclass
class StampedCircuit:
    """Assembled sparse equality system plus bookkeeping.

    ``A @ [x; n] = b`` with noise weights ``c`` (one entry per noise
    scalar), per-row provenance tags, and the reported statuses the
    switches were stamped with.
    """

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    catalog: VariableCatalog
    row_provenance: tuple[str, ...]
    statuses: dict[int, Status]
    warnings: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def state_of(self, solution_vector: np.ndarray) -> np.ndarray:
        return solution_vector[: self.catalog.n_state]

    def residual(self, x: np.ndarray, n: np.ndarray) -> np.ndarray:
        return self.A @ np.concatenate([x, n]) - self.b

    def kcl_row_mask(self) -> np.ndarray:
        """True for KCL and control rows, False for reference/pin rows."""
        return np.array([not p.startswith("ref:") for p in self.row_provenance])


# ---------------------------------------------------------------------------
# device stamps

def stamp_physical(builder: CircuitBuilder, device) -> None:
    """Stamp a branch, transformer, or shunt as linear admittance currents."""
    from .nbmodel import Branch, Shunt, Transformer

    if isinstance(device, Branch):
        y = complex(device.conductance, device.susceptance)
        ysh = complex(0.0, device.charging / 2.0)
        i, j = device.from_node, device.to_node
        builder.stamp_admittance_into_kcl(i, i, y + ysh)
        builder.stamp_admittance_into_kcl(i, j, -y)
        builder.stamp_admittance_into_kcl(j, j, y + ysh)
        builder.stamp_admittance_into_kcl(j, i, -y)
    elif isinstance(device, Transformer):
        y = complex(device.conductance, device.susceptance)
        t = device.tap * np.exp(1j * device.phase_shift)
        i, j = device.from_node, device.to_node
        builder.stamp_admittance_into_kcl(i, i, y / (device.tap**2))
        builder.stamp_admittance_into_kcl(i, j, -y / np.conj(t))
        builder.stamp_admittance_into_kcl(j, j, y)
        builder.stamp_admittance_into_kcl(j, i, -y / t)
    elif isinstance(device, Shunt):
        builder.stamp_admittance_into_kcl(
            device.node, device.node, complex(device.conductance, device.susceptance)
        )
    else:
        raise TypeError(f"not a physical device: {device!r}")


def stamp_switch_noise(builder: CircuitBuilder, switch: Switch) -> None:
    """Slack current n_sw flowing from the switch's from-node to its to-node."""
    cr = builder.catalog.noise_col("sw", switch.id, "R")
    ci = builder.catalog.noise_col("sw", switch.id, "I")
    builder.add(builder.kcl_r(switch.from_node), cr, 1.0)
    builder.add(builder.kcl_r(switch.to_node), cr, -1.0)
    builder.add(builder.kcl_i(switch.from_node), ci, 1.0)
    builder.add(builder.kcl_i(switch.to_node), ci, -1.0)


def stamp_open_switch(builder: CircuitBuilder, switch: Switch) -> None:
    """An open switch contributes only its slack current (open circuit)."""
    stamp_switch_noise(builder, switch)


def stamp_closed_switch(builder: CircuitBuilder, switch: Switch) -> None:
    """A closed switch is a low-reactance branch plus parallel slack current."""
    y = 1.0 / complex(0.0, switch.reactance)
    i, j = switch.from_node, switch.to_node
    builder.stamp_admittance_into_kcl(i, i, y)
    builder.stamp_admittance_into_kcl(i, j, -y)
    builder.stamp_admittance_into_kcl(j, j, y)
    builder.stamp_admittance_into_kcl(j, i, -y)
    stamp_switch_noise(builder, switch)


def stamp_rtu_injection(builder: CircuitBuilder, meter: MeterPlacement, reading) -> None:
    """Injection RTU: sensitivity admittance plus noise current drawn at the node."""
    sens = rtu_sensitivity(reading.p, reading.q, reading.v_mag)
    k = meter.node
    builder.stamp_admittance_into_kcl(k, k, complex(sens.conductance, sens.susceptance))
    builder.add(builder.kcl_r(k), builder.catalog.noise_col("rtu", meter.id, "R"), 1.0)
    builder.add(builder.kcl_i(k), builder.catalog.noise_col("rtu", meter.id, "I"), 1.0)


def stamp_pmu(builder: CircuitBuilder, meter: MeterPlacement, reading) -> None:
    """PMU: measured current enters the node's KCL; voltage rows pin V with slack."""
    k = meter.node
    # current rows: sum(out) - (I_pmu + n_pmu) = 0
    builder.add_rhs(builder.kcl_r(k), reading.i_re)
    builder.add_rhs(builder.kcl_i(k), reading.i_im)
    builder.add(builder.kcl_r(k), builder.catalog.noise_col("pmu_i", meter.id, "R"), -1.0)
    builder.add(builder.kcl_i(k), builder.catalog.noise_col("pmu_i", meter.id, "I"), -1.0)
    # voltage rows: V_k - n_v = V_pmu
    row_r = builder.new_row(f"pmu_v:{meter.id}:R")
    row_i = builder.new_row(f"pmu_v:{meter.id}:I")
    builder.add(row_r, builder.catalog.vr(k), 1.0)
    builder.add(row_i, builder.catalog.vi(k), 1.0)
    builder.add(row_r, builder.catalog.noise_col("pmu_v", meter.id, "R"), -1.0)
    builder.add(row_i, builder.catalog.noise_col("pmu_v", meter.id, "I"), -1.0)
    builder.add_rhs(row_r, reading.v_re)
    builder.add_rhs(row_i, reading.v_im)


def stamp_rtu_lineflow(builder: CircuitBuilder, meter: MeterPlacement, reading, case: NBCase) -> None:
    """Line-flow RTU: control rows tying the metered-end branch current to the
    sensitivity current derived from the flow reading, with slack.

        I_branch_at_end(x) - (G_f + jB_f) V_end - n_lf = 0
    """
    br = case.branch_by_id[meter.branch]
    if meter.node == br.from_node:
        end, other = br.from_node, br.to_node
    elif meter.node == br.to_node:
        end, other = br.to_node, br.from_node
    else:
        raise AssemblyError(
            f"meter {meter.id}: node {meter.node} is not an endpoint of branch {br.id}"
        )
    row_r = builder.new_row(f"lineflow:{meter.id}:R")
    row_i = builder.new_row(f"lineflow:{meter.id}:I")
    y = complex(br.conductance, br.susceptance)
    ysh = complex(0.0, br.charging / 2.0)
    # physical branch current at the metered end
    builder.stamp_current(row_r, row_i, end, y + ysh)
    builder.stamp_current(row_r, row_i, other, -y)
    # sensitivity current from the measured flow
    sens = rtu_sensitivity(reading.p, reading.q, reading.v_mag)
    builder.stamp_current(row_r, row_i, end, complex(sens.conductance, sens.susceptance), sign=-1.0)
    builder.add(row_r, builder.catalog.noise_col("lf", meter.id, "R"), -1.0)
    builder.add(row_i, builder.catalog.noise_col("lf", meter.id, "I"), -1.0)


# ---------------------------------------------------------------------------
# island analysis for reference handling

def _components(case: NBCase, edges) -> list[set[int]]:
    from .ntp import UnionFind

    uf = UnionFind(case.node_ids)
    for a, b in edges:
        uf.union(a, b)
    return [set(g) for g in uf.groups().values()]


def _reference_plan(case: NBCase, meas: MeasurementSet, statuses: dict[int, Status]):
    """Decide reference rows and redundant-KCL drops.

    Returns (angle_refs, pins, drops, warnings): node ids needing a V_I = 0
    row; node ids needing V_R = V_I = 0 pins; node ids whose KCL rows are
    redundant and must be dropped; and human-readable warnings.
    """
    metered_nodes = set()
    pmu_nodes = set()
    for m in case.meters:
        r = meas.reading_for(m)
        if r is None or m.kind == MeterKind.RTU_LINEFLOW:
            continue
        metered_nodes.add(m.node)
        if m.kind == MeterKind.PMU_INJECTION:
            pmu_nodes.add(m.node)

    grounded_nodes = {sh.node for sh in case.shunts} | metered_nodes
    for b in case.branches:
        if b.charging != 0.0:
            grounded_nodes.update((b.from_node, b.to_node))
    for t in case.transformers:
        if t.tap != 1.0 or t.phase_shift != 0.0:
            grounded_nodes.update((t.from_node, t.to_node))

    conducting = [(b.from_node, b.to_node) for b in case.branches]
    conducting += [(t.from_node, t.to_node) for t in case.transformers]
    conducting += [
        (s.from_node, s.to_node) for s in case.switches if statuses[s.id] == Status.CLOSED
    ]
    all_device = conducting + [
        (s.from_node, s.to_node) for s in case.switches if statuses[s.id] == Status.OPEN
    ]

    angle_refs, pins, warnings = [], [], []
    for island in sorted(_components(case, conducting), key=min):
        if island & pmu_nodes:
            continue
        if island & grounded_nodes:
            anchor = min(island & metered_nodes) if island & metered_nodes else min(island)
            if case.reference_node in island:
                anchor = case.reference_node
            angle_refs.append(anchor)
            warnings.append(
                f"island containing node {anchor} has no PMU: angle pinned at node "
                f"{anchor}; voltage magnitude scale is weakly determined"
            )
        else:
            pins.append(min(island))
            warnings.append(
                f"island containing node {min(island)} has no measurement or ground "
                f"path: pinned to zero volts (de-energized)"
            )

    drops = []
    for comp in sorted(_components(case, all_device), key=min):
        if not (comp & grounded_nodes):
            # the component's KCL rows sum to zero: drop the datum node's pair
            drops.append(min(comp))
    return angle_refs, pins, drops, warnings


# ---------------------------------------------------------------------------
# assembly

def assemble(
    case: NBCase,
    meas: MeasurementSet,
    switch_weight: float | None = None,
    switch_reactance: float | None = None,
    check_rank: bool = True,
) -> StampedCircuit:
    """Stamp the whole case into a StampedCircuit.

    ``switch_weight``/``switch_reactance`` override the per-switch values
    when given.  ``check_rank`` verifies full row rank numerically and
    raises AssemblyError naming suspect rows when the check fails.
    """
    statuses = effective_statuses(case, meas)
    catalog = VariableCatalog(case)

    def eff_switch(s: Switch) -> Switch:
        if switch_weight is None and switch_reactance is None:
            return s
        return Switch(
            s.id, s.from_node, s.to_node, s.status,
            s.weight if switch_weight is None else switch_weight,
            s.reactance if switch_reactance is None else switch_reactance,
        )

    switches = [eff_switch(s) for s in case.switches]
    for s in switches:
        catalog.add_noise("sw", s.id, s.weight)
    stamped_meters = []
    for m in case.meters:
        r = meas.reading_for(m)
        if r is None:
            continue
        stamped_meters.append((m, r))
        if m.kind == MeterKind.RTU_INJECTION:
            catalog.add_noise("rtu", m.id, m.weight)
        elif m.kind == MeterKind.RTU_LINEFLOW:
            catalog.add_noise("lf", m.id, m.weight)
        else:
            catalog.add_noise("pmu_i", m.id, m.weight)
            gamma = 1.0 if m.voltage_weight is None else m.voltage_weight
            catalog.add_noise("pmu_v", m.id, gamma)

    builder = CircuitBuilder(catalog)
    for b in case.branches:
        stamp_physical(builder, b)
    for t in case.transformers:
        stamp_physical(builder, t)
    for sh in case.shunts:
        stamp_physical(builder, sh)
    for s in switches:
        if statuses[s.id] == Status.CLOSED:
            stamp_closed_switch(builder, s)
        else:
            stamp_open_switch(builder, s)
    for m, r in stamped_meters:
        if m.kind == MeterKind.RTU_INJECTION:
            stamp_rtu_injection(builder, m, r)
        elif m.kind == MeterKind.RTU_LINEFLOW:
            stamp_rtu_lineflow(builder, m, r, case)
        else:
            stamp_pmu(builder, m, r)

    angle_refs, pins, drops, warnings = _reference_plan(case, meas, statuses)
    for node in angle_refs:
        row = builder.new_row(f"ref:angle:{node}")
        builder.add(row, catalog.vi(node), 1.0)
    for node in pins:
        row_r = builder.new_row(f"ref:pin:{node}:R")
        row_i = builder.new_row(f"ref:pin:{node}:I")
        builder.add(row_r, catalog.vr(node), 1.0)
        builder.add(row_i, catalog.vi(node), 1.0)

    drop_rows = set()
    for node in drops:
        drop_rows.add(builder.kcl_r(node))
        drop_rows.add(builder.kcl_i(node))

    keep = [r for r in range(builder.n_rows) if r not in drop_rows]
    row_map = {old: new for new, old in enumerate(keep)}
    coo_rows, coo_cols, coo_vals = [], [], []
    for r, cidx, v in zip(builder.rows, builder.cols, builder.vals):
        if r in drop_rows:
            continue
        coo_rows.append(row_map[r])
        coo_cols.append(cidx)
        coo_vals.append(v)
    n_rows = len(keep)
    A = sp.coo_matrix(
        (coo_vals, (coo_rows, coo_cols)), shape=(n_rows, catalog.n_columns)
    ).tocsr()
    A.sum_duplicates()
    b_vec = np.zeros(n_rows)
    for r, v in builder.rhs.items():
        if r not in drop_rows:
            b_vec[row_map[r]] = v
    provenance = tuple(builder.provenance[r] for r in keep)

    circuit = StampedCircuit(
        A=A,
        b=b_vec,
        c=catalog.weights(),
        catalog=catalog,
        row_provenance=provenance,
        statuses=statuses,
        warnings=tuple(warnings),
    )
    _check_structure(circuit)
    if check_rank:
        _check_row_rank(circuit)
    return circuit


def _check_structure(circuit: StampedCircuit) -> None:
    """Structural invariants: no empty rows; every noise column used once+."""
    A = circuit.A
    row_nnz = np.diff(A.indptr)
    empty = np.nonzero(row_nnz == 0)[0]
    if empty.size:
        tags = [circuit.row_provenance[r] for r in empty[:5]]
        raise AssemblyError(f"empty rows after assembly: {tags}")
    col_nnz = np.diff(A.tocsc().indptr)
    ns = circuit.catalog.n_state
    unused = np.nonzero(col_nnz[ns:] == 0)[0]
    if unused.size:
        labels = [str(circuit.catalog.noise_labels[j]) for j in unused[:5]]
        raise AssemblyError(f"noise variables appear in no row: {labels}")


def _check_row_rank(circuit: StampedCircuit, tol: float = 1e-9) -> None:
    """Numeric full-row-rank check; dense QR when small, sparse LU otherwise."""
    A = circuit.A
    m = A.shape[0]
    if m <= 800:
        rank = np.linalg.matrix_rank(A.toarray(), tol=None)
        if rank < m:
            raise AssemblyError(
                f"equality system is row-rank deficient (rank {rank} of {m} rows); "
                f"check for floating or redundant sub-networks"
            )
        return
    gram = (A @ A.T).tocsc() + sp.identity(m, format="csc") * 0.0
    try:
        lu = sp.linalg.splu(gram)
    except RuntimeError as exc:  # exactly singular
        raise AssemblyError(f"equality system is row-rank deficient: {exc}") from None
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= tol * max(diag.max(), 1.0):
        raise AssemblyError(
            "equality system is numerically row-rank deficient "
            f"(pivot ratio {diag.min() / max(diag.max(), 1.0):.2e})"
        )


def dump(circuit: StampedCircuit, prefix: str) -> None:
    """Write the circuit as matrix-market text plus provenance sidecars.

    Produces ``<prefix>.mtx`` (the A matrix), ``<prefix>.rows`` (per-row
    provenance and right-hand side), and ``<prefix>.cols`` (variable labels;
    noise columns include their weights).
    """
    import scipy.io as sio

    sio.mmwrite(f"{prefix}.mtx", circuit.A)
    with open(f"{prefix}.rows", "w") as fh:
        for i, tag in enumerate(circuit.row_provenance):
            fh.write(f"{i} {tag} b={circuit.b[i]!r}\n")
    with open(f"{prefix}.cols", "w") as fh:
        inv = {v: k for k, v in circuit.catalog.node_index.items()}
        for k in range(circuit.catalog.n_nodes):
            fh.write(f"{2 * k} V:{inv[k]}:R\n{2 * k + 1} V:{inv[k]}:I\n")
        ns = circuit.catalog.n_state
        for j, label in enumerate(circuit.catalog.noise_labels):
            fh.write(f"{ns + j} n:{label} w={circuit.c[j]!r}\n")
