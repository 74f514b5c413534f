"""Node-breaker grid model: domain types, validation, and the text file formats.

A case describes the physical network at node (bus-section) granularity:
nodes, switching devices, branches, transformers, shunts, and the placement
of metering devices.  A measurement set is one snapshot of analog readings
plus reported switch statuses.  Both are immutable after construction and
safe to share between threads.

All electrical quantities are stored in per unit on ``base_mva`` except
``nominal_kv`` and ``base_mva`` itself.  See ``docs/format.md`` for the
file schema accepted by :func:`parse_case` and :func:`parse_measurements`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

from .errors import CaseValidationError, FormatError, MeasurementError

DEFAULT_SWITCH_WEIGHT = 0.001
DEFAULT_SWITCH_REACTANCE = 1e-4


class Status(str, enum.Enum):
    """Reported state of a switching device."""

    OPEN = "open"
    CLOSED = "closed"

    def flipped(self) -> "Status":
        return Status.CLOSED if self is Status.OPEN else Status.OPEN


class MeterKind(str, enum.Enum):
    """Kinds of metering devices that can be placed on a case."""

    RTU_INJECTION = "rtu_injection"
    RTU_LINEFLOW = "rtu_lineflow"
    PMU_INJECTION = "pmu_injection"


@dataclass(frozen=True)
class NodeSection:
    """A bus section (node) of the node-breaker model.

    Attributes:
        id: Unique integer node id.
        substation: Label of the substation the section belongs to.
        nominal_kv: Nominal voltage level in kV; must be positive.
        zero_injection: True when no load/generation/meter attaches here, so
            the node's current balance is an exact network constraint.
    """

    id: int
    substation: str
    nominal_kv: float
    zero_injection: bool = False


@dataclass(frozen=True)
class Switch:
    """A circuit breaker or disconnector between two node sections.

    ``status`` is the device's normal (as-filed) state; a measurement
    snapshot may override it.  ``weight`` is the objective weight on the
    switch's noise term and ``reactance`` the per-unit reactance used when
    the switch is modeled closed.
    """

    id: int
    from_node: int
    to_node: int
    status: Status = Status.CLOSED
    weight: float = DEFAULT_SWITCH_WEIGHT
    reactance: float = DEFAULT_SWITCH_REACTANCE


@dataclass(frozen=True)
class Branch:
    """A transmission line in pi representation.

    ``conductance``/``susceptance`` are the SERIES admittance components in
    p.u.; ``charging`` is the total line-charging susceptance (half stamped
    at each end).
    """

    id: int
    from_node: int
    to_node: int
    conductance: float
    susceptance: float
    charging: float = 0.0


@dataclass(frozen=True)
class Transformer:
    """Two-winding transformer: ideal ratio ``tap``∠``phase_shift`` in series
    with admittance ``conductance + j*susceptance`` (p.u., from-side)."""

    id: int
    from_node: int
    to_node: int
    conductance: float
    susceptance: float
    tap: float = 1.0
    phase_shift: float = 0.0


@dataclass(frozen=True)
class Shunt:
    """Fixed shunt admittance to ground at one node (p.u.)."""

    id: int
    node: int
    conductance: float
    susceptance: float


@dataclass(frozen=True)
class MeterPlacement:
    """Placement and weighting of one metering device.

    ``weight`` is the objective weight of the meter's current noise terms
    (the alpha of an RTU, the beta of a PMU).  ``voltage_weight`` applies to
    a PMU's voltage noise terms (gamma) and is ignored for RTU kinds.
    Line-flow meters reference the metered ``branch``; ``node`` is the
    metered end.
    """

    id: str
    kind: MeterKind
    node: int
    branch: int | None = None
    weight: float = 1.0
    voltage_weight: float | None = None


@dataclass(frozen=True)
class NBCase:
    """Immutable node-breaker case description.

    Attributes:
        base_mva: System base power in MVA; positive.
        nodes / switches / branches / transformers / shunts / meters:
            Device tuples; ids unique within each category.
        reference_node: Optional node pinned as the angle reference when no
            synchronized (PMU) measurement anchors an island.
    """

    base_mva: float
    nodes: tuple[NodeSection, ...]
    switches: tuple[Switch, ...] = ()
    branches: tuple[Branch, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    meters: tuple[MeterPlacement, ...] = ()
    reference_node: int | None = None

    def __post_init__(self):
        for f in ("nodes", "switches", "branches", "transformers", "shunts", "meters"):
            object.__setattr__(self, f, tuple(getattr(self, f)))

    @cached_property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes)

    @cached_property
    def node_index(self) -> dict[int, int]:
        """Node id -> dense position, in declaration order."""
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def node_by_id(self) -> dict[int, NodeSection]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def switch_by_id(self) -> dict[int, Switch]:
        return {s.id: s for s in self.switches}

    @cached_property
    def branch_by_id(self) -> dict[int, Branch]:
        return {b.id: b for b in self.branches}

    @cached_property
    def meter_by_id(self) -> dict[str, MeterPlacement]:
        return {m.id: m for m in self.meters}

    def meters_of_kind(self, kind: MeterKind) -> tuple[MeterPlacement, ...]:
        return tuple(m for m in self.meters if m.kind == kind)


@dataclass(frozen=True)
class RtuReading:
    """One RTU snapshot: injection (or line flow) P, Q and |V| at the meter."""

    p: float
    q: float
    v_mag: float


@dataclass(frozen=True)
class PmuReading:
    """One PMU snapshot: voltage and injected-current phasors (rectangular)."""

    v_re: float
    v_im: float
    i_re: float
    i_im: float


@dataclass(frozen=True)
class MeasurementSet:
    """One timestamped snapshot of analog readings and reported statuses.

    ``rtu``/``lineflow``/``pmu`` map meter ids to readings; ``statuses`` maps
    switch ids to the reported :class:`Status` for this snapshot. Switches
    missing from ``statuses`` fall back to the case's normal status (see
    :func:`effective_statuses`).
    """

    timestamp: str = ""
    rtu: dict[str, RtuReading] = field(default_factory=dict)
    lineflow: dict[str, RtuReading] = field(default_factory=dict)
    pmu: dict[str, PmuReading] = field(default_factory=dict)
    statuses: dict[int, Status] = field(default_factory=dict)

    def reading_for(self, meter: MeterPlacement):
        table = {
            MeterKind.RTU_INJECTION: self.rtu,
            MeterKind.RTU_LINEFLOW: self.lineflow,
            MeterKind.PMU_INJECTION: self.pmu,
        }[meter.kind]
        return table.get(meter.id)


def effective_statuses(case: NBCase, meas: MeasurementSet | None = None) -> dict[int, Status]:
    """Reported status per switch: snapshot value, else the case's filed one."""
    out = {s.id: s.status for s in case.switches}
    if meas is not None:
        for sid, st in meas.statuses.items():
            out[sid] = st
    return out


# ---------------------------------------------------------------------------
# validation

def validate_case(case: NBCase) -> None:
    """Check every case invariant; raise CaseValidationError listing all violations."""
    problems = []
    if not case.base_mva > 0:
        problems.append(f"base_mva must be positive, got {case.base_mva}")
    if not case.nodes:
        problems.append("case has no nodes")

    seen = set()
    for n in case.nodes:
        if n.id in seen:
            problems.append(f"duplicate node id {n.id}")
        seen.add(n.id)
        if not n.nominal_kv > 0:
            problems.append(f"node {n.id}: nominal_kv must be positive")
    node_ids = seen

    def check_endpoint(kind, dev_id, node_id):
        if node_id not in node_ids:
            problems.append(f"{kind} {dev_id}: references missing node {node_id}")

    seen = set()
    for s in case.switches:
        if s.id in seen:
            problems.append(f"duplicate switch id {s.id}")
        seen.add(s.id)
        check_endpoint("switch", s.id, s.from_node)
        check_endpoint("switch", s.id, s.to_node)
        if s.from_node == s.to_node:
            problems.append(f"switch {s.id}: connects node {s.from_node} to itself")
        if not s.reactance > 0:
            problems.append(f"switch {s.id}: reactance must be positive")
        if s.weight < 0:
            problems.append(f"switch {s.id}: weight must be nonnegative")

    seen = set()
    for b in case.branches:
        if b.id in seen:
            problems.append(f"duplicate branch id {b.id}")
        seen.add(b.id)
        check_endpoint("branch", b.id, b.from_node)
        check_endpoint("branch", b.id, b.to_node)
        if b.conductance == 0.0 and b.susceptance == 0.0:
            problems.append(f"branch {b.id}: series admittance is zero")

    seen = set()
    for t in case.transformers:
        if t.id in seen:
            problems.append(f"duplicate transformer id {t.id}")
        seen.add(t.id)
        check_endpoint("transformer", t.id, t.from_node)
        check_endpoint("transformer", t.id, t.to_node)
        if not t.tap > 0:
            problems.append(f"transformer {t.id}: tap must be positive")

    seen = set()
    for sh in case.shunts:
        if sh.id in seen:
            problems.append(f"duplicate shunt id {sh.id}")
        seen.add(sh.id)
        check_endpoint("shunt", sh.id, sh.node)

    branch_by_id = {b.id: b for b in case.branches}
    zero_inj = {n.id for n in case.nodes if n.zero_injection}
    seen = set()
    for m in case.meters:
        if m.id in seen:
            problems.append(f"duplicate meter id {m.id}")
        seen.add(m.id)
        check_endpoint("meter", m.id, m.node)
        if m.weight < 0:
            problems.append(f"meter {m.id}: weight must be nonnegative")
        if m.kind == MeterKind.RTU_LINEFLOW:
            br = branch_by_id.get(m.branch)
            if br is None:
                problems.append(f"meter {m.id}: references missing branch {m.branch}")
            elif m.node not in (br.from_node, br.to_node):
                problems.append(
                    f"meter {m.id}: metered node {m.node} is not an endpoint of branch {m.branch}"
                )
        if m.kind == MeterKind.PMU_INJECTION:
            if m.voltage_weight is not None and m.voltage_weight < 0:
                problems.append(f"meter {m.id}: voltage_weight must be nonnegative")
        if m.kind != MeterKind.RTU_LINEFLOW and m.node in zero_inj:
            problems.append(
                f"meter {m.id}: node {m.node} is declared zero-injection but hosts an injection meter"
            )

    if case.reference_node is not None and case.reference_node not in node_ids:
        problems.append(f"reference node {case.reference_node} does not exist")

    if problems:
        raise CaseValidationError(problems)


def validate_measurements(meas: MeasurementSet, case: NBCase) -> None:
    """Check snapshot consistency against the declaring case."""
    problems = []
    meters = case.meter_by_id
    for mid, reading in list(meas.rtu.items()) + list(meas.lineflow.items()):
        m = meters.get(mid)
        if m is None:
            problems.append(f"measurement references unknown meter {mid}")
            continue
        if not reading.v_mag > 0:
            problems.append(f"meter {mid}: |V| must be positive, got {reading.v_mag}")
    for mid in meas.rtu:
        m = meters.get(mid)
        if m is not None and m.kind != MeterKind.RTU_INJECTION:
            problems.append(f"meter {mid}: RTU-injection reading for a {m.kind.value} meter")
    for mid in meas.lineflow:
        m = meters.get(mid)
        if m is not None and m.kind != MeterKind.RTU_LINEFLOW:
            problems.append(f"meter {mid}: line-flow reading for a {m.kind.value} meter")
    for mid in meas.pmu:
        m = meters.get(mid)
        if m is None:
            problems.append(f"measurement references unknown meter {mid}")
        elif m.kind != MeterKind.PMU_INJECTION:
            problems.append(f"meter {mid}: PMU reading for a {m.kind.value} meter")
    switch_ids = {s.id for s in case.switches}
    for sid in meas.statuses:
        if sid not in switch_ids:
            problems.append(f"status row references unknown switch {sid}")
    if problems:
        raise MeasurementError("; ".join(problems))


# ---------------------------------------------------------------------------
# text format

def _iter_section_lines(text: str):
    """Yield (section, line_no, tokens) for every payload line of the file."""
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section is None:
            raise FormatError(f"data before any section header: {line!r}", line_no=line_no)
        yield section, line_no, line.split()


def _parse_float(token, what, section, line_no):
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"{what}: expected a number, got {token!r}", section, line_no) from None


def _parse_int(token, what, section, line_no):
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"{what}: expected an integer, got {token!r}", section, line_no) from None


def _parse_bool(token, what, section, line_no):
    if token in ("0", "1"):
        return token == "1"
    raise FormatError(f"{what}: expected 0 or 1, got {token!r}", section, line_no)


def _parse_status(token, section, line_no):
    try:
        return Status(token.lower())
    except ValueError:
        raise FormatError(f"status must be open or closed, got {token!r}", section, line_no) from None


def _kv(tokens, section, line_no):
    if len(tokens) >= 3 and tokens[1] == "=":
        return tokens[0], " ".join(tokens[2:])
    raise FormatError("expected 'key = value'", section, line_no)


def _opt(token, parse, *args):
    return None if token == "-" else parse(token, *args)


def parse_case(text: str) -> NBCase:
    """Parse case-file text into a validated :class:`NBCase`.

    Raises FormatError on schema violations (naming the field and line) and
    CaseValidationError when the parsed case breaks a model invariant.
    """
    base_mva = None
    reference = None
    nodes, switches, branches, transformers, shunts, meters = [], [], [], [], [], []

    for section, ln, tok in _iter_section_lines(text):
        if section == "case":
            key, value = _kv(tok, section, ln)
            if key == "base_mva":
                base_mva = _parse_float(value, "base_mva", section, ln)
            elif key == "reference":
                reference = _parse_int(value, "reference", section, ln)
            else:
                raise FormatError(f"unknown key {key!r}", section, ln)
        elif section == "nodes":
            if len(tok) != 4:
                raise FormatError("node row needs: id substation kv zero_injection", section, ln)
            nodes.append(NodeSection(
                id=_parse_int(tok[0], "node id", section, ln),
                substation=tok[1],
                nominal_kv=_parse_float(tok[2], "nominal_kv", section, ln),
                zero_injection=_parse_bool(tok[3], "zero_injection", section, ln),
            ))
        elif section == "switches":
            if len(tok) != 6:
                raise FormatError("switch row needs: id from to status weight reactance", section, ln)
            switches.append(Switch(
                id=_parse_int(tok[0], "switch id", section, ln),
                from_node=_parse_int(tok[1], "from node", section, ln),
                to_node=_parse_int(tok[2], "to node", section, ln),
                status=_parse_status(tok[3], section, ln),
                weight=_parse_float(tok[4], "weight", section, ln),
                reactance=_parse_float(tok[5], "reactance", section, ln),
            ))
        elif section == "branches":
            if len(tok) != 6:
                raise FormatError("branch row needs: id from to g b charging", section, ln)
            branches.append(Branch(
                id=_parse_int(tok[0], "branch id", section, ln),
                from_node=_parse_int(tok[1], "from node", section, ln),
                to_node=_parse_int(tok[2], "to node", section, ln),
                conductance=_parse_float(tok[3], "conductance", section, ln),
                susceptance=_parse_float(tok[4], "susceptance", section, ln),
                charging=_parse_float(tok[5], "charging", section, ln),
            ))
        elif section == "transformers":
            if len(tok) != 7:
                raise FormatError("transformer row needs: id from to g b tap shift", section, ln)
            transformers.append(Transformer(
                id=_parse_int(tok[0], "transformer id", section, ln),
                from_node=_parse_int(tok[1], "from node", section, ln),
                to_node=_parse_int(tok[2], "to node", section, ln),
                conductance=_parse_float(tok[3], "conductance", section, ln),
                susceptance=_parse_float(tok[4], "susceptance", section, ln),
                tap=_parse_float(tok[5], "tap", section, ln),
                phase_shift=_parse_float(tok[6], "shift", section, ln),
            ))
        elif section == "shunts":
            if len(tok) != 4:
                raise FormatError("shunt row needs: id node g b", section, ln)
            shunts.append(Shunt(
                id=_parse_int(tok[0], "shunt id", section, ln),
                node=_parse_int(tok[1], "node", section, ln),
                conductance=_parse_float(tok[2], "conductance", section, ln),
                susceptance=_parse_float(tok[3], "susceptance", section, ln),
            ))
        elif section == "meters":
            if len(tok) != 6:
                raise FormatError("meter row needs: id kind node branch weight vweight", section, ln)
            try:
                kind = MeterKind(tok[1].lower())
            except ValueError:
                raise FormatError(f"unknown meter kind {tok[1]!r}", section, ln) from None
            meters.append(MeterPlacement(
                id=tok[0],
                kind=kind,
                node=_parse_int(tok[2], "node", section, ln),
                branch=_opt(tok[3], _parse_int, "branch", section, ln),
                weight=_parse_float(tok[4], "weight", section, ln),
                voltage_weight=_opt(tok[5], _parse_float, "vweight", section, ln),
            ))
        elif section in ("loads", "gens", "noise", "inject"):
            continue  # scenario sections; handled by gsekit.scenario
        else:
            raise FormatError(f"unknown section [{section}]", section, ln)

    if base_mva is None:
        raise FormatError("missing [case] section with base_mva")
    case = NBCase(
        base_mva=base_mva,
        nodes=tuple(nodes),
        switches=tuple(switches),
        branches=tuple(branches),
        transformers=tuple(transformers),
        shunts=tuple(shunts),
        meters=tuple(meters),
        reference_node=reference,
    )
    validate_case(case)
    return case


def serialize_case(case: NBCase) -> str:
    """Render a case back to its text format; exact float round trip."""
    out = ["[case]", f"base_mva = {case.base_mva!r}"]
    if case.reference_node is not None:
        out.append(f"reference = {case.reference_node}")
    out += ["", "[nodes]", "# id substation kv zero_injection"]
    for n in case.nodes:
        out.append(f"{n.id} {n.substation} {n.nominal_kv!r} {int(n.zero_injection)}")
    out += ["", "[switches]", "# id from to status weight reactance"]
    for s in case.switches:
        out.append(f"{s.id} {s.from_node} {s.to_node} {s.status.value} {s.weight!r} {s.reactance!r}")
    out += ["", "[branches]", "# id from to g b charging"]
    for b in case.branches:
        out.append(f"{b.id} {b.from_node} {b.to_node} {b.conductance!r} {b.susceptance!r} {b.charging!r}")
    out += ["", "[transformers]", "# id from to g b tap shift"]
    for t in case.transformers:
        out.append(
            f"{t.id} {t.from_node} {t.to_node} {t.conductance!r} {t.susceptance!r} {t.tap!r} {t.phase_shift!r}"
        )
    out += ["", "[shunts]", "# id node g b"]
    for sh in case.shunts:
        out.append(f"{sh.id} {sh.node} {sh.conductance!r} {sh.susceptance!r}")
    out += ["", "[meters]", "# id kind node branch weight vweight"]
    for m in case.meters:
        branch = "-" if m.branch is None else str(m.branch)
        vw = "-" if m.voltage_weight is None else repr(m.voltage_weight)
        out.append(f"{m.id} {m.kind.value} {m.node} {branch} {m.weight!r} {vw}")
    return "\n".join(out) + "\n"


_ARITY = {MeterKind.RTU_INJECTION: 3, MeterKind.RTU_LINEFLOW: 3, MeterKind.PMU_INJECTION: 4}


def parse_measurements(text: str, case: NBCase) -> MeasurementSet:
    """Parse a measurement snapshot and bind every entry to the case."""
    timestamp = ""
    rtu, lineflow, pmu, statuses = {}, {}, {}, {}
    meters = case.meter_by_id

    for section, ln, tok in _iter_section_lines(text):
        if section == "snapshot":
            key, value = _kv(tok, section, ln)
            if key == "timestamp":
                timestamp = value
            else:
                raise FormatError(f"unknown key {key!r}", section, ln)
        elif section == "analog":
            mid = tok[0]
            m = meters.get(mid)
            if m is None:
                raise FormatError(f"unknown meter id {mid!r}", section, ln)
            vals = [_parse_float(t, f"meter {mid} value", section, ln) for t in tok[1:]]
            if len(vals) != _ARITY[m.kind]:
                raise FormatError(
                    f"meter {mid} ({m.kind.value}) needs {_ARITY[m.kind]} values, got {len(vals)}",
                    section, ln,
                )
            if m.kind == MeterKind.RTU_INJECTION:
                rtu[mid] = RtuReading(*vals)
            elif m.kind == MeterKind.RTU_LINEFLOW:
                lineflow[mid] = RtuReading(*vals)
            else:
                pmu[mid] = PmuReading(*vals)
        elif section == "statuses":
            if len(tok) != 2:
                raise FormatError("status row needs: switch_id status", section, ln)
            sid = _parse_int(tok[0], "switch id", section, ln)
            statuses[sid] = _parse_status(tok[1], section, ln)
        else:
            raise FormatError(f"unknown section [{section}]", section, ln)

    meas = MeasurementSet(timestamp=timestamp, rtu=rtu, lineflow=lineflow, pmu=pmu, statuses=statuses)
    validate_measurements(meas, case)
    return meas


def serialize_measurements(meas: MeasurementSet, case: NBCase) -> str:
    """Render a snapshot to text, meters in case declaration order."""
    out = ["[snapshot]", f"timestamp = {meas.timestamp or 't0'}", "", "[analog]"]
    for m in case.meters:
        r = meas.reading_for(m)
        if r is None:
            continue
        if isinstance(r, RtuReading):
            out.append(f"{m.id} {r.p!r} {r.q!r} {r.v_mag!r}")
        else:
            out.append(f"{m.id} {r.v_re!r} {r.v_im!r} {r.i_re!r} {r.i_im!r}")
    out += ["", "[statuses]"]
    for s in case.switches:
        if s.id in meas.statuses:
            out.append(f"{s.id} {meas.statuses[s.id].value}")
    return "\n".join(out) + "\n"
