"""Network data model, grid/plan file formats and topology handling.

Grid files are sectioned CSV::

    [meta]      base_kv,<float> / base_mva,<float>
    [buses]     id,kind,p_kw,q_kvar
    [lines]     id,from,to,r_ohm,x_ohm,switch     (switch = int or "-")
    [pmus]      bus

Lines starting with ``#`` are comments. A header row inside a section is
optional. Values are kept in their file units on the objects (so a
serialise/parse round trip is exact); per-unit values are derived once.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ParseError, ValidationError

DEFAULT_BASE_KV = 12.66
DEFAULT_BASE_MVA = 10.0

SUBSTATION = "substation"
LOAD = "load"

Topology = tuple  # ordered 0/1 switch statuses, the topology vector


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_kw: float = 0.0
    q_kvar: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float
    switch_id: int | None = None


@dataclass(frozen=True)
class Switch:
    id: int
    line: int  # position of the line in NetworkModel.lines


def line_admittance(r, x):
    """Series admittance ``g + jb`` of an ``r + jx`` branch (per-unit in, per-unit out)."""
    r = np.asarray(r, dtype=float)
    x = np.asarray(x, dtype=float)
    den = r * r + x * x
    if np.any(den == 0.0):
        raise ValidationError("zero-impedance line")
    g = r / den
    b = -x / den
    if g.ndim == 0:
        return float(g), float(b)
    return g, b


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple
    lines: tuple
    pmu_buses: tuple
    base_kv: float = DEFAULT_BASE_KV
    base_mva: float = DEFAULT_BASE_MVA
    switches: tuple = field(init=False)

    def __post_init__(self):
        _validate(self)
        switches = sorted(
            (Switch(ln.switch_id, k) for k, ln in enumerate(self.lines) if ln.switch_id is not None),
            key=lambda s: s.id,
        )
        object.__setattr__(self, "switches", tuple(switches))
        # cached numeric views, all 0-based
        z_base = self.base_kv ** 2 / self.base_mva
        r = np.array([ln.r_ohm for ln in self.lines]) / z_base
        x = np.array([ln.x_ohm for ln in self.lines]) / z_base
        g, b = line_admittance(r, x) if len(self.lines) else (np.zeros(0), np.zeros(0))
        arrays = {
            "r_pu": r,
            "x_pu": x,
            "g": np.atleast_1d(g),
            "b": np.atleast_1d(b),
            "f": np.array([ln.from_bus - 1 for ln in self.lines], dtype=int),
            "t": np.array([ln.to_bus - 1 for ln in self.lines], dtype=int),
            "p_nom": np.array([bs.p_kw for bs in self.buses]) / (1000.0 * self.base_mva),
            "q_nom": np.array([bs.q_kvar for bs in self.buses]) / (1000.0 * self.base_mva),
            "switch_line": np.array([s.line for s in switches], dtype=int),
        }
        for v in arrays.values():
            v.setflags(write=False)
        object.__setattr__(self, "_arr", arrays)

    def __eq__(self, other):
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return (self.buses, self.lines, self.pmu_buses, self.base_kv, self.base_mva) == (
            other.buses, other.lines, other.pmu_buses, other.base_kv, other.base_mva)

    def __hash__(self):
        return hash((self.buses, self.lines, self.pmu_buses, self.base_kv, self.base_mva))

    # -- sizes -----------------------------------------------------------
    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_line(self):
        return len(self.lines)

    @property
    def n_switch(self):
        return len(self.switches)

    # -- per-unit arrays (read-only) ---------------------------------------
    @property
    def g(self):
        return self._arr["g"]

    @property
    def b(self):
        return self._arr["b"]

    @property
    def r_pu(self):
        return self._arr["r_pu"]

    @property
    def x_pu(self):
        return self._arr["x_pu"]

    @property
    def from_idx(self):
        return self._arr["f"]

    @property
    def to_idx(self):
        return self._arr["t"]

    @property
    def nominal_p(self):
        return self._arr["p_nom"]

    @property
    def nominal_q(self):
        return self._arr["q_nom"]

    @property
    def switch_lines(self):
        """Line positions of switches 0..E-1."""
        return self._arr["switch_line"]

    @property
    def slack(self):
        """0-based index of the substation bus."""
        return next(k for k, bs in enumerate(self.buses) if bs.kind == SUBSTATION)

    @property
    def load_buses(self):
        """0-based indices of load buses, in bus order."""
        return tuple(k for k, bs in enumerate(self.buses) if bs.kind == LOAD)

    @property
    def pmu_idx(self):
        return tuple(b - 1 for b in self.pmu_buses)

    @property
    def n_topologies(self):
        return 2 ** self.n_switch

    def line_in_service(self, topo):
        """Boolean mask of energized lines under topology ``topo``."""
        topo = check_topology(self, topo)
        mask = np.ones(self.n_line, dtype=bool)
        for s, st in zip(self.switches, topo):
            mask[s.line] = bool(st)
        return mask

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / (1000.0 * self.base_mva)

    def pu_to_kw(self, pu):
        return np.asarray(pu, dtype=float) * (1000.0 * self.base_mva)


def _validate(m):
    if not (m.base_kv > 0 and m.base_mva > 0):
        raise ValidationError("base_kv and base_mva must be positive")
    ids = [bs.id for bs in m.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus id")
    if ids != list(range(1, len(ids) + 1)):
        raise ValidationError("bus ids must be contiguous 1..N in file order")
    kinds = [bs.kind for bs in m.buses]
    for k in kinds:
        if k not in (SUBSTATION, LOAD):
            raise ValidationError(f"unknown bus kind {k!r}")
    if kinds.count(SUBSTATION) != 1:
        raise ValidationError("exactly one substation bus is required")
    for bs in m.buses:
        if bs.p_kw < 0:
            raise ValidationError(f"bus {bs.id}: negative active demand")
        if bs.kind == SUBSTATION and (bs.p_kw != 0 or bs.q_kvar != 0):
            raise ValidationError("substation bus cannot carry load")
    line_ids = [ln.id for ln in m.lines]
    if len(set(line_ids)) != len(line_ids):
        raise ValidationError("duplicate line id")
    sw = [ln.switch_id for ln in m.lines if ln.switch_id is not None]
    if len(set(sw)) != len(sw):
        raise ValidationError("duplicate switch id")
    if sorted(sw) != list(range(len(sw))):
        raise ValidationError("switch ids must be 0..E-1 without gaps")
    n = len(ids)
    for ln in m.lines:
        if not (1 <= ln.from_bus <= n and 1 <= ln.to_bus <= n):
            raise ValidationError(f"line {ln.id}: unknown endpoint")
        if ln.from_bus == ln.to_bus:
            raise ValidationError(f"line {ln.id}: self loop")
        if ln.r_ohm < 0:
            raise ValidationError(f"line {ln.id}: negative resistance")
        if ln.r_ohm == 0 and ln.x_ohm == 0:
            raise ValidationError(f"line {ln.id}: zero impedance")
    if len(set(m.pmu_buses)) != len(m.pmu_buses):
        raise ValidationError("duplicate PMU bus")
    for b in m.pmu_buses:
        if not 1 <= b <= n:
            raise ValidationError(f"PMU at unknown bus {b}")
    ncomp, _ = _components(n, [ln.from_bus - 1 for ln in m.lines], [ln.to_bus - 1 for ln in m.lines])
    if ncomp != 1:
        raise ValidationError("network is disconnected even with every switch closed")


def _components(n, f, t):
    f = np.asarray(f, dtype=int)
    t = np.asarray(t, dtype=int)
    adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    return connected_components(adj, directed=False)


def check_topology(model, topo):
    topo = tuple(int(v) for v in topo)
    if len(topo) != model.n_switch:
        raise ValidationError(f"topology has {len(topo)} entries, network has {model.n_switch} switches")
    if any(v not in (0, 1) for v in topo):
        raise ValidationError("switch statuses must be 0 or 1")
    return topo


def all_topologies(model):
    """Every topology vector, in lexicographic order."""
    e = model.n_switch
    return [tuple((k >> (e - 1 - j)) & 1 for j in range(e)) for k in range(2 ** e)]


@dataclass(frozen=True)
class EnergizedGraph:
    lines: tuple          # positions of energized lines
    n_components: int
    labels: np.ndarray    # component label per bus
    n_loops: int          # cyclomatic number: lines - buses + components

    def connected(self):
        return self.n_components == 1

    def component_of(self, bus_idx):
        return np.flatnonzero(self.labels == self.labels[bus_idx])

    def connected_pairs(self):
        _, counts = np.unique(self.labels, return_counts=True)
        return int(sum(c * (c - 1) // 2 for c in counts))


def apply_topology(model, topo):
    """Energized sub-multigraph for a topology; islands are legal output."""
    mask = model.line_in_service(topo)
    idx = np.flatnonzero(mask)
    ncomp, labels = _components(model.n_bus, model.from_idx[idx], model.to_idx[idx])
    loops = len(idx) - model.n_bus + ncomp
    return EnergizedGraph(tuple(int(i) for i in idx), int(ncomp), labels, int(loops))


# ---------------------------------------------------------------------------
# text formats

def _sections(text):
    """Yield (section, lineno, fields) for every data row."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"bad section header {line!r}", lineno)
            section = line[1:-1].strip().lower()
            continue
        if section is None:
            raise ParseError("data row outside of any section", lineno)
        yield section, lineno, [c.strip() for c in line.split(",")]


def _num(tok, lineno, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise ParseError(f"cannot read {tok!r} as {kind.__name__}", lineno) from None


_HEADERS = {
    "buses": ["id", "kind", "p_kw", "q_kvar"],
    "lines": ["id", "from", "to", "r_ohm", "x_ohm", "switch"],
    "pmus": ["bus"],
    "events": ["t_sec", "switch_id", "status"],
}


def parse_grid(text):
    meta = {"base_kv": DEFAULT_BASE_KV, "base_mva": DEFAULT_BASE_MVA}
    buses, lines, pmus = [], [], []
    seen = set()
    for section, lineno, row in _sections(text):
        if section in _HEADERS and row == _HEADERS[section]:
            continue
        if section == "meta":
            if len(row) != 2 or row[0] not in meta:
                raise ParseError(f"bad meta row {row}", lineno)
            meta[row[0]] = _num(row[1], lineno)
        elif section == "buses":
            if len(row) != 4:
                raise ParseError("bus rows need 4 columns: id,kind,p_kw,q_kvar", lineno)
            bid = _num(row[0], lineno, int)
            kind = row[1].lower()
            if kind not in (SUBSTATION, LOAD):
                raise ParseError(f"unknown bus kind {row[1]!r}", lineno)
            buses.append(Bus(bid, kind, _num(row[2], lineno), _num(row[3], lineno)))
        elif section == "lines":
            if len(row) != 6:
                raise ParseError("line rows need 6 columns: id,from,to,r_ohm,x_ohm,switch", lineno)
            sw = None if row[5] in ("-", "") else _num(row[5], lineno, int)
            ln = Line(_num(row[0], lineno, int), _num(row[1], lineno, int), _num(row[2], lineno, int),
                      _num(row[3], lineno), _num(row[4], lineno), sw)
            if ln.r_ohm == 0 and ln.x_ohm == 0:
                raise ParseError(f"line {ln.id} has zero impedance", lineno)
            lines.append(ln)
        elif section == "pmus":
            if len(row) != 1:
                raise ParseError("pmu rows have a single bus column", lineno)
            pmus.append(_num(row[0], lineno, int))
        else:
            raise ParseError(f"unknown section [{section}]", lineno)
        seen.add(section)
    for req in ("buses", "lines"):
        if req not in seen:
            raise ValidationError(f"missing [{req}] section")
    bus_order = sorted(buses, key=lambda bs: bs.id)
    return NetworkModel(tuple(bus_order), tuple(lines), tuple(pmus), meta["base_kv"], meta["base_mva"])


def serialize_grid(model):
    out = io.StringIO()
    out.write("[meta]\n")
    out.write(f"base_kv,{model.base_kv!r}\nbase_mva,{model.base_mva!r}\n\n[buses]\n")
    out.write(",".join(_HEADERS["buses"]) + "\n")
    for bs in model.buses:
        out.write(f"{bs.id},{bs.kind},{bs.p_kw!r},{bs.q_kvar!r}\n")
    out.write("\n[lines]\n" + ",".join(_HEADERS["lines"]) + "\n")
    for ln in model.lines:
        sw = "-" if ln.switch_id is None else str(ln.switch_id)
        out.write(f"{ln.id},{ln.from_bus},{ln.to_bus},{ln.r_ohm!r},{ln.x_ohm!r},{sw}\n")
    out.write("\n[pmus]\nbus\n")
    for b in model.pmu_buses:
        out.write(f"{b}\n")
    return out.getvalue()


def load_grid(path):
    with open(path, encoding="utf-8") as fh:
        return parse_grid(fh.read())


def fixture_text(name="ieee33.grid"):
    return resources.files("topoest.data").joinpath(name).read_text(encoding="utf-8")


def ieee33():
    """The bundled modified 33-bus feeder with five tie switches."""
    return parse_grid(fixture_text("ieee33.grid"))


# ---------------------------------------------------------------------------
# switch plans

@dataclass(frozen=True)
class SwitchPlan:
    """Switching events ``(t_sec, switch_id, status)`` sorted by time."""

    events: tuple

    @property
    def n_switch(self):
        return 1 + max(e[1] for e in self.events) if self.events else 0

    def topology_at(self, t):
        state = {}
        for te, sw, st in self.events:
            if te <= t + 1e-9:
                state[sw] = st
        return tuple(state[k] for k in range(len(state)))

    def change_times(self):
        return sorted({te for te, _, _ in self.events if te > 0})

    @classmethod
    def constant(cls, topo):
        return cls(tuple((0.0, k, int(v)) for k, v in enumerate(topo)))

    @classmethod
    def step(cls, before, after, t_change):
        ev = [(0.0, k, int(v)) for k, v in enumerate(before)]
        ev += [(float(t_change), k, int(v)) for k, (u, v) in enumerate(zip(before, after)) if u != v]
        return cls(tuple(ev))


def parse_plan(text, n_switch=None):
    events = []
    for section, lineno, row in _sections(text):
        if section != "events":
            raise ParseError(f"unknown section [{section}] in switch plan", lineno)
        if row == _HEADERS["events"]:
            continue
        if len(row) != 3:
            raise ParseError("event rows need 3 columns: t_sec,switch_id,status", lineno)
        t = _num(row[0], lineno)
        sw = _num(row[1], lineno, int)
        st = _num(row[2], lineno, int)
        if st not in (0, 1):
            raise ParseError("status must be 0 or 1", lineno)
        if t < 0:
            raise ParseError("negative event time", lineno)
        events.append((t, sw, st))
    events.sort(key=lambda e: e[0])
    initial = {sw for t, sw, _ in events if t == 0}
    count = n_switch if n_switch is not None else (1 + max((e[1] for e in events), default=-1))
    if initial != set(range(count)):
        raise ValidationError("plan must give a t_sec=0 status for every switch")
    if any(sw >= count or sw < 0 for _, sw, _ in events):
        raise ValidationError("plan refers to an unknown switch")
    return SwitchPlan(tuple(events))


def serialize_plan(plan):
    rows = ["[events]", ",".join(_HEADERS["events"])]
    for t, sw, st in plan.events:
        rows.append(f"{t:g},{sw},{st}")
    return "\n".join(rows) + "\n"


def load_plan(path, n_switch=None):
    with open(path, encoding="utf-8") as fh:
        return parse_plan(fh.read(), n_switch)


def fig3_plan():
    return parse_plan(fixture_text("fig3.plan"), 5)
