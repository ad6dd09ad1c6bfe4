"""Scenario synthesis: load profiles, ground truth and noisy measurements.

Randomness comes from Philox generators keyed by ``(seed, scenario index)``
so scenarios can be built in any order or in parallel with identical output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .acpf import LoadSnapshot, bus_injections, solve_acpf
from .errors import ParseError, SolverError, ValidationError

METER_FLOOR = 1e-4
PMU_SIGMA_FACTOR = 1.0 / (3.0 * np.sqrt(2.0))


def make_rng(seed, index=0, stream=0):
    """Philox generator for one (seed, scenario index, stream) triple."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PmuMeasurement:
    bus: int
    magnitude: float
    angle: float
    sigma_mag: float
    sigma_ang: float


@dataclass(frozen=True)
class MeterMeasurement:
    bus: int
    p: float
    q: float
    sigma_p: float
    sigma_q: float


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    t: float
    pmu: tuple
    meters: tuple
    substation: MeterMeasurement

    def arrays(self):
        """Vectorised view, with 0-based bus indices."""
        a = self.__dict__.get("_arrays")
        if a is None:
            a = {
                "pmu_idx": np.array([m.bus - 1 for m in self.pmu], dtype=int),
                "vm": np.array([m.magnitude for m in self.pmu]),
                "va": np.array([m.angle for m in self.pmu]),
                "s_vm": np.array([m.sigma_mag for m in self.pmu]),
                "s_va": np.array([m.sigma_ang for m in self.pmu]),
                "meter_idx": np.array([m.bus - 1 for m in self.meters], dtype=int),
                "p": np.array([m.p for m in self.meters]),
                "q": np.array([m.q for m in self.meters]),
                "s_p": np.array([m.sigma_p for m in self.meters]),
                "s_q": np.array([m.sigma_q for m in self.meters]),
            }
            object.__setattr__(self, "_arrays", a)
        return a

    def validate(self, model):
        if sorted(m.bus for m in self.pmu) != sorted(model.pmu_buses):
            raise ValidationError("need exactly one PMU entry per PMU bus")
        if sorted(m.bus - 1 for m in self.meters) != sorted(model.load_buses):
            raise ValidationError("need exactly one meter per load bus")
        if self.substation.bus - 1 != model.slack:
            raise ValidationError("substation entry must sit at the substation bus")
        sig = [s for m in self.pmu for s in (m.sigma_mag, m.sigma_ang)]
        sig += [s for m in (*self.meters, self.substation) for s in (m.sigma_p, m.sigma_q)]
        if any(not (s > 0 and np.isfinite(s)) for s in sig):
            raise ValidationError("all sigmas must be positive and finite")


@dataclass(frozen=True)
class NoiseConfig:
    pmu_tve: float = 0.0005
    meter_rel: float = 0.10
    substation_rel: float = 0.01
    floor: float = METER_FLOOR
    enabled: bool = True
    meters_noisy: bool = True

    @classmethod
    def off(cls):
        return cls(enabled=False)

    @classmethod
    def pmu_only(cls):
        return cls(meters_noisy=False)


@dataclass(frozen=True)
class LoadConfig:
    """How per-instant loads evolve.

    ``profile`` is one of:
    ``fluctuation``: independent draws around nominal each instant;
    ``random_walk``: compounded multiplicative steps;
    ``residential``: aggregated on/off household demand;
    ``csv``: externally supplied snapshots in ``snapshots``.
    The first two use ``sd_change`` as the SD of the relative step change.
    """

    sd_change: float = 0.0222
    profile: str = "fluctuation"
    scale: float = 1.0
    n_instants: int = 101
    dt: float = 10.0
    snapshots: tuple | None = None


@dataclass(frozen=True, eq=False)
class Scenario:
    times: tuple
    truth_topology: tuple
    truth_state: tuple
    truth_loads: tuple
    measurements: tuple
    seed: int
    index: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)


# ---------------------------------------------------------------------------
# loads


def synthesize_loads(base, sd_change, n, rng, kind="random_walk"):
    """Load snapshots whose step-to-step relative change has SD ``sd_change``.

    ``fluctuation`` draws each instant independently around ``base`` (level
    SD ``sd_change / sqrt(2)``); ``random_walk`` compounds the steps. The
    first snapshot is ``base`` in both cases; q follows p's factor.
    """
    if sd_change < 0:
        raise ValidationError("sd_change must be non-negative")
    if kind not in ("fluctuation", "random_walk"):
        raise ValidationError(f"unknown load process {kind!r}")
    p0 = np.asarray(base.p, dtype=float)
    q0 = np.asarray(base.q, dtype=float)
    out = [LoadSnapshot(p0.copy(), q0.copy())]
    factor = np.ones_like(p0)
    for _ in range(n - 1):
        if sd_change == 0:
            pass
        elif kind == "random_walk":
            factor = np.maximum(factor * (1.0 + rng.normal(0.0, sd_change, size=p0.shape)), 0.0)
        else:
            factor = np.maximum(1.0 + rng.normal(0.0, sd_change / np.sqrt(2.0), size=p0.shape), 0.0)
        out.append(LoadSnapshot(p0 * factor, q0 * factor))
    return out


def residential_loads(base, n, rng, dt=10.0, houses=(8, 25)):
    """Aggregated household demand per bus with appliance on/off steps.

    Each bus gets a random number of houses. A house draws a small base
    load plus a few appliances that switch on and off as two-state Markov
    chains; the bus total is rescaled so its time-average equals ``base``.
    """
    p0 = np.asarray(base.p, dtype=float)
    q0 = np.asarray(base.q, dtype=float)
    live = np.flatnonzero(p0 != 0)
    nb, n_app = live.size, 4
    count = rng.integers(houses[0], houses[1] + 1, size=nb)
    hmax = int(houses[1])
    mask = (np.arange(hmax)[None, :] < count[:, None])[:, :, None]
    shape = (nb, hmax, n_app)
    rating = rng.uniform(0.5, 4.0, size=shape) * mask
    p_on = rng.uniform(0.001, 0.01, size=shape) * dt
    p_off = rng.uniform(0.005, 0.03, size=shape) * dt
    state = rng.random(shape) < p_on / (p_on + p_off)
    base_kw = (rng.uniform(0.3, 1.0, size=(nb, hmax)) * mask[:, :, 0]).sum(axis=1)
    agg = np.zeros((n, nb))
    for t in range(n):
        agg[t] = base_kw + (rating * state).sum(axis=(1, 2))
        u = rng.random(shape)
        state = np.where(state, u >= p_off, u < p_on)
    series = np.zeros((n, p0.size))
    if nb:
        series[:, live] = agg / agg.mean(axis=0)
    return [LoadSnapshot(p0 * series[t], q0 * series[t]) for t in range(n)]


def read_load_csv(text, model):
    """Parse ``t_sec,bus,p_pu,q_pu`` rows into snapshots ordered by time."""
    rows = {}
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, 1):
        if not row or row[0].startswith("#"):
            continue
        if row[0].strip() == "t_sec":
            continue
        if len(row) != 4:
            raise ParseError("load rows need t_sec,bus,p_pu,q_pu", lineno)
        try:
            t, bus, p, q = float(row[0]), int(row[1]), float(row[2]), float(row[3])
        except ValueError:
            raise ParseError("non-numeric field", lineno) from None
        if not 1 <= bus <= model.n_bus:
            raise ParseError(f"unknown bus {bus}", lineno)
        rows.setdefault(t, {})[bus - 1] = (p, q)
    out = []
    for t in sorted(rows):
        p = np.zeros(model.n_bus)
        q = np.zeros(model.n_bus)
        for k, (pv, qv) in rows[t].items():
            p[k], q[k] = pv, qv
        out.append(LoadSnapshot(p, q))
    return out


def load_sequence(model, cfg, rng):
    base = LoadSnapshot.nominal(model, cfg.scale)
    if cfg.profile in ("fluctuation", "random_walk"):
        return synthesize_loads(base, cfg.sd_change, cfg.n_instants, rng, cfg.profile)
    if cfg.profile == "residential":
        return residential_loads(base, cfg.n_instants, rng, cfg.dt)
    if cfg.profile == "csv":
        if not cfg.snapshots or len(cfg.snapshots) < cfg.n_instants:
            raise ValidationError("csv profile needs one snapshot per instant")
        return list(cfg.snapshots[: cfg.n_instants])
    raise ValidationError(f"unknown load profile {cfg.profile!r}")


# ---------------------------------------------------------------------------
# sampling


def pmu_sigmas(magnitude, tve_max):
    s = tve_max * PMU_SIGMA_FACTOR
    return s * magnitude, s


def sample_pmu(bus, magnitude, angle, tve_max, rng, floor=1e-7):
    """Noisy phasor at one PMU bus.

    Magnitude and angle errors are independent Gaussians with per-unit
    relative deviation ``tve_max / (3 sqrt 2)``, which keeps the phasor
    error below ``tve_max`` in about 99.99% of draws.
    """
    if tve_max < 0:
        raise ValidationError("tve_max must be non-negative")
    s_mag, s_ang = pmu_sigmas(magnitude, tve_max)
    if tve_max == 0:
        return PmuMeasurement(int(bus), float(magnitude), float(angle), floor, floor)
    mu, gamma = rng.normal(0.0, 1.0, size=2)
    return PmuMeasurement(int(bus), float(magnitude + s_mag * mu), float(angle + s_ang * gamma),
                          float(s_mag), float(s_ang))


def sample_meter(bus, p, q, rel_error, rng, floor=METER_FLOOR):
    """Noisy P/Q pair; sigma = (rel_error/3)|true| + floor, exact when rel_error is 0."""
    if rel_error < 0:
        raise ValidationError("rel_error must be non-negative")
    sp_ = rel_error / 3.0 * abs(p) + floor
    sq_ = rel_error / 3.0 * abs(q) + floor
    if rel_error == 0:
        return MeterMeasurement(int(bus), float(p), float(q), sp_, sq_)
    e = rng.normal(0.0, 1.0, size=2)
    return MeterMeasurement(int(bus), float(p + sp_ * e[0]), float(q + sq_ * e[1]), sp_, sq_)


def tve(measured_mag, measured_ang, true_mag, true_ang):
    m = np.asarray(measured_mag) * np.exp(1j * np.asarray(measured_ang))
    t = np.asarray(true_mag) * np.exp(1j * np.asarray(true_ang))
    return np.abs(m - t) / np.abs(t)


def measure(model, topo, state, loads, noise, rng, t=0.0):
    """One MeasurementSet at a solved ground-truth state."""
    on = noise.enabled
    pmus = tuple(
        sample_pmu(k + 1, state.vm[k], state.va[k], noise.pmu_tve if on else 0.0, rng)
        if on else _exact_pmu(k, state, noise)
        for k in model.pmu_idx
    )
    meter_rel = noise.meter_rel if on and noise.meters_noisy else 0.0
    meters = tuple(
        sample_meter(k + 1, loads.p[k], loads.q[k], meter_rel, rng, noise.floor) if meter_rel
        else _exact_meter(k + 1, loads.p[k], loads.q[k], noise.meter_rel, noise.floor)
        for k in model.load_buses
    )
    pi, qi = bus_injections(model, topo, state)
    s = model.slack
    p_sub = pi[s] + loads.p[s]
    q_sub = qi[s] + loads.q[s]
    sub_rel = noise.substation_rel if on and noise.meters_noisy else 0.0
    if sub_rel:
        sub = sample_meter(s + 1, p_sub, q_sub, sub_rel, rng, noise.floor)
    else:
        sub = _exact_meter(s + 1, p_sub, q_sub, noise.substation_rel, noise.floor)
    return MeasurementSet(float(t), pmus, meters, sub)


def _exact_pmu(k, state, noise):
    s_mag, s_ang = pmu_sigmas(state.vm[k], noise.pmu_tve)
    return PmuMeasurement(k + 1, float(state.vm[k]), float(state.va[k]),
                          float(max(s_mag, 1e-7)), float(max(s_ang, 1e-7)))


def _exact_meter(bus, p, q, rel, floor):
    return MeterMeasurement(int(bus), float(p), float(q),
                            rel / 3.0 * abs(p) + floor, rel / 3.0 * abs(q) + floor)


def weights(mset):
    """Per-measurement weights 1/sigma^2 as a dict of arrays."""
    a = mset.arrays()
    return {
        "pmu_vm": 1.0 / a["s_vm"] ** 2,
        "pmu_va": 1.0 / a["s_va"] ** 2,
        "meter_p": 1.0 / a["s_p"] ** 2,
        "meter_q": 1.0 / a["s_q"] ** 2,
        "sub_p": 1.0 / mset.substation.sigma_p ** 2,
        "sub_q": 1.0 / mset.substation.sigma_q ** 2,
    }


def build_scenario(model, plan, load_cfg=None, noise_cfg=None, seed=0, index=0, loads=None):
    """Ground truth and measurements for every instant of a switch plan."""
    load_cfg = load_cfg or LoadConfig()
    noise_cfg = noise_cfg or NoiseConfig()
    if plan.n_switch != model.n_switch:
        raise ValidationError("plan switch count does not match the model")
    n = load_cfg.n_instants
    times = tuple(k * load_cfg.dt for k in range(n))
    if loads is None:
        loads = load_sequence(model, load_cfg, make_rng(seed, index, 0))
    if len(loads) < n:
        raise ValidationError("not enough load snapshots")
    noise_rng = make_rng(seed, index, 1)
    topos, states, msets = [], [], []
    for k, t in enumerate(times):
        topo = plan.topology_at(t)
        try:
            st = solve_acpf(model, topo, loads[k])
        except SolverError as exc:
            raise type(exc)(f"instant {k} (t={t:g} s): {exc}") from exc
        topos.append(topo)
        states.append(st)
        msets.append(measure(model, topo, st, loads[k], noise_cfg, noise_rng, t))
    return Scenario(times, tuple(topos), tuple(states), tuple(loads[:n]), tuple(msets),
                    int(seed), int(index))


# ---------------------------------------------------------------------------
# CSV I/O

MEAS_HEADER = ("t_sec", "device", "device_id", "quantity", "value", "sigma")


def write_measurements(msets, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MEAS_HEADER)
    for ms in msets:
        for m in ms.pmu:
            w.writerow([f"{ms.t:g}", "pmu", m.bus, "vm", repr(float(m.magnitude)), repr(float(m.sigma_mag))])
            w.writerow([f"{ms.t:g}", "pmu", m.bus, "va", repr(float(m.angle)), repr(float(m.sigma_ang))])
        for dev, items in (("meter", ms.meters), ("substation", (ms.substation,))):
            for m in items:
                w.writerow([f"{ms.t:g}", dev, m.bus, "p", repr(float(m.p)), repr(float(m.sigma_p))])
                w.writerow([f"{ms.t:g}", dev, m.bus, "q", repr(float(m.q)), repr(float(m.sigma_q))])


def read_measurements(text):
    """Inverse of :func:`write_measurements`; returns MeasurementSets by time."""
    by_t = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or tuple(row) == MEAS_HEADER or row[0].startswith("#"):
            continue
        if len(row) != 6:
            raise ParseError("measurement rows need 6 columns", lineno)
        try:
            t, dev, dev_id, qty = float(row[0]), row[1], int(row[2]), row[3]
            val, sig = float(row[4]), float(row[5])
        except ValueError:
            raise ParseError("non-numeric field", lineno) from None
        if dev not in ("pmu", "meter", "substation") or qty not in ("vm", "va", "p", "q"):
            raise ParseError(f"unknown device/quantity {dev}/{qty}", lineno)
        if (dev == "pmu") != (qty in ("vm", "va")):
            raise ParseError(f"quantity {qty} does not belong to {dev}", lineno)
        by_t.setdefault(t, {}).setdefault((dev, dev_id), {})[qty] = (val, sig)
    out = []
    for t in sorted(by_t):
        pmu, meters, sub = [], [], None
        for (dev, bus), d in by_t[t].items():
            try:
                if dev == "pmu":
                    pmu.append(PmuMeasurement(bus, d["vm"][0], d["va"][0], d["vm"][1], d["va"][1]))
                else:
                    m = MeterMeasurement(bus, d["p"][0], d["q"][0], d["p"][1], d["q"][1])
                    if dev == "substation":
                        sub = m
                    else:
                        meters.append(m)
            except KeyError as exc:
                raise ParseError(f"t={t:g}: {dev} {bus} lacks quantity {exc}") from None
        if sub is None:
            raise ParseError(f"t={t:g}: no substation measurement")
        pmu.sort(key=lambda m: m.bus)
        meters.sort(key=lambda m: m.bus)
        out.append(MeasurementSet(t, tuple(pmu), tuple(meters), sub))
    return out


def write_truth(scenario, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t_sec", "bus", "vm", "va", "p_load", "q_load"])
    for t, st, ld in zip(scenario.times, scenario.truth_state, scenario.truth_loads):
        for k in range(st.vm.size):
            w.writerow([f"{t:g}", k + 1, repr(float(st.vm[k])), repr(float(st.va[k])),
                        repr(float(ld.p[k])), repr(float(ld.q[k]))])


def write_topology(times, topos, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t_sec", "switch_id", "status"])
    for t, topo in zip(times, topos):
        for k, v in enumerate(topo):
            w.writerow([f"{t:g}", k, int(v)])
