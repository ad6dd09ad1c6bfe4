"""Time-series signature verification baseline for single-switch changes.

A library holds, for a known prior topology, the normalised change of the
PMU voltage magnitudes caused by toggling each switch alone. A change in the
measured magnitudes that is large enough is projected onto the library and
the best match above a threshold is reported as a switch toggle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .acpf import LoadSnapshot, solve_acpf
from .errors import SolverError, ValidationError

AMBIGUITY_TOL = 1e-9


CHANNELS = ("magnitude", "phasor")


@dataclass(frozen=True)
class SigverParams:
    """Detector thresholds; ``channels`` picks PMU magnitudes or full phasors."""

    min_norm: float = 0.004
    min_proj: float = 0.8
    tau: int = 5
    channels: str = "magnitude"

    def __post_init__(self):
        if self.min_norm < 0 or not 0 <= self.min_proj <= 1 or self.tau < 1:
            raise ValidationError("need min_norm >= 0, min_proj in [0, 1] and tau >= 1")
        if self.channels not in CHANNELS:
            raise ValidationError(f"channels must be one of {CHANNELS}")


@dataclass(frozen=True, eq=False)
class SignatureLibrary:
    """Unit signatures per switch; rows of NaN mark undetectable toggles."""

    prior: tuple
    signatures: np.ndarray
    channels: str = "magnitude"

    @property
    def detectable(self):
        return ~np.isnan(self.signatures).any(axis=1)


@dataclass(frozen=True)
class DetectionEvent:
    t: float
    switch_id: int
    new_status: int
    projection: float
    ambiguous: bool = False


def pmu_magnitudes(model, state):
    return state.vm[np.asarray(model.pmu_idx, dtype=int)]


def pmu_features(vm, va, channels="magnitude"):
    """Detector input per instant: magnitudes, or real and imaginary parts."""
    vm, va = np.asarray(vm, dtype=float), np.asarray(va, dtype=float)
    if channels == "magnitude":
        return vm
    return np.concatenate([vm * np.cos(va), vm * np.sin(va)], axis=-1)


def _state_features(model, state, channels):
    idx = np.asarray(model.pmu_idx, dtype=int)
    return pmu_features(state.vm[idx], state.va[idx], channels)


def measurement_features(msets, channels="magnitude"):
    """(instants, channels) array from a sequence of MeasurementSets."""
    vm = np.array([[m.magnitude for m in ms.pmu] for ms in msets])
    va = np.array([[m.angle for m in ms.pmu] for ms in msets])
    return pmu_features(vm, va, channels)


def build_library(model, prior, loads=None, channels="magnitude"):
    """Signatures around ``prior`` at ``loads`` (nominal by default)."""
    prior = tuple(int(v) for v in prior)
    loads = loads or LoadSnapshot.nominal(model)
    base = _state_features(model, solve_acpf(model, prior, loads), channels)
    sig = np.full((model.n_switch, base.size), np.nan)
    for e in range(model.n_switch):
        topo = list(prior)
        topo[e] = 1 - topo[e]
        try:
            d = _state_features(model, solve_acpf(model, tuple(topo), loads), channels) - base
        except SolverError:
            continue
        nrm = np.linalg.norm(d)
        if nrm > 0:
            sig[e] = d / nrm
    return SignatureLibrary(prior, sig, channels)


def match(delta, lib):
    """(switch, |projection|, ambiguous) for the best signature; switch is -1 if none."""
    nrm = np.linalg.norm(delta)
    ok = lib.detectable
    if nrm == 0 or not ok.any():
        return -1, 0.0, False
    proj = np.abs(lib.signatures[ok] @ (delta / nrm))
    ids = np.flatnonzero(ok)
    order = np.argsort(-proj, kind="stable")
    best = int(ids[order[0]])
    amb = proj.size > 1 and proj[order[0]] - proj[order[1]] <= AMBIGUITY_TOL
    return best, float(proj[order[0]]), bool(amb)


def detect(series, lib, params, times=None, model=None, loads=None, rebuild=None):
    """Scan a PMU feature ``series`` (instants x channels) for switch toggles.

    After an event the library is rebuilt around the new topology (needs
    ``model``, or a ``rebuild(topology)`` callable) and differences never
    reach back past the event instant.
    """
    series = np.asarray(series, dtype=float)
    n = series.shape[0]
    tau = params.tau
    if n <= tau:
        raise ValidationError("series must be longer than tau")
    times = np.arange(n, dtype=float) if times is None else np.asarray(times, dtype=float)
    if rebuild is None and model is not None:
        def rebuild(topo):
            return build_library(model, topo, loads, lib.channels)
    events = []
    last = 0
    for k in range(1, n):
        ref = max(k - tau, last)
        if ref == k:
            continue
        delta = series[k] - series[ref]
        if np.linalg.norm(delta) <= params.min_norm:
            continue
        e, proj, amb = match(delta, lib)
        if e < 0 or proj <= params.min_proj:
            continue
        if amb:
            events.append(DetectionEvent(float(times[k]), e, 1 - lib.prior[e], proj, True))
            continue
        new = list(lib.prior)
        new[e] = 1 - new[e]
        events.append(DetectionEvent(float(times[k]), e, new[e], proj))
        last = k
        lib = rebuild(tuple(new)) if rebuild is not None else SignatureLibrary(tuple(new), lib.signatures,
                                                                              lib.channels)
    return events


def topology_trace(prior, times, events):
    """Per-instant topology implied by a prior and non-ambiguous events."""
    cur = list(prior)
    by_t = {}
    for ev in events:
        if not ev.ambiguous:
            by_t.setdefault(ev.t, []).append(ev)
    out = []
    for t in times:
        for ev in by_t.get(float(t), []):
            cur[ev.switch_id] = ev.new_status
        out.append(tuple(cur))
    return out


DETECTION_HEADER = ("t_sec", "switch_id", "new_status", "projection")


def write_detections(events, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(DETECTION_HEADER)
    for ev in events:
        w.writerow([f"{ev.t:g}", ev.switch_id, ev.new_status, repr(float(ev.projection))])
