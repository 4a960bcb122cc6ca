"""Non-equilibrium evolutions between neighboring defect lengths.

A schedule carries the gluing parameter c from 0 to 1 (cut l toward cut
l+1) in discrete segments.  Each segment first switches c at frozen
field, booking the action change as work W, then runs one heatbath
sweep at the new c, booking its accumulated local action changes as
heat Q.  Jarzynski's equality then gives Z(l+1)/Z(l) = <e^-W> over
evolutions started from cut-l equilibrium; reverse evolutions traverse
c from 1 to 0 and estimate the inverse ratio the same way.

The zero-step schedule has no stochastic update at all: the work is the
full action difference between the two geometries on the unchanged
field, which is the plain reweighting estimator.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .heatbath import ChainState, sweep_chain
from .kernels import Stream
from .lattice import FieldConfig, action, coupling_table, defect_column_bilinear

IDENTITY_TOL = 1e-8


@dataclass(frozen=True)
class ProtocolSchedule:
    """Switching schedule: values of c visited between 0 and 1.

    ``points`` has length n_step + 1 for n_step >= 1 and is exactly
    (0.0, 1.0) for the instantaneous n_step = 0 switch (which performs
    no sweep).
    """

    n_step: int
    points: tuple

    def __post_init__(self):
        if self.n_step < 0:
            raise ValueError("n_step must be >= 0")
        pts = tuple(float(c) for c in self.points)
        object.__setattr__(self, "points", pts)
        want = 2 if self.n_step == 0 else self.n_step + 1
        if len(pts) != want:
            raise ValueError(f"schedule needs {want} points, got {len(pts)}")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("schedule must start at c=0 and end at c=1")
        if any(b < a for a, b in zip(pts, pts[1:])):
            raise ValueError("schedule must be monotone non-decreasing")

    @classmethod
    def linear(cls, n_step):
        if n_step == 0:
            return cls(0, (0.0, 1.0))
        return cls(n_step, tuple(j / n_step for j in range(n_step + 1)))

    @classmethod
    def from_points(cls, points):
        pts = tuple(float(c) for c in points)
        return cls(len(pts) - 1, pts)


@dataclass(frozen=True)
class WorkRecord:
    """One evolution's bookkeeping: W = S_final - S_initial - Q - logJ."""

    W: float
    Q: float
    logJ: float
    S_initial: float
    S_final: float
    direction: str
    seed: int

    def identity_gap(self):
        return self.W - (self.S_final - self.S_initial - self.Q - self.logJ)


def _check_identity(record):
    gap = record.identity_gap()
    if not math.isfinite(gap) or abs(gap) > IDENTITY_TOL:
        raise RuntimeError(f"work bookkeeping identity violated by {gap:.3e}")
    return record


def _evolve(
    config, schedule, params, geometry, stream, direction, seed_label,
    step_tables=None,
):
    if geometry.cut >= geometry.Lx:
        raise ValueError("cut must leave at least one column to glue")
    target = geometry.with_cut(geometry.cut + 1)
    forward = direction == "forward"
    start_geom = geometry if forward else target
    end_geom = target if forward else geometry
    if config.geometry.n_sites != geometry.n_sites:
        raise ValueError("initial configuration does not fit the geometry")
    # rebind to the interpolation base: reverse priors arrive carrying
    # the cut-(l+1) geometry, but sweeps interpolate on the cut-l table
    field = FieldConfig(geometry, config.values.reshape(geometry.shape).copy())
    state = ChainState(field, stream)
    vals = state.field.values
    s_initial = float(action(vals, start_geom, params))
    work = 0.0
    heat = 0.0
    if schedule.n_step == 0:
        s_final = float(action(vals, end_geom, params))
        work = s_final - s_initial
    else:
        if step_tables is None:
            step_tables = build_step_tables(schedule, geometry)
        pts = schedule.points if forward else tuple(reversed(schedule.points))
        for a, b in zip(pts, pts[1:]):
            # dS/dc is -2 kappa times the defect-column bilinear, and S
            # is affine in c, so the switch work is exact
            work += -2.0 * params.kappa * (b - a) * defect_column_bilinear(
                vals, geometry
            )
            heat += sweep_chain(
                state, params, accumulate_heat=True, table=step_tables[b]
            )
        s_final = float(action(state.field.values, end_geom, params))
    record = WorkRecord(
        W=work,
        Q=heat,
        logJ=0.0,
        S_initial=s_initial,
        S_final=s_final,
        direction=direction,
        seed=int(seed_label),
    )
    return state.field, _check_identity(record)


def build_step_tables(schedule, geometry):
    """Coupling tables for every schedule point, held outside the cache.

    Long schedules would otherwise evict and rebuild interpolated
    tables on every sweep.
    """
    return {c: coupling_table(geometry, c) for c in schedule.points}


def evolve_forward(config, schedule, params, geometry, stream, seed_label=0):
    """Drive one cut-l equilibrium sample toward cut l+1.

    Returns the final configuration and a WorkRecord whose e^-W is an
    unbiased Z(l+1)/Z(l) weight.
    """
    return _evolve(config, schedule, params, geometry, stream, "forward", seed_label)


def evolve_reverse(config, schedule, params, geometry, stream, seed_label=0):
    """Drive one cut-(l+1) equilibrium sample back toward cut l.

    ``geometry`` is still the cut-l geometry; the walk traverses the
    schedule from c = 1 down to 0, and e^-W estimates Z(l)/Z(l+1).
    """
    return _evolve(config, schedule, params, geometry, stream, "reverse", seed_label)


def jarzynski_batch(
    configs,
    schedule,
    params,
    geometry,
    seed,
    direction="forward",
    stream_offset=0,
):
    """One independent evolution per prior sample.

    Evolution j uses the rng stream (seed, stream_offset + j), so any
    scheduling or chunking of the batch reproduces identical records.
    """
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    tables = build_step_tables(schedule, geometry) if schedule.n_step > 0 else None
    records = []
    for j, config in enumerate(configs):
        label = stream_offset + j
        stream = Stream.from_seed(seed, label)
        _, record = _evolve(
            config, schedule, params, geometry, stream, direction, label,
            step_tables=tables,
        )
        records.append(record)
    return records


def work_values(records):
    return np.array([r.W for r in records], dtype=np.float64)


# -- JSON Lines persistence --------------------------------------------------


def write_work_records(path, records, meta=None):
    """Stream records as JSON Lines, optionally led by a _meta header."""
    with open(path, "w") as f:
        if meta is not None:
            f.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for r in records:
            f.write(
                json.dumps(
                    {
                        "W": r.W,
                        "Q": r.Q,
                        "logJ": r.logJ,
                        "dir": r.direction,
                        "seed": r.seed,
                        "S_initial": r.S_initial,
                        "S_final": r.S_final,
                    }
                )
                + "\n"
            )


def read_work_records(path):
    """Parse a JSON Lines record file; returns (meta or None, records)."""
    meta = None
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if line_no == 0 and "_meta" in obj:
                meta = obj["_meta"]
                continue
            try:
                records.append(
                    WorkRecord(
                        W=float(obj["W"]),
                        Q=float(obj["Q"]),
                        logJ=float(obj["logJ"]),
                        S_initial=float(obj.get("S_initial", math.nan)),
                        S_final=float(obj.get("S_final", math.nan)),
                        direction=obj["dir"],
                        seed=int(obj["seed"]),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"record line {line_no} missing key {exc}") from exc
    return meta, records
