"""Stochastic normalizing flow: coupling blocks interleaved with
heatbath steps under the interpolated action.

Step j of the evolution (j = 0..n_step-1, schedule values c_j -> c_j+1)
does three things, in order:

  1. switch      - raise c at frozen field, booking the action change
                   into the generalized work W (same arithmetic as the
                   plain non-equilibrium path),
  2. block j     - apply one coupling block, booking its action jump at
                   the new level c_j+1 into W and its log-Jacobian into
                   logJ (an untrained block contributes exactly 0.0),
  3. sweep       - one heatbath sweep at c_j+1, booking heat Q.

The generalized work W = sum(switches) + sum(jumps) - logJ satisfies
W = Delta S - Q - logJ per record, and <e^-W> estimates Z(l+1)/Z(l) for
any parameter state.  With zero nets the evolution consumes the rng
stream exactly like the plain protocol, so work values degenerate bit
for bit; with n_step = 0 the whole flow acts once and the weight
reduces bit for bit to the deterministic-flow one.
"""

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, layer_apply
from .heatbath import ChainState, sweep_chain
from .kernels import Stream
from .lattice import FieldConfig, action, defect_column_bilinear
from .protocol import (
    ProtocolSchedule,
    WorkRecord,
    _check_identity,
    build_step_tables,
)


@dataclass(frozen=True)
class SnfModel:
    """Flow blocks plus the switching schedule that interleaves them."""

    flow: FlowModel
    schedule: ProtocolSchedule

    def __post_init__(self):
        n = self.schedule.n_step
        if n >= 1 and len(self.flow.blocks) != n:
            raise ValueError(
                f"{len(self.flow.blocks)} blocks cannot interleave "
                f"{n} stochastic steps (need one block per step)"
            )
        if n == 0 and not self.flow.blocks:
            raise ValueError("the zero-step model still needs blocks")

    @property
    def n_step(self):
        return self.schedule.n_step

    @property
    def geometry(self):
        return self.flow.geometry


def snf_evolve(config, model, params, stream, seed_label=0, step_tables=None):
    """One generalized-work evolution from a cut-l prior sample."""
    flow = model.flow
    geometry = flow.geometry
    target = flow.target_geometry
    if config.geometry.n_sites != geometry.n_sites:
        raise ValueError("initial configuration does not fit the geometry")
    field = FieldConfig(geometry, config.values.reshape(geometry.shape).copy())
    flat = field.values.reshape(-1)
    flat2d = flat[None, :]
    s_initial = float(action(flat, geometry, params))

    if model.n_step == 0:
        logj = 0.0
        for layer in flow.layers:
            logj += float(layer_apply(layer, flat2d, "forward")[0])
        s_final = float(action(flat, target, params))
        # identical expression to the deterministic-flow weight
        work = float(s_final - s_initial - logj)
        record = WorkRecord(
            W=work, Q=0.0, logJ=logj, S_initial=s_initial, S_final=s_final,
            direction="forward", seed=int(seed_label),
        )
        return field, _check_identity(record)

    if step_tables is None:
        step_tables = build_step_tables(model.schedule, geometry)
    state = ChainState(field, stream)
    mech = 0.0
    heat = 0.0
    logj = 0.0
    pts = model.schedule.points
    for j, (a, b) in enumerate(zip(pts, pts[1:])):
        mech += -2.0 * params.kappa * (b - a) * defect_column_bilinear(
            flat, geometry
        )
        s_before = float(action(flat, geometry, params, c=b))
        for layer in flow.blocks[j]:
            logj += float(layer_apply(layer, flat2d, "forward")[0])
        s_after = float(action(flat, geometry, params, c=b))
        mech += s_after - s_before
        heat += sweep_chain(state, params, accumulate_heat=True, table=step_tables[b])
    s_final = float(action(flat, target, params))
    record = WorkRecord(
        W=mech - logj,
        Q=heat,
        logJ=logj,
        S_initial=s_initial,
        S_final=s_final,
        direction="forward",
        seed=int(seed_label),
    )
    return field, _check_identity(record)


def snf_batch(configs, model, params, seed, stream_offset=0):
    """Independent evolutions, one per prior sample, as jarzynski_batch."""
    tables = (
        build_step_tables(model.schedule, model.geometry)
        if model.n_step > 0
        else None
    )
    records = []
    for j, config in enumerate(configs):
        label = stream_offset + j
        stream = Stream.from_seed(seed, label)
        _, record = snf_evolve(
            config, model, params, stream, seed_label=label, step_tables=tables
        )
        records.append(record)
    return records
