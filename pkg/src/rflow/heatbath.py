"""Heatbath sampling of the phi^4 action on (interpolated) replica lattices.

Each site update draws exactly from the single-site conditional

    p(phi) ~ exp(2 kappa b phi - (1 - 2 lam) phi^2 - lam phi^4)

by Gaussian proposal and quartic rejection (see ``rflow.kernels``).  A
sweep visits every site once in flat raster order.  The same kernel
powers prior generation here and the stochastic steps of the evolution
and stochastic-flow modules.
"""

from dataclasses import dataclass

import numpy as np

from . import binio
from .kernels import Stream, run_sweeps
from .kernels import conditional_sample as _kernel_conditional
from .kernels import sweep as _kernel_sweep
from .lattice import ActionParams, FieldConfig, ReplicaGeometry, coupling_table

PRIOR_MAGIC = b"RFPR"


@dataclass
class ChainState:
    """A heatbath chain: current field, its rng stream, and a sweep counter."""

    field: FieldConfig
    stream: Stream
    sweeps: int = 0

    @classmethod
    def start(cls, geometry, seed, stream_index=0, start="cold"):
        """Fresh chain from a cold (phi = 0) or hot (standard normal) start.

        A hot start consumes one normal draw per site from the chain's
        own stream before any sweep.
        """
        stream = Stream.from_seed(seed, stream_index)
        if start == "cold":
            f = FieldConfig.cold(geometry)
        elif start == "hot":
            f = FieldConfig.hot(geometry, stream)
        else:
            raise ValueError(f"start must be 'cold' or 'hot', got {start!r}")
        return cls(f, stream)


@dataclass(frozen=True)
class PriorPlan:
    """Thermalization length, sampling stride, and sample count for a prior run."""

    thermalization: int
    count: int
    stride: int = 20

    def __post_init__(self):
        if self.thermalization < 0:
            raise ValueError("thermalization must be >= 0")
        if self.stride < 1 or self.count < 1:
            raise ValueError("stride and count must be >= 1")


def conditional_sample(b, params, stream):
    """One exact draw of the single-site conditional at neighbor sum ``b``."""
    value, _ = _kernel_conditional(float(b), params.kappa, params.lam, stream)
    return value


def sweep_chain(state, params, c=None, accumulate_heat=False, table=None):
    """Update every site of the chain once; returns the accumulated heat.

    The heat is the sum of local action changes at the level fixed by
    ``c`` (0.0 when not requested).  The field is updated in place and
    the sweep counter advances.  A precomputed coupling ``table``
    bypasses the per-(geometry, c) cache; callers looping over many
    distinct c values should hold their own tables.
    """
    if table is None:
        table = coupling_table(state.field.geometry, c)
    idx, wgt = table
    heat, _ = _kernel_sweep(
        state.field.values.reshape(-1),
        idx,
        wgt,
        params.kappa,
        params.lam,
        state.stream,
        bool(accumulate_heat),
    )
    state.sweeps += 1
    return heat


def run_chain(state, params, n_sweeps, c=None):
    """``n_sweeps`` sweeps without heat bookkeeping (single kernel call)."""
    if n_sweeps < 0:
        raise ValueError("n_sweeps must be >= 0")
    if n_sweeps == 0:
        return state
    g = state.field.geometry
    idx, wgt = coupling_table(g, c)
    run_sweeps(
        state.field.values.reshape(-1),
        idx,
        wgt,
        params.kappa,
        params.lam,
        state.stream,
        int(n_sweeps),
    )
    state.sweeps += int(n_sweeps)
    return state


def generate_prior(plan, params, geometry, seed, start="cold", stream_index=0):
    """Yield ``plan.count`` equilibrium configurations of the plain geometry.

    The chain thermalizes for ``plan.thermalization`` sweeps, then yields
    a copy of the field every ``plan.stride`` sweeps.
    """
    state = ChainState.start(geometry, seed, stream_index, start)
    run_chain(state, params, plan.thermalization)
    for _ in range(plan.count):
        run_chain(state, params, plan.stride)
        yield state.field.copy()


def save_prior_ensemble(path, configs, params, seed, plan=None):
    """Persist configurations as one flat binary file (magic "RFPR").

    ``configs`` is a sequence of FieldConfig on a common geometry; values
    are stored as little-endian float64 in flat site order (replica-major
    C order), one block row per configuration.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("cannot save an empty ensemble")
    g = configs[0].geometry
    data = np.stack([c.values.reshape(-1) for c in configs])
    header = {
        "kind": "prior-ensemble",
        "geometry": {
            "T": g.T,
            "spatial": list(g.spatial),
            "n_replicas": g.n_replicas,
            "cut": g.cut,
        },
        "params": {"kappa": params.kappa, "lam": params.lam},
        "seed": int(seed),
        "count": len(configs),
        "site_order": "replica-major C order",
    }
    if plan is not None:
        header["plan"] = {
            "thermalization": plan.thermalization,
            "stride": plan.stride,
            "count": plan.count,
        }
    binio.write_record(path, PRIOR_MAGIC, header, {"configs": data})


def load_prior_ensemble(path):
    """Load (header, geometry, params, values[count, V]) from an "RFPR" file."""
    header, arrays = binio.read_record(path, PRIOR_MAGIC)
    gh = header["geometry"]
    geometry = ReplicaGeometry(
        gh["T"], tuple(gh["spatial"]), gh["n_replicas"], gh["cut"]
    )
    params = ActionParams(header["params"]["kappa"], header["params"]["lam"])
    values = arrays["configs"]
    if values.shape != (header["count"], geometry.n_sites):
        raise ValueError("ensemble data does not match header geometry")
    return header, geometry, params, values
