"""Variational training of the defect flows.

The objective is the sample mean of the generalized work (equivalently
the KL divergence of the flowed prior from the target, up to the
constant log partition-function ratio), so the training signal needs no
target samples.  Gradients are hand-written reverse mode through the
coupling layers and the action; the scale field enters through |s|,
whose subgradient at 0 is taken to be 0, which keeps the zero-initialized
identity start well posed.

Stochastic models train on pathwise gradients only: heatbath output is
treated as a constant, so each block's gradient is local to its own
interleaving step.  The resulting estimator stays unbiased at every
parameter value; training quality affects only the variance.

Prior batches come from one persistent heatbath chain, striding between
samples, rather than from independently thermalized restarts.
"""

import csv
import math
import time
from dataclasses import dataclass
from itertools import islice

import numpy as np

from .binio import read_record, write_record
from .estimators import ess
from .flow import build_flow_model, flow_apply_cached, layer_apply
from .heatbath import ChainState, PriorPlan, generate_prior, sweep_chain
from .kernels import Stream
from .lattice import (
    ActionParams,
    FieldConfig,
    ReplicaGeometry,
    action,
    action_gradient,
    defect_column_bilinear,
)
from .nnet import OddConvNet, PairedNets
from .protocol import ProtocolSchedule, build_step_tables
from .snf import SnfModel

CHECKPOINT_MAGIC = b"RFLW"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ["era", "step", "mean_loss", "ess", "wallclock_s"]


# ---------------------------------------------------------------------------
# reverse mode through coupling layers


def _head_cotangent_raw(layer, g_head):
    """Map a cotangent on the selected head values back to the raw head
    shape the net produced: scatter into declared slots for dense nets,
    reshape to the patch for conv nets."""
    m = layer.mask
    if layer.kind == "conv":
        return g_head.reshape(g_head.shape[0], *m.present_shape)
    out = np.zeros((g_head.shape[0], m.declared_size))
    out[:, m.declared_slots] = g_head
    return out


def _frozen_cotangent(layer, dx):
    """Gather the net-input cotangent back onto the frozen lattice sites."""
    m = layer.mask
    b = dx.shape[0]
    if layer.kind == "conv":
        return dx.reshape(b, m.frozen.size)
    p = m.active.size
    size = m.declared_size
    out = np.empty((b, m.frozen.size))
    for o in range(m.n_others):
        out[:, o * p : (o + 1) * p] = dx[:, o * size + m.declared_slots]
    return out


def _layer_backward(layer, cache, g, jfac):
    """One coupling layer of reverse mode.

    ``g`` is the loss cotangent of the layer output (B, V); it is
    rewritten in place into the cotangent of the layer input.  ``jfac``
    is the coefficient of the -logJ term in the per-sample loss (1/B for
    a batch-mean loss).  Returns the net's weight gradients.
    """
    m = layer.mask
    phi, s, scale = cache["phi_in"], cache["s"], cache["scale"]
    g_active = g[:, m.active]
    sgn = np.sign(s)  # subgradient of |s| at 0 is 0
    gt = g_active
    gs = -sgn * scale * phi * g_active + jfac * sgn
    grads, dx = layer.net.backward(
        cache["tape"],
        _head_cotangent_raw(layer, gs),
        _head_cotangent_raw(layer, gt),
    )
    g[:, m.active] = g_active * scale
    g[:, m.frozen] += _frozen_cotangent(layer, dx)
    return grads


def _backward_layers(layers, caches, g, jfac):
    """Walk the layers in reverse; returns the flat gradient list in the
    same order as the corresponding ``parameters()`` call."""
    per_layer = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        per_layer[k] = _layer_backward(layers[k], caches[k], g, jfac)
    return [a for gs in per_layer for a in gs]


def nf_loss_and_grad(model, values, params):
    """Mean generalized work of a flowed prior batch and its gradient.

    Returns (loss, gradients aligned with model.parameters(), per-sample
    log weights).  The batch is data: no gradient flows into it.
    """
    vals0 = np.atleast_2d(np.asarray(values, dtype=np.float64))
    out, logj, caches = flow_apply_cached(model, vals0)
    b = out.shape[0]
    s_base = np.atleast_1d(action(vals0, model.geometry, params))
    s_target = np.atleast_1d(action(out, model.target_geometry, params))
    work = s_target - s_base - logj
    loss = float(work.mean())
    g = action_gradient(out, model.target_geometry, params) / b
    grads = _backward_layers(model.layers, caches, g, 1.0 / b)
    return loss, grads, -work


def snf_loss_and_grad(model, configs, params, seed, stream_offset=0, capture=None):
    """Mean generalized work of stochastic evolutions and its pathwise
    gradient.

    Heatbath updates are constants of the differentiation: each block's
    gradient flows only through its own action jump and log-Jacobian,
    evaluated at the interpolation level of the step it precedes.  With
    zero steps this is exactly the deterministic-flow gradient.  When
    ``capture`` is a list, (level, block input copy) pairs are appended
    per step so the deterministic sub-path can be replayed.
    """
    flow = model.flow
    if model.n_step == 0:
        vals = np.stack([c.values.reshape(-1) for c in configs])
        loss, grads, logw = nf_loss_and_grad(flow, vals, params)
        return loss, grads, -logw
    geometry = flow.geometry
    tables = build_step_tables(model.schedule, geometry)
    b = len(configs)
    vals = np.stack(
        [np.asarray(c.values, dtype=np.float64).reshape(-1) for c in configs]
    )
    states = [
        ChainState(
            FieldConfig(geometry, vals[i].reshape(geometry.shape)),
            Stream.from_seed(seed, stream_offset + i),
        )
        for i in range(b)
    ]
    layer_sizes = [len(layer.net.parameters()) for layer in flow.layers]
    per_block = len(flow.blocks[0])
    grads = [np.zeros_like(w) for w in flow.parameters()]
    work = np.zeros(b)
    logj_total = np.zeros(b)
    pts = model.schedule.points
    for j, (c0, c1) in enumerate(zip(pts, pts[1:])):
        for i in range(b):
            work[i] += -2.0 * params.kappa * (c1 - c0) * defect_column_bilinear(
                vals[i], geometry
            )
        if capture is not None:
            capture.append((c1, vals.copy()))
        s_in = np.atleast_1d(action(vals, geometry, params, c=c1))
        block = flow.blocks[j]
        caches = []
        for layer in block:
            cache = {}
            logj_total += layer_apply(layer, vals, "forward", cache=cache)
            caches.append(cache)
        s_out = np.atleast_1d(action(vals, geometry, params, c=c1))
        work += s_out - s_in
        g = action_gradient(vals, geometry, params, c=c1) / b
        block_grads = _backward_layers(block, caches, g, 1.0 / b)
        offset = sum(layer_sizes[: j * per_block])
        for t, arr in enumerate(block_grads):
            grads[offset + t] += arr
        for i in range(b):
            sweep_chain(states[i], params, table=tables[c1])
    work -= logj_total
    return float(work.mean()), grads, work


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First and second gradient moments plus the update count."""

    step: int
    m: list
    v: list


def adam_init(params):
    return AdamState(
        0,
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
    )


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adaptive-moment update with bias correction; deterministic."""
    t = state.step + 1
    m = [beta1 * mm + (1.0 - beta1) * g for mm, g in zip(state.m, grads)]
    v = [beta2 * vv + (1.0 - beta2) * (g * g) for vv, g in zip(state.v, grads)]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = [
        p - lr * (mm / c1) / (np.sqrt(vv / c2) + eps)
        for p, mm, vv in zip(params, m, v)
    ]
    return new, AdamState(t, m, v)


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings; an era is the logging unit."""

    n_steps: int
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    era_length: int = 100
    seed: int = 0
    blockwise: bool = False
    prior_stride: int = 20
    prior_thermalization: int = 200

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.batch_size < 1 or self.era_length < 1:
            raise ValueError("batch_size and era_length must be >= 1")
        if self.prior_stride < 1 or self.prior_thermalization < 0:
            raise ValueError("bad prior plan")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_COLUMNS})


def _nan_abort(model, params, step, adam_state, checkpoint_path):
    path = (checkpoint_path or "train") + ".nan-diagnostic"
    save_checkpoint(path, model, params, step=step, adam_state=adam_state)
    raise RuntimeError(
        f"non-finite loss at step {step}; diagnostic checkpoint at {path}"
    )


def _run_phases(model, config, params, phases, metrics_path, checkpoint_path):
    """Shared driver: era-0 evaluation row, then training phases.

    ``phases`` is a list of (parameter index bounds or None, step count);
    bounds freeze everything outside them.  Each phase restarts the
    optimizer so frozen parameters stay bit-identical.
    """
    is_snf = isinstance(model, SnfModel)
    flow = model.flow if is_snf else model
    total = sum(n for _, n in phases)
    plan = PriorPlan(
        thermalization=config.prior_thermalization,
        count=(total + 1) * config.batch_size,
        stride=config.prior_stride,
    )
    chain = generate_prior(plan, params, flow.geometry, config.seed, start="hot")
    rows = []
    t0 = time.monotonic()

    def evaluate(step_index):
        """Returns (loss, grads, per-sample generalized work)."""
        batch = list(islice(chain, config.batch_size))
        if is_snf:
            return snf_loss_and_grad(
                model,
                batch,
                params,
                seed=config.seed + 1,
                stream_offset=step_index * config.batch_size,
            )
        vals = np.stack([c.values.reshape(-1) for c in batch])
        loss, grads, logw = nf_loss_and_grad(flow, vals, params)
        return loss, grads, -logw

    def log_row(step, losses, esses):
        rows.append(
            {
                "era": len(rows),
                "step": step,
                "mean_loss": float(np.mean(losses)),
                "ess": float(np.mean(esses)),
                "wallclock_s": time.monotonic() - t0,
            }
        )

    loss, _, work = evaluate(0)
    if not math.isfinite(loss):
        _nan_abort(model, params, 0, None, checkpoint_path)
    log_row(0, [loss], [float(ess(work))])

    step = 0
    opt = None
    for bounds, n_phase in phases:
        opt = adam_init(flow.parameters())
        era_losses, era_ess = [], []
        for _ in range(n_phase):
            step += 1
            loss, grads, work = evaluate(step)
            if not math.isfinite(loss):
                _nan_abort(model, params, step, opt, checkpoint_path)
            if bounds is not None:
                lo, hi = bounds
                grads = [
                    g if lo <= i < hi else np.zeros_like(g)
                    for i, g in enumerate(grads)
                ]
            new_w, opt = adam_step(
                flow.parameters(),
                grads,
                opt,
                lr=config.learning_rate,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.adam_eps,
            )
            flow.set_weights(new_w)
            era_losses.append(loss)
            era_ess.append(float(ess(work)))
            if step % config.era_length == 0:
                log_row(step, era_losses, era_ess)
                era_losses, era_ess = [], []
        if era_losses:
            log_row(step, era_losses, era_ess)
    if metrics_path:
        write_metrics(metrics_path, rows)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, params, step=step, adam_state=opt)
    return model, rows


def train_loop(model, config, params, metrics_path=None, checkpoint_path=None):
    """Train a flow (deterministic or stochastic) on fresh prior batches.

    The era-0 row is a pure evaluation of the starting model, so a
    zero-initialized flow logs exactly the direct-reweighting metrics.
    Returns (model, metric rows); the model is updated in place.
    """
    if config.blockwise and isinstance(model, SnfModel):
        return blockwise_train(model, config, params, metrics_path, checkpoint_path)
    return _run_phases(
        model, config, params, [(None, config.n_steps)], metrics_path, checkpoint_path
    )


def blockwise_train(model, config, params, metrics_path=None, checkpoint_path=None):
    """Train each block of a stochastic model in sequence.

    Earlier blocks are frozen (bit-identical) while later ones train;
    per-block budgets are equal up to remainder and sum to the total.
    """
    if not isinstance(model, SnfModel):
        raise ValueError("block-wise training is defined for stochastic models")
    flow = model.flow
    n_blocks = len(flow.blocks)
    layer_sizes = [len(layer.net.parameters()) for layer in flow.layers]
    per_block = len(flow.blocks[0])
    base, rem = divmod(config.n_steps, n_blocks)
    phases = []
    for k in range(n_blocks):
        lo = sum(layer_sizes[: k * per_block])
        hi = sum(layer_sizes[: (k + 1) * per_block])
        phases.append(((lo, hi), base + (1 if k < rem else 0)))
    return _run_phases(model, config, params, phases, metrics_path, checkpoint_path)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """A reloaded training artifact: the rebuilt model and its context."""

    model: object
    params: ActionParams
    step: int
    adam_state: object
    header: dict


def _net_spec(flow):
    net = flow.blocks[0][0].net
    paired = isinstance(net, PairedNets)
    probe = net.net_s if paired else net
    if isinstance(probe, OddConvNet):
        return "conv", [w.shape[0] for w in probe.weights[:-1]], paired
    return "dense", list(probe.sizes[1:-1]), paired


def save_checkpoint(path, model, params, step=0, adam_state=None):
    """Versioned binary checkpoint; weights (and optimizer moments) are
    little-endian float64 blocks in parameter order."""
    is_snf = isinstance(model, SnfModel)
    flow = model.flow if is_snf else model
    g = flow.geometry
    kind, hidden, paired = _net_spec(flow)
    header = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_type": "snf" if is_snf else "nf",
        "geometry": {
            "T": g.T,
            "spatial": list(g.spatial),
            "n_replicas": g.n_replicas,
            "cut": g.cut,
        },
        "params": {"kappa": params.kappa, "lam": params.lam},
        "patch_spec": list(flow.patch_spec),
        "net": {"kind": kind, "hidden": hidden, "paired": paired},
        "n_blocks": len(flow.blocks),
        "schedule": list(model.schedule.points) if is_snf else None,
        "step": int(step),
        "adam_step": int(adam_state.step) if adam_state is not None else 0,
    }
    arrays = {}
    for i, w in enumerate(flow.parameters()):
        arrays[f"w{i}"] = w
    if adam_state is not None:
        for i, a in enumerate(adam_state.m):
            arrays[f"m{i}"] = a
        for i, a in enumerate(adam_state.v):
            arrays[f"v{i}"] = a
    write_record(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path, spatial=None, kappa=None, cut=None, T=None):
    """Rebuild a checkpointed model, optionally transferring it.

    Overrides exist only where transfer is defined: spatial extent
    (conv nets only; dense input sizes are fixed), the hopping
    parameter, the cut column, and the temporal extent.
    """
    header, arrays = read_record(path, CHECKPOINT_MAGIC)
    if header.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {header.get('checkpoint_version')} not supported"
        )
    gmeta = header["geometry"]
    net = header["net"]
    stored_spatial = tuple(gmeta["spatial"])
    if spatial is not None:
        if isinstance(spatial, int):
            spatial = (spatial,) * len(stored_spatial)
        spatial = tuple(int(x) for x in spatial)
        if spatial != stored_spatial and net["kind"] == "dense":
            raise ValueError(
                "dense nets fix the input size; spatial transfer requires conv"
            )
    geometry = ReplicaGeometry(
        int(T) if T is not None else gmeta["T"],
        spatial if spatial is not None else stored_spatial,
        n_replicas=gmeta["n_replicas"],
        cut=int(cut) if cut is not None else gmeta["cut"],
    )
    params = ActionParams(
        kappa=float(kappa) if kappa is not None else header["params"]["kappa"],
        lam=header["params"]["lam"],
    )
    size_kw = (
        {"hidden": tuple(net["hidden"])}
        if net["kind"] == "dense"
        else {"conv_kernels": tuple(net["hidden"])}
    )
    flow = build_flow_model(
        geometry,
        tuple(header["patch_spec"]),
        header["n_blocks"],
        kind=net["kind"],
        paired=net["paired"],
        **size_kw,
    )
    weights = [v for k, v in arrays.items() if k.startswith("w")]
    flow.set_weights(weights)
    ms = [v for k, v in arrays.items() if k.startswith("m")]
    vs = [v for k, v in arrays.items() if k.startswith("v")]
    adam_state = AdamState(header["adam_step"], ms, vs) if ms else None
    if header["model_type"] == "snf":
        model = SnfModel(flow, ProtocolSchedule.from_points(header["schedule"]))
    else:
        model = flow
    return Checkpoint(model, params, header["step"], adam_state, header)
