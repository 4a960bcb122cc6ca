"""Defect coupling layers: invertible maps that only touch a small
patch of sites around the defect endpoint, one replica at a time.

Each layer rescales and shifts the active patch of one replica,

    phi' = exp(-|s|) * phi + t,      logJ += -sum |s|,

where s and t are odd networks of the other replicas' matching patch
(the frozen sites).  Everything outside the patch is never read or
written, so the map is exactly the identity on the environment.  A
block applies one layer per replica; stacking blocks gives the full
flow.  The Jacobian is diagonal on the active sites, so logJ is a plain
sum and never needs a decomposition.

The patch straddles the temporal boundary (where the replica gluing
acts) and is centered on the defect column; at spatial boundaries it
shrinks rather than wrapping.  Dense nets keep a fixed declared size
with zero-fill at clipped positions; convolutional nets just see the
smaller patch.
"""

from dataclasses import dataclass

import numpy as np

from .lattice import action
from .nnet import OddConvNet, OddDenseNet, PairedNets
from .protocol import WorkRecord


@dataclass(frozen=True)
class DefectMask:
    """Active/frozen partition for one replica's coupling layer.

    ``active`` and ``frozen`` are flat site indices; ``declared_slots``
    maps each present patch position into the flattened declared patch
    (for the dense zero-fill encoding); frozen sites of the other
    replicas are stored per replica, concatenated in ascending replica
    order.
    """

    replica: int
    patch_shape: tuple
    present_shape: tuple
    active: np.ndarray
    frozen: np.ndarray
    declared_slots: np.ndarray
    n_others: int

    @property
    def n_active(self):
        return self.active.size

    @property
    def declared_size(self):
        return int(np.prod(self.patch_shape))


def build_masks(geometry, patch_spec, l):
    """One DefectMask per replica for a patch around defect column l.

    The patch spans ``h`` temporal rows split evenly across the
    temporal boundary and ``w`` spatial columns centered on column l
    (all of the transverse direction in D = 3), clipped to the lattice.
    """
    h, w = patch_spec
    T, Lx = geometry.T, geometry.Lx
    n = geometry.n_replicas
    if n < 2:
        raise ValueError("coupling layers need at least 2 replicas")
    if h < 1 or w < 1:
        raise ValueError("patch must be at least 1x1")
    if h > T or w > Lx:
        raise ValueError("patch larger than lattice")
    if not 0 <= l < Lx:
        raise ValueError("defect column outside the lattice")
    rows = [(T - h // 2 + i) % T for i in range(h)]
    start = l - (w - 1) // 2
    cols = [(j, start + j) for j in range(w) if 0 <= start + j < Lx]
    ly = geometry.Ly if geometry.D == 3 else 1
    ys = range(ly) if geometry.D == 3 else (None,)
    patch_shape = (h, w) if geometry.D == 2 else (h, w, geometry.Ly)
    present_shape = (h, len(cols)) if geometry.D == 2 else (h, len(cols), geometry.Ly)

    slots = []
    grid = []
    for i, tau in enumerate(rows):
        for j, x in cols:
            for yi, y in enumerate(ys):
                slots.append((i * w + j) * ly + (yi if y is not None else 0))
                grid.append((tau, x, y))
    slots = np.array(slots, dtype=np.int64)

    def sites(replica):
        return np.array(
            [geometry.site_index(replica, tau, x, y) for tau, x, y in grid],
            dtype=np.int64,
        )

    per_replica = [sites(k) for k in range(n)]
    masks = []
    for k in range(n):
        others = [per_replica[r] for r in range(n) if r != k]
        masks.append(
            DefectMask(
                replica=k,
                patch_shape=patch_shape,
                present_shape=present_shape,
                active=per_replica[k],
                frozen=np.concatenate(others),
                declared_slots=slots,
                n_others=n - 1,
            )
        )
    return masks


@dataclass
class CouplingLayer:
    """One mask plus the net producing its scale and shift fields."""

    mask: DefectMask
    net: object

    @property
    def kind(self):
        net = self.net.net_s if isinstance(self.net, PairedNets) else self.net
        return "conv" if isinstance(net, OddConvNet) else "dense"


def _net_input(layer, vals):
    """Frozen-patch encoding: (B, n_others * declared) zero-filled vector
    for dense nets, (B, n_others, *present_shape) tensor for conv."""
    m = layer.mask
    frozen = vals[:, m.frozen]
    if layer.kind == "conv":
        return frozen.reshape(vals.shape[0], m.n_others, *m.present_shape)
    size = m.declared_size
    x = np.zeros((vals.shape[0], m.n_others * size))
    p = m.active.size
    for o in range(m.n_others):
        x[:, o * size + m.declared_slots] = frozen[:, o * p : (o + 1) * p]
    return x


def _heads(layer, s_raw, t_raw):
    m = layer.mask
    if layer.kind == "conv":
        b = s_raw.shape[0]
        return s_raw.reshape(b, -1), t_raw.reshape(b, -1)
    return s_raw[:, m.declared_slots], t_raw[:, m.declared_slots]


def layer_apply(layer, vals, direction="forward", cache=None):
    """Transform the active patch in place; returns per-sample logJ.

    ``vals`` is a (B, V) array.  When ``cache`` is a dict, the forward
    pass stores what the training backward pass needs.
    """
    m = layer.mask
    x_in = _net_input(layer, vals)
    s_raw, t_raw, tape = layer.net.forward(x_in)
    s, t = _heads(layer, s_raw, t_raw)
    scale = np.exp(-np.abs(s))
    if direction == "forward":
        phi = vals[:, m.active]
        vals[:, m.active] = scale * phi + t
        logj = -np.abs(s).sum(axis=1)
        if cache is not None:
            cache.update(phi_in=phi, s=s, scale=scale, tape=tape)
    elif direction == "inverse":
        if cache is not None:
            raise ValueError("training caches are forward-only")
        vals[:, m.active] = (vals[:, m.active] - t) / scale
        logj = np.abs(s).sum(axis=1)
    else:
        raise ValueError("direction must be 'forward' or 'inverse'")
    return logj


@dataclass
class FlowModel:
    """Stacked coupling blocks bound to a base geometry at cut l."""

    geometry: object
    patch_spec: tuple
    blocks: list

    @property
    def cut(self):
        return self.geometry.cut

    @property
    def target_geometry(self):
        return self.geometry.with_cut(self.geometry.cut + 1)

    @property
    def layers(self):
        return [layer for block in self.blocks for layer in block]

    @property
    def n_parameters(self):
        return sum(layer.net.n_parameters for layer in self.layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.net.parameters())
        return out

    def set_weights(self, arrays):
        pos = 0
        for layer in self.layers:
            k = len(layer.net.parameters())
            layer.net.set_weights(arrays[pos : pos + k])
            pos += k
        if pos != len(arrays):
            raise ValueError("wrong number of weight arrays")

    def with_geometry(self, geometry):
        """Rebind the trained nets to another lattice size or cut.

        Dense layers keep their declared patch (clipping handled by the
        zero-fill encoding); conv layers adapt to any patch size.
        """
        masks = build_masks(geometry, self.patch_spec, geometry.cut)
        blocks = []
        for block in self.blocks:
            if len(block) != len(masks):
                raise ValueError("replica count changed; cannot rebind")
            blocks.append(
                [CouplingLayer(mask, layer.net) for mask, layer in zip(masks, block)]
            )
        return FlowModel(geometry, self.patch_spec, blocks)


def build_flow_model(
    geometry,
    patch_spec,
    n_blocks,
    kind="dense",
    seed=0,
    hidden=(),
    conv_kernels=(8, 8, 8),
    paired=False,
):
    """Fresh flow: one net per (block, replica), final layers at zero,
    so the model starts as the exact identity."""
    if n_blocks < 1:
        raise ValueError("need at least one block")
    masks = build_masks(geometry, patch_spec, geometry.cut)

    def make_net(mask, stream_index, head_scale):
        if kind == "dense":
            sizes = [
                mask.n_others * mask.declared_size,
                *hidden,
                head_scale * mask.declared_size,
            ]
            return OddDenseNet.init(sizes, seed, stream_index=stream_index)
        if kind == "conv":
            return OddConvNet.init(
                mask.n_others,
                seed,
                d=geometry.D,
                hidden=conv_kernels,
                out_channels=head_scale,
                stream_index=stream_index,
            )
        raise ValueError("kind must be 'dense' or 'conv'")

    blocks = []
    for b in range(n_blocks):
        layers = []
        for k, mask in enumerate(masks):
            stream_index = b * len(masks) + k
            if paired:
                net = PairedNets(
                    make_net(mask, 2 * stream_index, 1),
                    make_net(mask, 2 * stream_index + 1, 1),
                )
            else:
                net = make_net(mask, stream_index, 2)
            layers.append(CouplingLayer(mask, net))
        blocks.append(layers)
    return FlowModel(geometry, tuple(patch_spec), blocks)


def _as_batch(values):
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        return vals[None, :].copy(), False
    if vals.ndim == 2:
        return vals.copy(), True
    raise ValueError("values must be (V,) or (B, V)")


def flow_apply(model, values, direction="forward"):
    """Apply the whole flow; returns (new values, total logJ).

    The inverse traverses the layers in reverse order with each layer
    inverted.  Input is copied, never mutated.
    """
    vals, batched = _as_batch(values)
    logj = np.zeros(vals.shape[0])
    layers = model.layers
    if direction == "inverse":
        layers = list(reversed(layers))
    for layer in layers:
        logj += layer_apply(layer, vals, direction)
    if batched:
        return vals, logj
    return vals[0], float(logj[0])


def flow_apply_cached(model, values):
    """Forward application that also returns per-layer training caches."""
    vals, _ = _as_batch(np.atleast_2d(np.asarray(values, dtype=np.float64)))
    logj = np.zeros(vals.shape[0])
    caches = []
    for layer in model.layers:
        cache = {}
        logj += layer_apply(layer, vals, "forward", cache=cache)
        caches.append(cache)
    return vals, logj, caches


def nf_weight(model, values, params):
    """Flow a prior batch and return its log importance weights.

    log w = -(S_target(flow(phi)) - S_base(phi) - logJ); the mean of
    e^{log w} estimates Z(l+1)/Z(l).  Accepts (V,) or (B, V).
    """
    out, logj = flow_apply(model, values, "forward")
    s_base = action(values, model.geometry, params)
    s_target = action(out, model.target_geometry, params)
    return out, -(s_target - s_base - logj)


def nf_work_records(model, values, params, seed_labels=None):
    """WorkRecords for a flowed batch: W = -log w, heat 0, logJ booked."""
    vals, batched = _as_batch(values)
    out, logj = flow_apply(model, vals, "forward")
    s_base = np.atleast_1d(action(vals, model.geometry, params))
    s_target = np.atleast_1d(action(out, model.target_geometry, params))
    if seed_labels is None:
        seed_labels = range(len(s_base))
    records = [
        WorkRecord(
            W=float(s1 - s0 - lj),
            Q=0.0,
            logJ=float(lj),
            S_initial=float(s0),
            S_final=float(s1),
            direction="forward",
            seed=int(label),
        )
        for s0, s1, lj, label in zip(s_base, s_target, logj, seed_labels)
    ]
    return out if batched else out[0], records
