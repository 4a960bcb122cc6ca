"""Shallow odd neural networks with built-in reverse-mode gradients.

These produce the scale and shift fields of the defect coupling layers.
Networks use tanh activations and carry no bias terms, so every net is
exactly odd: net(-x) = -net(x).  A zero-initialized final layer makes
the net identically zero, which turns the enclosing coupling layer into
the identity map.

Shapes are batch-first.  A dense net maps (B, n_in) to two (B, m)
heads; a convolutional net maps (B, C, *spatial) to two (B, *spatial)
heads, preserving the spatial shape (kernel 3, zero padding 1, stride
1).  Weight gradients accumulate over the batch, so a mean loss wants
cotangents scaled by 1/B.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernels import Stream


@dataclass
class GradientTape:
    """Cached forward state: the inputs each layer saw, plus versioning."""

    version: int
    activations: list
    batched: bool
    extra: dict = field(default_factory=dict)


def _uniform_array(shape, bound, stream):
    flat = np.array([stream.uniform() for _ in range(int(np.prod(shape)))])
    return ((2.0 * flat - 1.0) * bound).reshape(shape)


class _OddNet:
    """Shared bookkeeping: versioned weight storage and head splitting."""

    def __init__(self, weights):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.version = 0

    @property
    def n_parameters(self):
        return sum(w.size for w in self.weights)

    def parameters(self):
        return self.weights

    def set_weights(self, new_weights):
        if len(new_weights) != len(self.weights):
            raise ValueError("wrong number of weight arrays")
        for old, new in zip(self.weights, new_weights):
            if old.shape != np.shape(new):
                raise ValueError("weight shape changed")
        self.weights = [np.asarray(w, dtype=np.float64) for w in new_weights]
        self.version += 1

    def zero_grads(self):
        return [np.zeros_like(w) for w in self.weights]

    def _check_tape(self, tape):
        if tape.version != self.version:
            raise RuntimeError("stale tape: parameters changed since forward")

    def forward(self, x):
        """(s, t, tape) with the two heads split from the raw output."""
        out, tape = self.forward_raw(x)
        s, t = self._split_heads(out)
        return s, t, tape

    def backward(self, tape, ds, dt):
        return self.backward_raw(tape, self._merge_heads(tape, ds, dt))


class OddDenseNet(_OddNet):
    """Fully connected odd net; ``sizes[-1]`` holds both heads."""

    def __init__(self, weights):
        super().__init__(weights)
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("weight matrices do not chain")
        self.sizes = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, sizes, seed, stream_index=0):
        """Hidden weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)];
        the final layer starts at exactly zero."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        stream = Stream.from_seed(seed, stream_index)
        weights = []
        for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            if k == len(sizes) - 2:
                weights.append(np.zeros((n_out, n_in)))
            else:
                bound = 1.0 / math.sqrt(n_in)
                weights.append(_uniform_array((n_out, n_in), bound, stream))
        return cls(weights)

    def _split_heads(self, out):
        m = out.shape[-1]
        if m % 2 != 0:
            raise ValueError("final layer must be even to split into s and t")
        return out[..., : m // 2], out[..., m // 2 :]

    def _merge_heads(self, tape, ds, dt):
        return np.concatenate(
            [np.atleast_2d(ds) if tape.batched else np.asarray(ds),
             np.atleast_2d(dt) if tape.batched else np.asarray(dt)],
            axis=-1,
        )

    def forward_raw(self, x):
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        a = x if batched else x[None, :]
        if a.shape[1] != self.sizes[0]:
            raise ValueError(
                f"input size {a.shape[1]} does not match net input {self.sizes[0]}"
            )
        activations = [a]
        for w in self.weights[:-1]:
            a = np.tanh(a @ w.T)
            activations.append(a)
        out = a @ self.weights[-1].T
        tape = GradientTape(self.version, activations, batched)
        return (out if batched else out[0]), tape

    def backward_raw(self, tape, cotangent):
        """Gradients of <cotangent, out> for every weight and the input."""
        self._check_tape(tape)
        acts = tape.activations
        g = np.asarray(cotangent, dtype=np.float64)
        if not tape.batched:
            g = g[None, :]
        grads = [None] * len(self.weights)
        grads[-1] = g.T @ acts[-1]
        gx = g @ self.weights[-1]
        for k in range(len(self.weights) - 2, -1, -1):
            g = gx * (1.0 - acts[k + 1] ** 2)
            grads[k] = g.T @ acts[k]
            gx = g @ self.weights[k]
        return grads, (gx if tape.batched else gx[0])


def _conv_forward(x, kern, d):
    pad = ((0, 0), (0, 0)) + ((1, 1),) * d
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, kern.shape[2:], axis=tuple(range(2, 2 + d)))
    if d == 2:
        return xp, np.einsum("bchwij,ocij->bohw", win, kern)
    return xp, np.einsum("bchwyijk,ocijk->bohwy", win, kern)


def _conv_backward(xp, g, kern, d):
    win = sliding_window_view(xp, kern.shape[2:], axis=tuple(range(2, 2 + d)))
    pad = ((0, 0), (0, 0)) + ((1, 1),) * d
    gp = np.pad(g, pad)
    gwin = sliding_window_view(gp, kern.shape[2:], axis=tuple(range(2, 2 + d)))
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * d
    if d == 2:
        dk = np.einsum("bchwij,bohw->ocij", win, g)
        dx = np.einsum("bohwij,ocij->bchw", gwin, kern[flip])
    else:
        dk = np.einsum("bchwyijk,bohwy->ocijk", win, g)
        dx = np.einsum("bohwyijk,ocijk->bchwy", gwin, kern[flip])
    return dk, dx


class OddConvNet(_OddNet):
    """Odd convolutional net: kernel 3, zero padding 1, stride 1.

    The default architecture is 3 hidden layers of 8 kernels and a
    final convolution to 2 channels (the s and t heads).  Spatial
    extent is free, so one net evaluates on any patch size.
    """

    def __init__(self, weights, d=2):
        super().__init__(weights)
        if d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        self.d = d
        for w in self.weights:
            if w.ndim != 2 + d or w.shape[2:] != (3,) * d:
                raise ValueError(f"conv weights must be (out, in{', 3' * d})")
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("channel counts do not chain")
        self.channels = [self.weights[0].shape[1]] + [
            w.shape[0] for w in self.weights
        ]

    @classmethod
    def init(cls, in_channels, seed, d=2, hidden=(8, 8, 8), out_channels=2,
             stream_index=0):
        stream = Stream.from_seed(seed, stream_index)
        chain = [in_channels, *hidden, out_channels]
        weights = []
        for k, (c_in, c_out) in enumerate(zip(chain, chain[1:])):
            shape = (c_out, c_in) + (3,) * d
            if k == len(chain) - 2:
                weights.append(np.zeros(shape))
            else:
                bound = 1.0 / math.sqrt(c_in * 3**d)
                weights.append(_uniform_array(shape, bound, stream))
        return cls(weights, d=d)

    def _split_heads(self, out):
        if out.shape[-self.d - 1] != 2:
            raise ValueError("final conv must have 2 output channels")
        if out.ndim == self.d + 2:
            return out[:, 0], out[:, 1]
        return out[0], out[1]

    def _merge_heads(self, tape, ds, dt):
        ds = np.asarray(ds, dtype=np.float64)
        dt = np.asarray(dt, dtype=np.float64)
        axis = 1 if tape.batched else 0
        return np.stack([ds, dt], axis=axis)

    def forward_raw(self, x):
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == self.d + 2
        a = x if batched else x[None]
        if a.ndim != self.d + 2 or a.shape[1] != self.channels[0]:
            raise ValueError("input must be (B, C, *spatial) with matching C")
        activations = []
        padded = []
        for k, w in enumerate(self.weights):
            xp, out = _conv_forward(a, w, self.d)
            padded.append(xp)
            if k < len(self.weights) - 1:
                a = np.tanh(out)
                activations.append(a)
            else:
                a = out
        tape = GradientTape(self.version, activations, batched, {"padded": padded})
        return (a if batched else a[0]), tape

    def backward_raw(self, tape, cotangent):
        self._check_tape(tape)
        padded = tape.extra["padded"]
        acts = tape.activations
        g = np.asarray(cotangent, dtype=np.float64)
        if not tape.batched:
            g = g[None]
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            dk, dx = _conv_backward(padded[k], g, self.weights[k], self.d)
            grads[k] = dk
            if k > 0:
                g = dx * (1.0 - acts[k - 1] ** 2)
            else:
                g = dx
        return grads, (g if tape.batched else g[0])


class PairedNets:
    """Two independent nets supplying s and t separately.

    Same (s, t, tape) interface as the shared-head nets; parameter
    lists concatenate net_s's weights before net_t's.
    """

    def __init__(self, net_s, net_t):
        self.net_s = net_s
        self.net_t = net_t

    @property
    def version(self):
        return (self.net_s.version, self.net_t.version)

    @property
    def n_parameters(self):
        return self.net_s.n_parameters + self.net_t.n_parameters

    def parameters(self):
        return self.net_s.parameters() + self.net_t.parameters()

    def set_weights(self, new_weights):
        k = len(self.net_s.weights)
        self.net_s.set_weights(new_weights[:k])
        self.net_t.set_weights(new_weights[k:])

    def zero_grads(self):
        return self.net_s.zero_grads() + self.net_t.zero_grads()

    def forward(self, x):
        out_s, tape_s = self.net_s.forward_raw(x)
        out_t, tape_t = self.net_t.forward_raw(x)
        tape = GradientTape(
            self.version, [], tape_s.batched, {"s": tape_s, "t": tape_t}
        )
        return self._as_head(out_s), self._as_head(out_t), tape

    def _as_head(self, out):
        # a 1-channel conv output keeps its spatial axes as the head
        if isinstance(self.net_s, OddConvNet):
            return out[:, 0] if out.ndim == self.net_s.d + 2 else out[0]
        return out

    def _head_cotangent(self, tape_part, grad):
        if isinstance(self.net_s, OddConvNet):
            axis = 1 if tape_part.batched else 0
            return np.expand_dims(np.asarray(grad, dtype=np.float64), axis)
        return np.asarray(grad, dtype=np.float64)

    def backward(self, tape, ds, dt):
        if tape.version != self.version:
            raise RuntimeError("stale tape: parameters changed since forward")
        tape_s, tape_t = tape.extra["s"], tape.extra["t"]
        gs, dx_s = self.net_s.backward_raw(tape_s, self._head_cotangent(tape_s, ds))
        gt, dx_t = self.net_t.backward_raw(tape_t, self._head_cotangent(tape_t, dt))
        return gs + gt, dx_s + dx_t
