"""Deterministic random-stream derivation and shared sampler tables.

Every stochastic component of the package draws from a xoshiro256++
generator.  Generator states are derived from a ``(master seed, stream
index)`` pair by the splitmix64 finalizer, so independent streams can be
created in O(1) for any index and the mapping is part of the on-disk
reproducibility contract: equal seeds and indices give bit-identical
streams in both the compiled and the pure-Python kernel backend.

The normal sampler is a 256-layer ziggurat.  Its tables are computed here
once, in Python, and handed to whichever backend is active; neither
backend builds its own tables, which removes any chance of cross-backend
rounding drift.
"""

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

ZIGGURAT_LAYERS = 256
ZIGGURAT_R = 3.6541528853610088


def mix64(z):
    """splitmix64 finalizer: a 64-bit bijective hash."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_words(seed, stream=0):
    """Four xoshiro256++ state words for (seed, stream).

    The rule is: ``s0 = mix64(mix64(seed) + (stream + 1) * GOLDEN)`` and
    word k is ``mix64(s0 + k * GOLDEN)`` for k = 1..4.  Distinct stream
    indices land in unrelated regions of the splitmix64 sequence, so the
    derived generators are statistically independent.
    """
    if stream < 0:
        raise ValueError(f"stream index must be >= 0, got {stream}")
    base = mix64(seed & MASK64)
    s0 = mix64((base + (stream + 1) * GOLDEN) & MASK64)
    words = tuple(mix64((s0 + k * GOLDEN) & MASK64) for k in (1, 2, 3, 4))
    if not any(words):  # xoshiro must not be seeded all-zero
        words = (GOLDEN, words[1], words[2], words[3])
    return words


def derive_seed(seed, n):
    """A fresh master seed for sub-task n of a run seeded with ``seed``."""
    return mix64((mix64(seed & MASK64) + (n & MASK64) * GOLDEN) & MASK64)


def _gauss(x):
    return math.exp(-0.5 * x * x)


def build_ziggurat_tables():
    """Edge and density tables for the 256-layer normal ziggurat.

    Returns ``(X, F)`` as lists of 257 floats.  ``X[1] = R`` is the start
    of the tail; ``X[0] = v / f(R)`` is the virtual width of the base
    layer; X decreases towards ``X[256] ~ 0``.  ``F[i] = f(X[i])`` except
    for the unused sentinel ``F[0] = 1.0``.
    """
    n = ZIGGURAT_LAYERS
    r = ZIGGURAT_R
    tail_area = math.sqrt(math.pi / 2.0) * math.erfc(r / math.sqrt(2.0))
    v = r * _gauss(r) + tail_area

    x = [0.0] * (n + 1)
    x[0] = v / _gauss(r)
    x[1] = r
    for i in range(2, n + 1):
        y = _gauss(x[i - 1]) + v / x[i - 1]
        if y >= 1.0:
            x[i] = 0.0
        else:
            x[i] = math.sqrt(-2.0 * math.log(y))
    f = [1.0] + [_gauss(xi) for xi in x[1:]]
    return x, f


ZIGGURAT_X, ZIGGURAT_F = build_ziggurat_tables()
