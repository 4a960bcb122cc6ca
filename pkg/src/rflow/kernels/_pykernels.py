"""Pure-Python kernel backend.

Reference implementation of the sampling hot loops: a xoshiro256++
stream, the ziggurat normal sampler, the single-site heatbath draw and
the full-lattice sweep.  The compiled backend in ``_core.pyx`` mirrors
this code operation for operation (same draw order, same floating-point
expression shapes), so both backends produce bit-identical chains from
equal seeds.  This one is orders of magnitude slower and exists as the
import-time fallback and as the ground truth the benchmark and the
equivalence tests compare against.
"""

import math

from ..rng import MASK64, ZIGGURAT_F, ZIGGURAT_R, ZIGGURAT_X, stream_words

IMPL = "python"

_TWO53_INV = 1.0 / 9007199254740992.0  # 2**-53
MAX_PROPOSALS = 1_000_000


class Stream:
    """xoshiro256++ generator with a ziggurat normal sampler."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, words):
        self.s0, self.s1, self.s2, self.s3 = (w & MASK64 for w in words)

    @classmethod
    def from_seed(cls, seed, stream=0):
        return cls(stream_words(seed, stream))

    def state(self):
        return (self.s0, self.s1, self.s2, self.s3)

    def next_u64(self):
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        t = (s0 + s3) & MASK64
        result = (((t << 23) | (t >> 41)) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self):
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _TWO53_INV

    def uniform_pos(self):
        """Uniform double in (0, 1]; safe as a log argument."""
        return ((self.next_u64() >> 11) + 1) * _TWO53_INV

    def normal(self):
        """Standard normal draw (256-layer ziggurat)."""
        while True:
            u = self.next_u64()
            i = u & 0xFF
            sign = (u >> 8) & 1
            x = ((u >> 11) * _TWO53_INV) * ZIGGURAT_X[i]
            if x < ZIGGURAT_X[i + 1]:
                return -x if sign else x
            if i == 0:
                # Tail beyond R: Marsaglia's method.
                while True:
                    xx = -math.log(self.uniform_pos()) / ZIGGURAT_R
                    yy = -math.log(self.uniform_pos())
                    if yy + yy > xx * xx:
                        break
                x = ZIGGURAT_R + xx
                return -x if sign else x
            # Wedge between layer edges: accept against the true density.
            y = ZIGGURAT_F[i] + self.uniform() * (ZIGGURAT_F[i + 1] - ZIGGURAT_F[i])
            if y < math.exp(-0.5 * x * x):
                return -x if sign else x


def conditional_sample(b, kappa, lam, stream):
    """One heatbath draw from p(phi) ~ exp(2*kappa*b*phi - (1-2*lam)*phi^2 - lam*phi^4).

    Rejection sampling: Gaussian proposal with mean kappa*b/(1-2*lam) and
    variance 1/(2*(1-2*lam)), thinned by exp(-lam*phi^4) <= 1.  Returns
    ``(value, proposals)``.
    """
    alpha = 1.0 - 2.0 * lam
    coef = kappa / alpha
    sigma = math.sqrt(0.5 / alpha)
    return _draw_site(coef * b, sigma, lam, stream)


def _draw_site(mean, sigma, lam, stream):
    n = 0
    while True:
        n += 1
        if n > MAX_PROPOSALS:
            raise RuntimeError(
                "heatbath rejection sampler exceeded the proposal cap "
                f"({MAX_PROPOSALS}) at mean={mean!r}, lam={lam!r}"
            )
        x = mean + sigma * stream.normal()
        if lam == 0.0:
            return x, n
        x2 = x * x
        q = lam * (x2 * x2)
        u = stream.uniform()
        if u <= 1.0 - q:  # squeeze: exp(-q) >= 1-q, so this accepts early
            return x, n
        if u < math.exp(-q):
            return x, n


def sweep(phi, idx, wgt, kappa, lam, stream, accumulate_heat=False):
    """One lexicographic heatbath sweep over all sites, in place.

    ``phi`` is the flat field, ``idx``/``wgt`` the per-site coupling table
    (neighbor flat indices and link weights).  Returns ``(heat, proposals)``
    where heat is the summed local action change of the sweep under the
    action the table encodes.
    """
    nsite, width = idx.shape
    alpha = 1.0 - 2.0 * lam
    coef = kappa / alpha
    sigma = math.sqrt(0.5 / alpha)
    heat = 0.0
    proposals = 0
    for s in range(nsite):
        b = 0.0
        for k in range(width):
            b += wgt[s, k] * phi[idx[s, k]]
        x, n = _draw_site(coef * b, sigma, lam, stream)
        proposals += n
        if accumulate_heat:
            p = phi[s]
            p2 = p * p
            x2 = x * x
            heat += alpha * (x2 - p2) + lam * (x2 * x2 - p2 * p2) - 2.0 * kappa * b * (x - p)
        phi[s] = x
    return heat, proposals


def run_sweeps(phi, idx, wgt, kappa, lam, stream, n_sweeps):
    """n_sweeps heatbath sweeps without heat accounting (prior generation)."""
    proposals = 0
    for _ in range(n_sweeps):
        _, n = sweep(phi, idx, wgt, kappa, lam, stream, accumulate_heat=False)
        proposals += n
    return proposals
