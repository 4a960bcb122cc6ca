# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

Operation-for-operation mirror of ``_pykernels.py`` (same draw order,
same floating-point expression shapes).  Built with -ffp-contract=off so
the compiler cannot fuse multiply-adds and silently change rounding
relative to the pure-Python reference.  Ziggurat tables are injected via
``init_tables`` from the shared Python-built arrays; this module never
derives its own constants.
"""

from libc.math cimport exp, log, sqrt
from libc.stdint cimport int32_t, uint64_t

from ..rng import stream_words

IMPL = "cython"

DEF NLAYER = 257

cdef double _TWO53_INV = 1.0 / 9007199254740992.0
cdef long MAX_PROPOSALS = 1000000

cdef double ZX[NLAYER]
cdef double ZF[NLAYER]
cdef double ZR = 0.0
cdef bint _ready = False


def init_tables(x, f, double r):
    """Install the shared ziggurat tables (called once at package import)."""
    global ZR, _ready
    if len(x) != NLAYER or len(f) != NLAYER:
        raise ValueError("ziggurat tables must have 257 entries")
    cdef int i
    for i in range(NLAYER):
        ZX[i] = x[i]
        ZF[i] = f[i]
    ZR = r
    _ready = True


cdef inline uint64_t _rotl(uint64_t v, int k) nogil:
    return (v << k) | (v >> (64 - k))


cdef class Stream:
    """xoshiro256++ generator with a ziggurat normal sampler."""

    cdef uint64_t s0, s1, s2, s3

    def __init__(self, words):
        if not _ready:
            raise RuntimeError("kernel tables not initialized; import rflow.kernels")
        self.s0 = words[0]
        self.s1 = words[1]
        self.s2 = words[2]
        self.s3 = words[3]

    @classmethod
    def from_seed(cls, seed, stream=0):
        return cls(stream_words(seed, stream))

    def state(self):
        return (self.s0, self.s1, self.s2, self.s3)

    def next_u64(self):
        return _next(self)

    def uniform(self):
        return _uniform(self)

    def uniform_pos(self):
        return _uniform_pos(self)

    def normal(self):
        return _normal(self)


cdef inline uint64_t _next(Stream st):
    cdef uint64_t s0 = st.s0
    cdef uint64_t s1 = st.s1
    cdef uint64_t s2 = st.s2
    cdef uint64_t s3 = st.s3
    cdef uint64_t t = s0 + s3
    cdef uint64_t result = _rotl(t, 23) + s0
    t = s1 << 17
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    st.s0 = s0
    st.s1 = s1
    st.s2 = s2
    st.s3 = s3
    return result


cdef inline double _uniform(Stream st):
    return (_next(st) >> 11) * _TWO53_INV


cdef inline double _uniform_pos(Stream st):
    return ((_next(st) >> 11) + 1) * _TWO53_INV


cdef inline double _normal(Stream st):
    cdef uint64_t u
    cdef int i, sign
    cdef double x, y, xx, yy
    while True:
        u = _next(st)
        i = <int> (u & 0xFF)
        sign = <int> ((u >> 8) & 1)
        x = ((u >> 11) * _TWO53_INV) * ZX[i]
        if x < ZX[i + 1]:
            return -x if sign else x
        if i == 0:
            while True:
                xx = -log(_uniform_pos(st)) / ZR
                yy = -log(_uniform_pos(st))
                if yy + yy > xx * xx:
                    break
            x = ZR + xx
            return -x if sign else x
        y = ZF[i] + _uniform(st) * (ZF[i + 1] - ZF[i])
        if y < exp(-0.5 * x * x):
            return -x if sign else x


cdef inline long _draw_site(double mean, double sigma, double lam, Stream st,
                            double* out):
    # Returns the proposal count, or -1 once the cap is exceeded.
    cdef long n = 0
    cdef double x, x2, q, u
    while True:
        n += 1
        if n > MAX_PROPOSALS:
            return -1
        x = mean + sigma * _normal(st)
        if lam == 0.0:
            out[0] = x
            return n
        x2 = x * x
        q = lam * (x2 * x2)
        u = _uniform(st)
        if u <= 1.0 - q:
            out[0] = x
            return n
        if u < exp(-q):
            out[0] = x
            return n


cdef object _cap_error(double mean, double lam):
    return RuntimeError(
        "heatbath rejection sampler exceeded the proposal cap "
        "(%d) at mean=%r, lam=%r" % (MAX_PROPOSALS, mean, lam)
    )


cdef inline double _bsum(double[::1] phi, const int32_t[:, ::1] idx,
                         const double[:, ::1] wgt, Py_ssize_t s, Py_ssize_t width):
    # Left-to-right accumulation, matching the Python reference loop.
    cdef double b
    cdef Py_ssize_t k
    if width == 6:
        return (wgt[s, 0] * phi[idx[s, 0]] + wgt[s, 1] * phi[idx[s, 1]]
                + wgt[s, 2] * phi[idx[s, 2]] + wgt[s, 3] * phi[idx[s, 3]]
                + wgt[s, 4] * phi[idx[s, 4]] + wgt[s, 5] * phi[idx[s, 5]])
    if width == 8:
        return (wgt[s, 0] * phi[idx[s, 0]] + wgt[s, 1] * phi[idx[s, 1]]
                + wgt[s, 2] * phi[idx[s, 2]] + wgt[s, 3] * phi[idx[s, 3]]
                + wgt[s, 4] * phi[idx[s, 4]] + wgt[s, 5] * phi[idx[s, 5]]
                + wgt[s, 6] * phi[idx[s, 6]] + wgt[s, 7] * phi[idx[s, 7]])
    b = 0.0
    for k in range(width):
        b += wgt[s, k] * phi[idx[s, k]]
    return b


def conditional_sample(double b, double kappa, double lam, Stream stream):
    """One heatbath draw; see the pure-Python twin for the contract."""
    cdef double alpha = 1.0 - 2.0 * lam
    cdef double coef = kappa / alpha
    cdef double sigma = sqrt(0.5 / alpha)
    cdef double x
    cdef long n = _draw_site(coef * b, sigma, lam, stream, &x)
    if n < 0:
        raise _cap_error(coef * b, lam)
    return x, n


def sweep(double[::1] phi, const int32_t[:, ::1] idx, const double[:, ::1] wgt,
          double kappa, double lam, Stream stream, bint accumulate_heat=False):
    """One lexicographic heatbath sweep over all sites, in place."""
    cdef Py_ssize_t nsite = idx.shape[0]
    cdef Py_ssize_t width = idx.shape[1]
    cdef double alpha = 1.0 - 2.0 * lam
    cdef double coef = kappa / alpha
    cdef double sigma = sqrt(0.5 / alpha)
    cdef double heat = 0.0
    cdef long proposals = 0
    cdef Py_ssize_t s
    cdef long n
    cdef double b, x, p, p2, x2
    for s in range(nsite):
        b = _bsum(phi, idx, wgt, s, width)
        n = _draw_site(coef * b, sigma, lam, stream, &x)
        if n < 0:
            raise _cap_error(coef * b, lam)
        proposals += n
        if accumulate_heat:
            p = phi[s]
            p2 = p * p
            x2 = x * x
            heat += alpha * (x2 - p2) + lam * (x2 * x2 - p2 * p2) - 2.0 * kappa * b * (x - p)
        phi[s] = x
    return heat, proposals


def run_sweeps(double[::1] phi, const int32_t[:, ::1] idx, const double[:, ::1] wgt,
               double kappa, double lam, Stream stream, long n_sweeps):
    """n_sweeps heatbath sweeps without heat accounting (prior generation)."""
    cdef Py_ssize_t nsite = idx.shape[0]
    cdef Py_ssize_t width = idx.shape[1]
    cdef double alpha = 1.0 - 2.0 * lam
    cdef double coef = kappa / alpha
    cdef double sigma = sqrt(0.5 / alpha)
    cdef long proposals = 0
    cdef long j, n
    cdef Py_ssize_t s
    cdef double b, x
    for j in range(n_sweeps):
        for s in range(nsite):
            b = _bsum(phi, idx, wgt, s, width)
            n = _draw_site(coef * b, sigma, lam, stream, &x)
            if n < 0:
                raise _cap_error(coef * b, lam)
            proposals += n
            phi[s] = x
    return proposals
