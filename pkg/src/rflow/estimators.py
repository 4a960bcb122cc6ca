"""From work records to physics: effective sample size, partition-function
ratios with autocorrelation-aware errors, the entropic c-function, and
Kullback-Leibler diagnostics.

Sign conventions: a forward evolution (or flow) from the cut-l ensemble
toward cut l+1 carries generalized work w per sample with

    Z(l+1) / Z(l) = < exp(-w) >,

so ``log_ratio`` reports ln of the *target over base* partition function.
The c-function needs ln[Z(l)/Z(l+1)], the negative of that.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np


def ess(works):
    """Effective sample size fraction in (0, 1].

    ESS = <e^-w>^2 / <e^-2w>, computed with a max shift so any |w| that
    fits in a float is safe; invariant under w -> w + const.
    """
    w = np.asarray(works, dtype=np.float64)
    if w.size == 0:
        raise ValueError("ess needs at least one work value")
    # a = -(w - min) lies in (-inf, 0]: exp never overflows
    a = -(w - w.min())
    m1 = np.logaddexp.reduce(a) - math.log(w.size)
    m2 = np.logaddexp.reduce(2.0 * a) - math.log(w.size)
    return float(np.exp(2.0 * m1 - m2))


def cost_proxy(n_samples, ess_value):
    """Fixed-accuracy cost combination N (1/ESS - 1)."""
    if not (0.0 < ess_value <= 1.0):
        raise ValueError("ess must lie in (0, 1]")
    return n_samples * (1.0 / ess_value - 1.0)


# -- autocorrelation ---------------------------------------------------------


def autocovariance(x):
    """Biased autocovariance gamma[t] = <(x_0 - mu)(x_t - mu)>, t < len(x)."""
    y = np.asarray(x, dtype=np.float64)
    n = y.size
    y = y - y.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n]
    return acf / n


def tau_int(x, c=6.0):
    """Integrated autocorrelation time with automatic windowing.

    Sums normalized autocorrelations up to the first window W with
    W >= c * tau(W); returns (tau, error, window).  A constant series
    returns (0.5, 0.0, 0): one effectively independent sample per draw.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 16:
        raise ValueError("series too short for autocorrelation analysis")
    gamma = autocovariance(x)
    if gamma[0] <= 0.0:
        return 0.5, 0.0, 0
    rho = gamma / gamma[0]
    tau = 0.5
    window = 0
    for t in range(1, n // 2):
        tau += float(rho[t])
        window = t
        if t >= c * tau:
            break
    # anti-correlated series can honestly give tau < 1/2; only forbid <= 0
    tau = max(tau, 1e-12)
    err = tau * math.sqrt((4.0 * window + 2.0) / n)
    return tau, err, window


def mean_error_gamma(x):
    """(mean, standard error) of the series mean, inflated by 2 tau_int."""
    x = np.asarray(x, dtype=np.float64)
    tau, _, _ = tau_int(x)
    var = float(np.var(x))
    se = math.sqrt(2.0 * tau * var / x.size) if var > 0 else 0.0
    return float(x.mean()), se


# -- jackknife ---------------------------------------------------------------


def jackknife_transformed_mean(x, transform, n_bins=20):
    """(value, error) of transform(mean(x)) by leave-one-bin-out jackknife.

    Binning absorbs autocorrelation; bins are equal-length prefixes of
    the series (a short tail remainder is dropped).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("jackknife needs at least 2 samples")
    bins = int(min(n_bins, n))
    blen = n // bins
    used = bins * blen
    bmeans = x[:used].reshape(bins, blen).mean(axis=1)
    total = bmeans.mean()
    value = transform(float(total))
    loo = (total * bins - bmeans) / (bins - 1)
    gk = np.array([transform(float(v)) for v in loo])
    se = math.sqrt((bins - 1) / bins * float(np.sum((gk - gk.mean()) ** 2)))
    return value, se


def error_pipeline(series, transform=None, n_bins=20):
    """Standard error of transform(mean(series)).

    Binned jackknife is the primary estimate; the gamma-style
    autocorrelation error is available separately for cross-checks.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.size < 16:
        raise ValueError("series too short (need >= 16)")
    if transform is None:
        transform = lambda v: v
    _, se = jackknife_transformed_mean(series, transform, n_bins)
    return se


# -- ratio estimation --------------------------------------------------------


@dataclass(frozen=True)
class RatioEstimate:
    """ln[Z_target/Z_base] with its error and sampling quality measures."""

    ln_ratio: float
    sigma: float
    n_samples: int
    ess: float
    method: str
    degenerate_variance: bool = False

    @property
    def cost(self):
        return cost_proxy(self.n_samples, self.ess)


def log_ratio(works, method="nemc", n_bins=20):
    """Estimate ln[Z_target/Z_base] = ln <e^-w> from work values.

    The error comes from a binned jackknife of ln of the (shift-scaled)
    mean weight.  A constant-w sample is flagged degenerate with zero
    error instead of failing.
    """
    w = np.asarray(works, dtype=np.float64)
    if w.size == 0:
        raise ValueError("log_ratio needs at least one work value")
    n = int(w.size)
    shift = float(w.min())
    x = np.exp(-(w - shift))  # in (0, 1], overflow-free
    ess_value = ess(w)
    lr = math.log(float(x.mean())) - shift
    if np.all(w == w[0]) or n == 1:
        return RatioEstimate(lr, 0.0, n, ess_value, method, degenerate_variance=True)
    _, se = jackknife_transformed_mean(x, math.log, n_bins)
    return RatioEstimate(lr, se, n, ess_value, method)


def combine_directions(forward, reverse):
    """Consistency gap ln_fwd + ln_rev and its combined error."""
    gap = forward.ln_ratio + reverse.ln_ratio
    err = math.hypot(forward.sigma, reverse.sigma)
    return gap, err


def kl_diagnostic(works, ln_ratio_value):
    """D_KL = <w> + ln(Z_target/Z_base); non-negative up to sampling noise."""
    w = np.asarray(works, dtype=np.float64)
    if w.size == 0:
        raise ValueError("kl_diagnostic needs work values")
    return float(w.mean()) + float(ln_ratio_value)


# -- entropic c-function -----------------------------------------------------


@dataclass(frozen=True)
class CFunPoint:
    """One point of the order-n entropic c-function at cut l -> l+1."""

    l: int
    l_eff: float
    value: float
    sigma: float
    n: int
    method: str
    convention: str


def c_function(
    ratio_by_cut,
    geometry,
    n=None,
    method="nemc",
    boundary="one",
    midpoint=True,
):
    """Convert cut-step ratio estimates into c-function points.

    ``ratio_by_cut`` maps l to the RatioEstimate of ln[Z(l+1)/Z(l)].
    C_n(l) = l_eff^{D-1} / |dA| * 1/(n-1) * ln[Z(l)/Z(l+1)], evaluated
    at l_eff = l + 1/2 (midpoint convention) or l_eff = l.
    """
    n = geometry.n_replicas if n is None else int(n)
    if n < 2:
        raise ValueError("the replica index n must be >= 2")
    area = geometry.boundary_area(boundary)
    convention = f"boundary={boundary},l_eff={'midpoint' if midpoint else 'integer'}"
    points = []
    for l in sorted(ratio_by_cut):
        est = ratio_by_cut[l]
        l_eff = l + 0.5 if midpoint else float(l)
        scale = l_eff ** (geometry.D - 1) / area / (n - 1)
        points.append(
            CFunPoint(
                l=int(l),
                l_eff=l_eff,
                value=-scale * est.ln_ratio,
                sigma=scale * est.sigma,
                n=n,
                method=est.method or method,
                convention=convention,
            )
        )
    return points


CSV_COLUMNS = [
    "l_eff",
    "C2",
    "sigma",
    "ESS",
    "N",
    "method",
    "kappa",
    "lambda",
    "T",
    "L",
    "convention",
    "l",
    "n_replicas",
]


def write_cfun_csv(path, points, estimates, geometry, params):
    """Plot-ready CSV: one row per c-function point, metadata included."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for p in points:
            est = estimates[p.l]
            writer.writerow(
                [
                    f"{p.l_eff:.6g}",
                    repr(p.value),
                    repr(p.sigma),
                    repr(est.ess),
                    est.n_samples,
                    p.method,
                    repr(params.kappa),
                    repr(params.lam),
                    geometry.T,
                    geometry.Lx,
                    p.convention,
                    p.l,
                    geometry.n_replicas,
                ]
            )
