"""Independent ground truths: Gaussian determinants, tiny-lattice quadrature,
and the conformal prediction for the defect free-energy differences.

These never touch the samplers; they validate them.
"""

import math

import numpy as np

from .lattice import coupling_table, coupling_width


class RefinementError(RuntimeError):
    """Quadrature failed its refinement-stability certificate."""


def coupling_matrix(geometry, c=None):
    """Dense symmetric link matrix A with neighbor sum b = A phi.

    Entries are link multiplicities (2 where small extents double a
    link); the interpolated column splits its wrap weights by c.
    """
    idx, wgt = coupling_table(geometry, c)
    V = geometry.n_sites
    A = np.zeros((V, V))
    for s in range(V):
        for k in range(idx.shape[1]):
            A[s, idx[s, k]] += wgt[s, k]
    return A


def gaussian_quadratic_form(geometry, kappa, c=None):
    """M with S = phi^T M phi at lam = 0: identity minus kappa times links."""
    return np.eye(geometry.n_sites) - kappa * coupling_matrix(geometry, c)


def _logdet_pd(M, kappa):
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(
            f"quadratic form not positive definite: kappa={kappa} is outside "
            "the free-field stability range for this geometry"
        ) from None
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def gaussian_log_ratio(geometry_a, geometry_b, kappa):
    """ln[Z(b)/Z(a)] for the free field (lam = 0), exactly.

    Z is proportional to det(M)^(-1/2) with the same Gaussian prefactor
    on both sides, so the ratio is half the log-determinant difference.
    """
    if geometry_a.n_sites != geometry_b.n_sites:
        raise ValueError("geometries must have identical site counts")
    la = _logdet_pd(gaussian_quadratic_form(geometry_a, kappa), kappa)
    lb = _logdet_pd(gaussian_quadratic_form(geometry_b, kappa), kappa)
    return 0.5 * (la - lb)


# -- tiny-lattice quadrature ------------------------------------------------


def default_domain_halfwidth(params):
    """Truncation radius: 6 sigma of the widest single-site Gaussian factor."""
    return 6.0 / math.sqrt(2.0 * (1.0 - 2.0 * params.lam))


def _eliminate_log_integral(factors, n_vars, grid, weights):
    """Integrate prod(factors) over all variables on the tensor grid.

    ``factors`` is a list of (vars tuple, ndarray over those vars).
    Greedy min-degree variable elimination; every contraction rescales
    by its max and accumulates the log, so nothing over- or underflows.
    Returns log of the integral.
    """
    factors = [(tuple(v), np.asarray(a, dtype=np.float64)) for v, a in factors]
    logscale = 0.0
    remaining = set(range(n_vars))
    while remaining:
        # min-degree: eliminate the variable whose bundle spans the fewest
        # other variables, so intermediate factors stay small
        degree = {}
        for v in remaining:
            linked = set()
            for vars_, _ in factors:
                if v in vars_:
                    linked.update(vars_)
            linked.discard(v)
            degree[v] = len(linked)
        var = min(sorted(remaining), key=lambda v: degree[v])
        bundle = [(vs, a) for vs, a in factors if var in vs]
        rest = [(vs, a) for vs, a in factors if var not in vs]
        # multiply the bundle on the union of its variables, var moved last
        union = []
        for vs, _ in bundle:
            for v in vs:
                if v not in union:
                    union.append(v)
        union.remove(var)
        union.append(var)
        m = len(grid)
        if m ** len(union) > 300_000_000:
            raise RefinementError(
                "quadrature intermediate factor exceeds the memory budget"
            )
        # multiply in place into one preallocated block: peak memory is a
        # single full-union array plus the small input factors
        prod = np.ones([m] * len(union))
        for vs, a in bundle:
            shape = [1] * len(union)
            perm = [vs.index(u) for u in union if u in vs]
            a2 = np.transpose(a, perm)
            k = 0
            for i, u in enumerate(union):
                if u in vs:
                    shape[i] = a2.shape[k]
                    k += 1
            prod *= a2.reshape(shape)
        integrated = np.tensordot(prod, weights, axes=([len(union) - 1], [0]))
        m = float(np.max(np.abs(integrated))) if integrated.size else 0.0
        if m == 0.0 or not math.isfinite(m):
            raise RefinementError("quadrature contraction degenerated to zero")
        logscale += math.log(m)
        integrated = integrated / m
        new_vars = tuple(union[:-1])
        if new_vars:
            rest.append((new_vars, integrated))
        else:
            logscale += math.log(float(integrated))
        factors = rest
        remaining.discard(var)
    for vs, a in factors:  # fully scalar leftovers
        logscale += math.log(float(a))
    return logscale


def quadrature_log_z(geometry, params, halfwidth=None, nodes=32, c=None):
    """log of int exp(-S) over [-R, R]^V by exact factor-graph contraction.

    Only feasible for ~8 sites; used to validate everything else.
    """
    V = geometry.n_sites
    if V > 8:
        raise ValueError(f"quadrature limited to 8 sites, geometry has {V}")
    R = default_domain_halfwidth(params) if halfwidth is None else float(halfwidth)
    x, w = np.polynomial.legendre.leggauss(int(nodes))
    grid = x * R
    weights = w * R
    alpha = 1.0 - 2.0 * params.lam
    site_exponent = -(alpha * grid**2 + params.lam * grid**4)
    A = coupling_matrix(geometry, c)
    pair = {}
    degree = np.zeros(V, dtype=int)
    for i in range(V):
        for j in range(i, V):
            if A[i, j] != 0.0:
                pair[(i, j)] = A[i, j]
                degree[i] += 1
                if j != i:
                    degree[j] += 1
    # fold each site weight in equal shares into its adjacent link factors,
    # so every factor peaks in the interior and can be safely rescaled by
    # its maximum (the log of the scale is added back at the end)
    shift = 0.0
    factors = []
    for s in range(V):
        if degree[s] == 0:
            factors.append(((s,), np.exp(site_exponent)))
    for (i, j), mult in pair.items():
        if i == j:
            expo = params.kappa * mult * grid * grid + site_exponent / degree[i]
            vars_ = (i,)
        else:
            # off-diagonal pairs enter twice in phi^T A phi
            expo = (
                2.0 * params.kappa * mult * np.outer(grid, grid)
                + site_exponent[:, None] / degree[i]
                + site_exponent[None, :] / degree[j]
            )
            vars_ = (i, j)
        peak = float(np.max(expo))
        shift += peak
        factors.append((vars_, np.exp(expo - peak)))
    return shift + _eliminate_log_integral(factors, V, grid, weights)


def quadrature_log_ratio(
    geometry, params, halfwidth=None, nodes=32, certify=True, rtol=1e-5, max_levels=3
):
    """ln[Z(cut+1)/Z(cut)] by direct quadrature with a refinement certificate.

    Certification demands the value be stable to ``rtol`` under doubling
    both the halfwidth and the node count (coverage) and under doubling
    the node count alone (density).  If either check fails, the doubled
    level becomes the new base and the checks repeat, up to
    ``max_levels`` times; then RefinementError is raised rather than
    returning an uncertified number.
    """
    if not (0 <= geometry.cut < geometry.Lx):
        raise ValueError("ratio steps the cut from l to l+1; need cut < Lx")
    R = default_domain_halfwidth(params) if halfwidth is None else float(halfwidth)
    m = int(nodes)
    g_next = geometry.with_cut(geometry.cut + 1)

    def ratio(Rv, mv):
        return quadrature_log_z(g_next, params, Rv, mv) - quadrature_log_z(
            geometry, params, Rv, mv
        )

    val = ratio(R, m)
    if not certify:
        return val
    for _ in range(max_levels):
        coverage = ratio(2.0 * R, 2 * m)
        density = ratio(R, 2 * m)
        if math.isclose(val, coverage, rel_tol=rtol, abs_tol=rtol) and math.isclose(
            val, density, rel_tol=rtol, abs_tol=rtol
        ):
            return val
        R, m, val = 2.0 * R, 2 * m, coverage
    raise RefinementError(
        f"quadrature not stable after {max_levels} refinement doublings "
        f"(last base value {val!r})"
    )


# -- conformal benchmark ----------------------------------------------------


def renyi_profile(l, L, n, charge):
    """(charge/6)(1 + 1/n) ln[(L/pi) sin(pi l / L)]; additive constant dropped."""
    if not 0 < l < L:
        raise ValueError(f"l must lie strictly inside (0, {L})")
    return (charge / 6.0) * (1.0 + 1.0 / n) * math.log((L / math.pi) * math.sin(math.pi * l / L))


def cft_prediction(l, L, n, charge):
    """Predicted ln[Z_n(l)/Z_n(l+1)] from the conformal entropy profile.

    Equals (1 - n) [S_n(l) - S_n(l+1)]; the non-universal constant in
    S_n cancels in the difference.
    """
    if not (0 < l and l + 1 < L):
        raise ValueError(f"need 0 < l < l+1 < L, got l={l}, L={L}")
    return (1.0 - n) * (renyi_profile(l, L, n, charge) - renyi_profile(l + 1, L, n, charge))


def fit_central_charge(ls, measured, sigmas, L, n):
    """Weighted least squares for the central charge.

    The prediction is proportional to the charge, so the fit is a
    one-parameter straight line through the origin against the unit-
    charge prediction.  Returns (charge, standard error, chi2, ndof).
    """
    ls = np.asarray(ls, dtype=int)
    y = np.asarray(measured, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    if not (len(ls) == len(y) == len(s)) or len(ls) == 0:
        raise ValueError("ls, measured, sigmas must be equal-length, nonempty")
    if np.any(s <= 0):
        raise ValueError("sigmas must be positive")
    base = np.array([cft_prediction(int(l), L, n, 1.0) for l in ls])
    wt = 1.0 / s**2
    denom = float(np.sum(wt * base * base))
    if denom == 0.0:
        raise ValueError("degenerate fit: all predictions vanish")
    charge = float(np.sum(wt * base * y)) / denom
    err = math.sqrt(1.0 / denom)
    resid = y - charge * base
    chi2 = float(np.sum(wt * resid * resid))
    return charge, err, chi2, max(len(ls) - 1, 1)
