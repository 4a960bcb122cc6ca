"""Replica lattice geometry and the phi^4 action.

A scalar field lives on ``n_replicas`` copies of a periodic (1+1)- or
(2+1)-dimensional lattice of shape ``T x Lx (x Ly)``.  The copies are
glued along the temporal boundary: a temporal wrap link (tau = T-1 back
to tau = 0) at spatial column x < cut crosses from replica r into
replica (r+1) mod n, while all other links stay inside their replica.
The integer ``cut`` is the defect length; cut = 0 gives n decoupled
lattices and cut = Lx a single lattice of temporal extent n*T.

The action of a configuration is

    S = sum_x [ (1 - 2*lam) phi(x)^2 + lam phi(x)^4 ]
        - 2*kappa sum_x sum_{mu > 0} phi(x) phi(x + mu)

with each link counted once (positive directions only) and the temporal
wrap links rerouted as above.  The interpolated action additionally
mixes the wrap links of the single column x == cut between their glued
and unglued targets with weights c and (1 - c); it is affine in c and
coincides with the plain action at cut and cut+1 at the endpoints.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class ActionParams:
    """Couplings of the phi^4 action.

    ``lam`` must satisfy 2*lam < 1 so the single-site measure has a
    normalizable Gaussian factor (the heatbath proposal relies on it);
    kappa = 0 (decoupled sites) is allowed for testing.
    """

    kappa: float
    lam: float

    def __post_init__(self):
        if not (self.kappa >= 0.0):
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not (0.0 <= self.lam < 0.5):
            raise ValueError(f"lam must lie in [0, 0.5), got {self.lam}")

    @property
    def alpha(self):
        """Coefficient 1 - 2*lam of the quadratic site term."""
        return 1.0 - 2.0 * self.lam


@dataclass(frozen=True)
class ReplicaGeometry:
    """n replica copies of a periodic T x Lx (x Ly) lattice, glued on x < cut."""

    T: int
    spatial: tuple
    n_replicas: int = 2
    cut: int = 0

    def __post_init__(self):
        spatial = tuple(int(s) for s in self.spatial)
        object.__setattr__(self, "spatial", spatial)
        if len(spatial) not in (1, 2):
            raise ValueError("spatial shape must be (Lx,) or (Lx, Ly)")
        if self.T < 2 or any(s < 2 for s in spatial):
            raise ValueError("every lattice extent must be >= 2")
        if self.n_replicas < 1:
            raise ValueError("n_replicas must be >= 1")
        if not (0 <= self.cut <= spatial[0]):
            raise ValueError(
                f"cut must lie in [0, Lx] = [0, {spatial[0]}], got {self.cut}"
            )

    @property
    def D(self):
        """Spacetime dimension (2 or 3)."""
        return 1 + len(self.spatial)

    @property
    def Lx(self):
        return self.spatial[0]

    @property
    def Ly(self):
        if len(self.spatial) < 2:
            raise AttributeError("Ly is only defined for D = 3 geometries")
        return self.spatial[1]

    @property
    def shape(self):
        """Array shape of one configuration: (n_replicas, T, Lx[, Ly])."""
        return (self.n_replicas, self.T) + self.spatial

    @property
    def n_sites(self):
        return int(np.prod(self.shape))

    def with_cut(self, cut):
        return ReplicaGeometry(self.T, self.spatial, self.n_replicas, cut)

    def boundary_area(self, convention="one"):
        """Defect boundary measure |dA| for the c-function normalization.

        ``"one"`` counts a single defect endpoint (1 in D = 2, Ly in
        D = 3); ``"two"`` counts both endpoints of the glued interval.
        """
        per_end = 1 if self.D == 2 else self.Ly
        if convention == "one":
            return per_end
        if convention == "two":
            return 2 * per_end
        raise ValueError(f"unknown boundary convention {convention!r}")

    # -- site bookkeeping -------------------------------------------------

    def site_index(self, replica, tau, x, y=None):
        """Flat index of a site; C-order over (replica, tau, x[, y])."""
        if len(self.spatial) == 1:
            return (replica * self.T + tau) * self.Lx + x
        return ((replica * self.T + tau) * self.Lx + x) * self.Ly + y

    def neighbor(self, replica, site, direction):
        """The site one step along ``direction`` (+-1: tau, +-2: x, +-3: y).

        Returns ``(replica, site_tuple)``.  Temporal wrap steps at
        columns x < cut cross to the next (previous) replica; everything
        else is periodic inside the replica.
        """
        axis = abs(direction) - 1
        if direction == 0 or axis >= self.D:
            raise ValueError(f"direction must be +-1..+-{self.D}, got {direction}")
        coords = list(site)
        if len(coords) != len(self.spatial) + 1:
            raise ValueError(f"site must have {len(self.spatial) + 1} coordinates")
        r = replica
        if not (0 <= r < self.n_replicas):
            raise ValueError(f"replica index out of range: {r}")
        extents = (self.T,) + self.spatial
        for c, e in zip(coords, extents):
            if not (0 <= c < e):
                raise ValueError(f"site {tuple(site)} outside lattice {extents}")
        x = coords[1]
        if axis == 0:
            if direction > 0:
                if coords[0] == self.T - 1:
                    coords[0] = 0
                    if x < self.cut:
                        r = (r + 1) % self.n_replicas
                else:
                    coords[0] += 1
            else:
                if coords[0] == 0:
                    coords[0] = self.T - 1
                    if x < self.cut:
                        r = (r - 1) % self.n_replicas
                else:
                    coords[0] -= 1
        else:
            e = extents[axis]
            coords[axis] = (coords[axis] + (1 if direction > 0 else -1)) % e
        return r, tuple(coords)

    def sites(self):
        """All (replica, site_tuple) pairs in flat (raster) order."""
        extents = (self.T,) + self.spatial
        for r in range(self.n_replicas):
            for flat in np.ndindex(*extents):
                yield r, flat


def coupling_width(geometry):
    """Table width: 2 D neighbors plus 2 slots for the interpolated column."""
    return 2 * geometry.D + 2


@lru_cache(maxsize=64)
def _coupling_table_cached(geometry, c):
    width = coupling_width(geometry)
    V = geometry.n_sites
    idx = np.zeros((V, width), dtype=np.int32)
    wgt = np.zeros((V, width), dtype=np.float64)
    interp = c is not None
    if interp and not (0 <= geometry.cut < geometry.Lx):
        raise ValueError("interpolation requires cut < Lx")
    s = 0
    for r, site in geometry.sites():
        slots = {}  # partner flat index -> accumulated weight, insertion-ordered
        tau, x = site[0], site[1]
        for axis in range(1, geometry.D + 1):
            for sgn in (1, -1):
                nr, nsite = geometry.neighbor(r, site, sgn * axis)
                is_wrap = axis == 1 and (
                    (sgn > 0 and tau == geometry.T - 1) or (sgn < 0 and tau == 0)
                )
                if interp and is_wrap and x == geometry.cut:
                    # split between the unglued and the glued target
                    other = (r + sgn) % geometry.n_replicas
                    intra = geometry.site_index(r, *nsite)
                    cross = geometry.site_index(other, *nsite)
                    slots[intra] = slots.get(intra, 0.0) + (1.0 - c)
                    slots[cross] = slots.get(cross, 0.0) + c
                else:
                    flat = geometry.site_index(nr, *nsite)
                    slots[flat] = slots.get(flat, 0.0) + 1.0
        if len(slots) > width:
            raise AssertionError("coupling table width exceeded")
        for k, (flat, w) in enumerate(slots.items()):
            idx[s, k] = flat
            wgt[s, k] = w
        s += 1
    idx.setflags(write=False)
    wgt.setflags(write=False)
    return idx, wgt


def coupling_table(geometry, c=None):
    """Per-site neighbor table ``(idx, wgt)`` with b(s) = sum_k wgt*phi[idx].

    ``c`` interpolates the temporal wrap links of column x == cut between
    their unglued (weight 1-c) and glued (weight c) targets; ``None``
    gives the plain geometry.  Tables are cached and read-only.
    """
    if c is not None:
        c = float(c)
        if not (0.0 <= c <= 1.0):
            raise ValueError(f"interpolation weight must lie in [0, 1], got {c}")
    return _coupling_table_cached(geometry, c)


@dataclass
class FieldConfig:
    """One field configuration bound to its geometry."""

    geometry: ReplicaGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.shape:
            raise ValueError(
                f"field shape {self.values.shape} does not match geometry "
                f"{self.geometry.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @classmethod
    def cold(cls, geometry):
        """All-zero start: the classical vacuum of the single-site potential."""
        return cls(geometry, np.zeros(geometry.shape))

    @classmethod
    def hot(cls, geometry, stream):
        """Independent standard-normal start drawn from ``stream``."""
        flat = np.array([stream.normal() for _ in range(geometry.n_sites)])
        return cls(geometry, flat.reshape(geometry.shape))

    def flat(self):
        """The 1-D site-ordered view the kernels operate on."""
        return self.values.reshape(-1)

    def copy(self):
        return FieldConfig(self.geometry, self.values.copy())


# -- action evaluation ----------------------------------------------------


def _flatten(values, geometry):
    arr = np.asarray(values, dtype=np.float64)
    V = geometry.n_sites
    if arr.shape == geometry.shape:
        return arr.reshape(1, V), True
    if arr.ndim >= 1 and arr.shape[-len(geometry.shape):] == geometry.shape:
        lead = arr.shape[: -len(geometry.shape)]
        return arr.reshape(int(np.prod(lead)), V), False
    if arr.ndim == 1 and arr.size == V:
        return arr.reshape(1, V), True
    if arr.ndim == 2 and arr.shape[1] == V:
        return arr, False
    raise ValueError(f"cannot interpret field array of shape {arr.shape}")


def neighbor_sum(values, geometry, c=None):
    """b(s) = sum over links at s of the partner values (batched)."""
    flat, single = _flatten(values, geometry)
    idx, wgt = coupling_table(geometry, c)
    b = np.einsum("sk,bsk->bs", wgt, flat[:, idx])
    return b[0] if single else b


def action(values, geometry, params, c=None):
    """Total action; scalar for one configuration, vector for a batch."""
    flat, single = _flatten(values, geometry)
    b = neighbor_sum(flat, geometry, c=c)
    phi2 = flat * flat
    site = params.alpha * phi2 + params.lam * phi2 * phi2
    total = site.sum(axis=1) - params.kappa * np.einsum("bs,bs->b", flat, b)
    return float(total[0]) if single else total


def interpolated_action(values, geometry, params, c):
    """Action with the wrap links of column cut mixed by weight c in [0, 1]."""
    if not (0 <= geometry.cut < geometry.Lx):
        raise ValueError("interpolated action requires cut < Lx")
    return action(values, geometry, params, c=float(c))


def action_gradient(values, geometry, params, c=None):
    """dS/dphi, same shape as ``values``."""
    arr = np.asarray(values, dtype=np.float64)
    flat, _ = _flatten(arr, geometry)
    b = neighbor_sum(flat, geometry, c=c)
    g = 2.0 * params.alpha * flat + 4.0 * params.lam * flat**3 - 2.0 * params.kappa * b
    return g.reshape(arr.shape)


def local_action_delta(values, geometry, params, flat_site, new_value, c=None):
    """Action change from setting one site to ``new_value``.

    Uses the cached coupling row, so it is O(1); agrees with the
    full-action difference.
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    idx, wgt = coupling_table(geometry, c)
    b = float(wgt[flat_site] @ flat[idx[flat_site]])
    old = flat[flat_site]
    p2, x2 = old * old, new_value * new_value
    return (
        params.alpha * (x2 - p2)
        + params.lam * (x2 * x2 - p2 * p2)
        - 2.0 * params.kappa * b * (new_value - old)
    )


def defect_column_bilinear(values, geometry):
    """sum_{r,y} phi_r(T-1, cut, y) * [phi_{r+1}(0, cut, y) - phi_r(0, cut, y)].

    The derivative of the interpolated action with respect to c is
    -2*kappa times this sum; it is the per-step work kernel of the
    gluing protocol.
    """
    if not (0 <= geometry.cut < geometry.Lx):
        raise ValueError("defect column requires cut < Lx")
    v = np.asarray(values, dtype=np.float64).reshape(geometry.shape)
    top = v[:, geometry.T - 1, geometry.cut]  # (n[, Ly])
    bot = v[:, 0, geometry.cut]
    rolled = np.roll(bot, -1, axis=0)  # replica r -> r+1 mod n
    return float(np.sum(top * (rolled - bot)))
