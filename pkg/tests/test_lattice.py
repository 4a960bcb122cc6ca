"""Geometry, coupling tables, and action evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rflow.lattice import (
    ActionParams,
    FieldConfig,
    ReplicaGeometry,
    action,
    action_gradient,
    coupling_table,
    coupling_width,
    defect_column_bilinear,
    interpolated_action,
    local_action_delta,
    neighbor_sum,
)


def brute_force_action(v, g, p, c=None):
    """Straight-from-the-formula evaluation, independent of the tables.

    Site terms plus one hopping term per link (positive directions only);
    the temporal wrap links at the interpolated column mix their targets.
    """
    S = 0.0
    for r, site in g.sites():
        phi = v[(r,) + site]
        S += (1.0 - 2.0 * p.lam) * phi**2 + p.lam * phi**4
    for r, site in g.sites():
        tau, x = site[0], site[1]
        for axis in range(1, g.D + 1):
            nr, ns = g.neighbor(r, site, axis)
            if c is not None and axis == 1 and tau == g.T - 1 and x == g.cut:
                other = (r + 1) % g.n_replicas
                S -= 2.0 * p.kappa * v[(r,) + site] * (
                    (1.0 - c) * v[(r,) + ns] + c * v[(other,) + ns]
                )
            else:
                S -= 2.0 * p.kappa * v[(r,) + site] * v[(nr,) + ns]
    return S


class TestValidation:
    def test_action_params(self):
        ActionParams(kappa=0.0, lam=0.0)
        with pytest.raises(ValueError):
            ActionParams(kappa=-0.1, lam=0.0)
        with pytest.raises(ValueError):
            ActionParams(kappa=0.2, lam=0.5)
        with pytest.raises(ValueError):
            ActionParams(kappa=0.2, lam=-0.01)
        assert ActionParams(0.2, 0.03).alpha == 1.0 - 0.06

    def test_geometry_bounds(self):
        with pytest.raises(ValueError):
            ReplicaGeometry(4, (4,), 2, 5)
        with pytest.raises(ValueError):
            ReplicaGeometry(4, (4,), 2, -1)
        with pytest.raises(ValueError):
            ReplicaGeometry(1, (4,), 2, 0)
        with pytest.raises(ValueError):
            ReplicaGeometry(4, (4, 4, 4), 2, 0)

    def test_field_shape_mismatch(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        with pytest.raises(ValueError):
            FieldConfig(g, np.zeros((2, 4, 5)))
        with pytest.raises(ValueError):
            FieldConfig(g, np.full(g.shape, np.nan))

    def test_c_range(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        v = np.zeros(g.shape)
        p = ActionParams(0.25, 0.03)
        with pytest.raises(ValueError):
            interpolated_action(v, g, p, 1.5)
        with pytest.raises(ValueError):
            interpolated_action(v, g.with_cut(4), p, 0.5)


class TestNeighbor:
    def test_disconnected_wrap_stays_home(self):
        g = ReplicaGeometry(6, (4,), 2, 0)
        for x in range(4):
            assert g.neighbor(0, (5, x), 1) == (0, (0, x))
            assert g.neighbor(1, (0, x), -1) == (1, (5, x))

    def test_wrap_inside_cut_crosses(self):
        g = ReplicaGeometry(6, (8,), 2, 2)
        assert g.neighbor(0, (5, 1), 1) == (1, (0, 1))
        assert g.neighbor(1, (5, 1), 1) == (0, (0, 1))
        assert g.neighbor(0, (0, 1), -1) == (1, (5, 1))

    def test_wrap_outside_cut_stays(self):
        g = ReplicaGeometry(6, (8,), 2, 2)
        assert g.neighbor(0, (5, 5), 1) == (0, (0, 5))
        assert g.neighbor(0, (5, 2), 1) == (0, (0, 2))

    def test_bulk_and_spatial_steps(self):
        g = ReplicaGeometry(6, (8, 4), 2, 3)
        assert g.neighbor(0, (2, 1, 0), 1) == (0, (3, 1, 0))
        assert g.neighbor(0, (2, 7, 0), 2) == (0, (2, 0, 0))
        assert g.neighbor(0, (2, 1, 0), -3) == (0, (2, 1, 3))

    def test_three_replicas_cycle(self):
        g = ReplicaGeometry(4, (4,), 3, 2)
        assert g.neighbor(2, (3, 0), 1) == (0, (0, 0))
        assert g.neighbor(0, (0, 0), -1) == (2, (3, 0))

    def test_invalid_inputs(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        with pytest.raises(ValueError):
            g.neighbor(0, (3, 0), 3)
        with pytest.raises(ValueError):
            g.neighbor(0, (4, 0), 1)
        with pytest.raises(ValueError):
            g.neighbor(2, (0, 0), 1)


class TestAction:
    def test_zero_field(self):
        g = ReplicaGeometry(4, (4,), 2, 2)
        assert action(np.zeros(g.shape), g, ActionParams(0.25, 0.03)) == 0.0

    def test_unit_field_free(self):
        g = ReplicaGeometry(4, (6,), 1, 0)
        v = np.ones(g.shape)
        assert action(v, g, ActionParams(0.0, 0.0)) == g.n_sites

    def test_against_independent_formula(self):
        rng = np.random.default_rng(11)
        p = ActionParams(0.25, 0.03)
        for g in [
            ReplicaGeometry(2, (2,), 2, 1),
            ReplicaGeometry(4, (4,), 2, 0),
            ReplicaGeometry(4, (4,), 2, 2),
            ReplicaGeometry(4, (4,), 2, 4),
            ReplicaGeometry(3, (4, 2), 2, 1),
            ReplicaGeometry(2, (2,), 3, 1),
        ]:
            v = rng.standard_normal(g.shape)
            assert action(v, g, p) == pytest.approx(
                brute_force_action(v, g, p), rel=1e-12
            )

    def test_interpolated_against_independent_formula(self):
        rng = np.random.default_rng(12)
        p = ActionParams(0.2758297, 0.03)
        for g in [
            ReplicaGeometry(4, (4,), 2, 0),
            ReplicaGeometry(4, (4,), 2, 3),
            ReplicaGeometry(3, (4, 2), 2, 1),
        ]:
            v = rng.standard_normal(g.shape)
            for c in (0.0, 0.31, 0.5, 1.0):
                assert interpolated_action(v, g, p, c) == pytest.approx(
                    brute_force_action(v, g, p, c), rel=1e-12
                )

    def test_endpoint_identities_exact(self):
        rng = np.random.default_rng(13)
        g = ReplicaGeometry(4, (4,), 2, 1)
        p = ActionParams(0.25, 0.03)
        v = rng.standard_normal(g.shape)
        assert interpolated_action(v, g, p, 0.0) == action(v, g, p)
        assert interpolated_action(v, g, p, 1.0) == action(v, g.with_cut(2), p)

    def test_hand_interpolated_term(self):
        # c = 0.5 with three marked sites on the interpolated column
        p = ActionParams(0.25, 0.03)
        g = ReplicaGeometry(4, (4,), 2, 1)
        v = np.zeros(g.shape)
        v[0, g.T - 1, 1] = 1.0
        v[0, 0, 1] = 2.0
        v[1, 0, 1] = 4.0
        site = sum((1 - 2 * p.lam) * x**2 + p.lam * x**4 for x in (1.0, 2.0, 4.0))
        hop = interpolated_action(v, g, p, 0.5) - site
        assert hop == pytest.approx(-2 * p.kappa * (0.5 * 1 * 2 + 0.5 * 1 * 4), rel=1e-12)

    def test_full_glue_equals_stacked_torus(self):
        rng = np.random.default_rng(14)
        g2 = ReplicaGeometry(3, (4,), 2, 4)
        g1 = ReplicaGeometry(6, (4,), 1, 0)
        p = ActionParams(0.2, 0.1)
        v = rng.standard_normal(g2.shape)
        assert action(v, g2, p) == pytest.approx(
            action(v.reshape(g1.shape), g1, p), rel=1e-13
        )

    def test_batch_matches_loop(self):
        rng = np.random.default_rng(15)
        g = ReplicaGeometry(4, (4, 3), 2, 2)
        p = ActionParams(0.18670475, 0.1)
        vb = rng.standard_normal((5,) + g.shape)
        out = action(vb, g, p)
        assert out.shape == (5,)
        for i in range(5):
            assert out[i] == pytest.approx(action(vb[i], g, p), rel=1e-13)


class TestCouplingTable:
    def test_width(self):
        assert coupling_width(ReplicaGeometry(4, (4,), 2, 1)) == 6
        assert coupling_width(ReplicaGeometry(4, (4, 4), 2, 1)) == 8

    def test_link_weight_conservation(self):
        # total coupling weight is 2*D per site for every cut and c
        for cut in range(5):
            g = ReplicaGeometry(4, (4,), 2, cut)
            cs = [None] if cut == 4 else [None, 0.0, 0.37, 1.0]
            for c in cs:
                _, wgt = coupling_table(g, c)
                assert wgt.sum() == pytest.approx(2 * g.D * g.n_sites, abs=1e-9)

    def test_symmetry_of_couplings(self):
        # b is generated by a symmetric matrix: M[i,j] == M[j,i]
        g = ReplicaGeometry(4, (4,), 2, 2)
        idx, wgt = coupling_table(g, 0.4)
        V = g.n_sites
        M = np.zeros((V, V))
        for s in range(V):
            for k in range(idx.shape[1]):
                M[s, idx[s, k]] += wgt[s, k]
        assert np.array_equal(M, M.T)

    def test_small_extent_duplicate_merge(self):
        # T = 2 gives doubled temporal couplings, merged into one slot
        g = ReplicaGeometry(2, (2,), 2, 1)
        idx, wgt = coupling_table(g)
        assert wgt.sum() == pytest.approx(2 * g.D * g.n_sites, abs=1e-12)
        assert (wgt == 2.0).any()

    def test_interpolated_neighbor_sum_mixes_targets(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        v = np.zeros(g.shape)
        v[0, 0, 1] = 2.0
        v[1, 0, 1] = 4.0
        b = neighbor_sum(v, g, c=0.25)
        s = g.site_index(0, g.T - 1, 1)
        assert b.reshape(-1)[s] == pytest.approx(0.75 * 2.0 + 0.25 * 4.0, rel=1e-15)


class TestDerivatives:
    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(16)
        g = ReplicaGeometry(4, (4, 3), 2, 2)
        p = ActionParams(0.18670475, 0.1)
        v = rng.standard_normal(g.shape)
        grad = action_gradient(v, g, p, c=0.4)
        eps = 1e-6
        for _ in range(12):
            i = tuple(rng.integers(0, s) for s in g.shape)
            vp, vm = v.copy(), v.copy()
            vp[i] += eps
            vm[i] -= eps
            fd = (
                interpolated_action(vp, g, p, 0.4)
                - interpolated_action(vm, g, p, 0.4)
            ) / (2 * eps)
            assert grad[i] == pytest.approx(fd, rel=5e-8, abs=1e-8)

    def test_local_delta_matches_full_difference(self):
        rng = np.random.default_rng(17)
        g = ReplicaGeometry(4, (4,), 2, 2)
        p = ActionParams(0.25, 0.03)
        v = rng.standard_normal(g.shape)
        flat = v.reshape(-1)
        for _ in range(12):
            s = int(rng.integers(0, g.n_sites))
            nv = float(rng.standard_normal())
            d = local_action_delta(flat, g, p, s, nv)
            f2 = flat.copy()
            f2[s] = nv
            full = action(f2.reshape(g.shape), g, p) - action(v, g, p)
            assert d == pytest.approx(full, rel=1e-10, abs=1e-10)
        assert local_action_delta(flat, g, p, 3, float(flat[3])) == 0.0

    def test_local_delta_decoupled(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        p = ActionParams(0.0, 0.1)
        flat = np.full(g.n_sites, 0.7)
        d = local_action_delta(flat, g, p, 5, 1.3)
        want = (1 - 2 * p.lam) * (1.3**2 - 0.7**2) + p.lam * (1.3**4 - 0.7**4)
        assert d == pytest.approx(want, rel=1e-14)

    def test_defect_column_bilinear_is_dS_dc(self):
        rng = np.random.default_rng(18)
        g = ReplicaGeometry(4, (4,), 2, 2)
        p = ActionParams(0.2758297, 0.03)
        v = rng.standard_normal(g.shape)
        s0, s1 = interpolated_action(v, g, p, 0.0), interpolated_action(v, g, p, 1.0)
        assert s1 - s0 == pytest.approx(
            -2.0 * p.kappa * defect_column_bilinear(v, g), rel=1e-12
        )


class TestInvariances:
    @given(st.integers(0, 2**32 - 1), st.integers(0, 4))
    @settings(max_examples=20, deadline=None)
    def test_z2_symmetry_exact(self, seed, cut):
        g = ReplicaGeometry(4, (4,), 2, cut)
        p = ActionParams(0.2758297, 0.03)
        v = np.random.default_rng(seed).standard_normal(g.shape)
        assert action(-v, g, p) == action(v, g, p)
        if cut < 4:
            assert interpolated_action(-v, g, p, 0.6) == interpolated_action(
                v, g, p, 0.6
            )

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    @settings(max_examples=15, deadline=None)
    def test_transverse_translation_invariance(self, seed, shift):
        g = ReplicaGeometry(3, (4, 4), 2, 2)
        p = ActionParams(0.18670475, 0.1)
        v = np.random.default_rng(seed).standard_normal(g.shape)
        rolled = np.roll(v, shift, axis=3)
        assert action(rolled, g, p) == pytest.approx(action(v, g, p), rel=1e-12)

    @given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_affine_in_c(self, c, seed):
        g = ReplicaGeometry(4, (4,), 2, 1)
        p = ActionParams(0.25, 0.03)
        v = np.random.default_rng(seed).standard_normal(g.shape)
        s0 = interpolated_action(v, g, p, 0.0)
        s1 = interpolated_action(v, g, p, 1.0)
        sc = interpolated_action(v, g, p, c)
        assert sc == pytest.approx((1 - c) * s0 + c * s1, rel=1e-12, abs=1e-12)


class TestFieldConfig:
    def test_cold_is_zero(self):
        g = ReplicaGeometry(4, (4,), 2, 1)
        f = FieldConfig.cold(g)
        assert f.values.shape == g.shape
        assert np.all(f.values == 0.0)

    def test_flat_order_is_raster(self):
        g = ReplicaGeometry(2, (2,), 2, 1)
        v = np.arange(8.0).reshape(g.shape)
        f = FieldConfig(g, v)
        flat = f.flat()
        for r, site in g.sites():
            assert flat[g.site_index(r, *site)] == v[(r,) + site]
