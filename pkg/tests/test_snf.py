"""Stochastic-flow tests.

The two degeneration identities are checked bit for bit: zero nets must
reproduce the plain non-equilibrium work values on shared rng streams,
and a zero-step model must reproduce the deterministic-flow weights.
Free-field runs are held to the exact determinant oracle.
"""

import numpy as np
import pytest

from rflow.estimators import ess, log_ratio
from rflow.flow import FlowModel, build_flow_model, nf_weight
from rflow.heatbath import PriorPlan, generate_prior
from rflow.kernels import Stream
from rflow.lattice import ActionParams, FieldConfig, ReplicaGeometry
from rflow.oracle import gaussian_log_ratio
from rflow.protocol import (
    ProtocolSchedule,
    evolve_forward,
    jarzynski_batch,
    work_values,
)
from rflow.snf import SnfModel, snf_batch, snf_evolve

FREE = ActionParams(kappa=0.2, lam=0.0)


def free_prior(geometry, count, seed, stride=6, thermalization=150):
    plan = PriorPlan(thermalization=thermalization, count=count, stride=stride)
    return list(generate_prior(plan, FREE, geometry, seed, start="hot"))


def randomize_model(model, rng, scale=0.05):
    model.set_weights(
        [rng.normal(scale=scale, size=w.shape) for w in model.parameters()]
    )


def build_snf(geometry, n_step, seed=0, hidden=(4,), patch=(2, 3)):
    flow = build_flow_model(
        geometry, patch, max(n_step, 1), kind="dense", seed=seed, hidden=hidden
    )
    return SnfModel(flow, ProtocolSchedule.linear(n_step))


class TestValidation:
    def test_block_count_must_match_steps(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        flow = build_flow_model(geom, (2, 3), 3, seed=1)
        with pytest.raises(ValueError):
            SnfModel(flow, ProtocolSchedule.linear(4))

    def test_zero_step_needs_a_block(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        empty = FlowModel(geom, (2, 3), [])
        with pytest.raises(ValueError):
            SnfModel(empty, ProtocolSchedule.linear(0))

    def test_config_must_fit_geometry(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        model = build_snf(geom, 2)
        small = ReplicaGeometry(4, (6,), n_replicas=2, cut=2)
        cfg = FieldConfig.hot(small, Stream.from_seed(5, 0))
        with pytest.raises(ValueError):
            snf_evolve(cfg, model, FREE, Stream.from_seed(5, 1))


class TestDegenerations:
    def test_zero_nets_match_plain_protocol_bitwise(self):
        geom = ReplicaGeometry(12, (6,), n_replicas=2, cut=2)
        params = ActionParams(kappa=0.22, lam=0.05)
        plan = PriorPlan(thermalization=100, count=6, stride=5)
        configs = list(generate_prior(plan, params, geom, 31, start="hot"))
        model = build_snf(geom, 4, seed=3, hidden=(5,))
        snf_recs = snf_batch(configs, model, params, seed=77)
        plain_recs = jarzynski_batch(
            configs, ProtocolSchedule.linear(4), params, geom, seed=77
        )
        for a, b in zip(snf_recs, plain_recs):
            assert a.W == b.W
            assert a.Q == b.Q
            assert a.logJ == 0.0
            assert a.S_initial == b.S_initial
            assert a.S_final == b.S_final

    def test_zero_nets_match_final_field_bitwise(self):
        geom = ReplicaGeometry(12, (6,), n_replicas=2, cut=2)
        params = ActionParams(kappa=0.22, lam=0.05)
        plan = PriorPlan(thermalization=80, count=1, stride=1)
        (cfg,) = generate_prior(plan, params, geom, 13, start="hot")
        model = build_snf(geom, 3, seed=9)
        f_snf, _ = snf_evolve(cfg, model, params, Stream.from_seed(55, 0))
        f_plain, _ = evolve_forward(
            cfg, ProtocolSchedule.linear(3), params, geom, Stream.from_seed(55, 0)
        )
        assert np.array_equal(f_snf.values, f_plain.values)

    def test_zero_step_matches_deterministic_flow_bitwise(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        params = ActionParams(kappa=0.21, lam=0.04)
        flow = build_flow_model(geom, (2, 3), 2, seed=11, hidden=(6,))
        randomize_model(flow, np.random.default_rng(40), scale=0.3)
        model = SnfModel(flow, ProtocolSchedule.linear(0))
        cfg = FieldConfig.hot(geom, Stream.from_seed(12, 0))
        out, logw = nf_weight(flow, cfg.values.reshape(-1), params)
        field, rec = snf_evolve(cfg, model, params, Stream.from_seed(12, 1))
        assert rec.W == -logw
        assert rec.Q == 0.0
        assert rec.logJ != 0.0
        assert np.array_equal(field.values.reshape(-1), out)

    def test_zero_step_stream_is_never_consumed(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        flow = build_flow_model(geom, (2, 3), 1, seed=2)
        model = SnfModel(flow, ProtocolSchedule.linear(0))
        cfg = FieldConfig.hot(geom, Stream.from_seed(3, 0))
        stream = Stream.from_seed(3, 1)
        probe = Stream.from_seed(3, 1)
        snf_evolve(cfg, model, FREE, stream)
        assert stream.uniform() == probe.uniform()


class TestBookkeeping:
    def test_identity_holds_with_random_nets(self):
        geom = ReplicaGeometry(12, (6,), n_replicas=2, cut=2)
        params = ActionParams(kappa=0.22, lam=0.05)
        plan = PriorPlan(thermalization=100, count=4, stride=5)
        configs = list(generate_prior(plan, params, geom, 17, start="hot"))
        model = build_snf(geom, 3, seed=5, hidden=(6,))
        randomize_model(model.flow, np.random.default_rng(23), scale=0.05)
        recs = snf_batch(configs, model, params, seed=88)
        for rec in recs:
            assert abs(rec.identity_gap()) < 1e-9
            assert rec.logJ != 0.0
            assert rec.Q != 0.0

    def test_batch_is_deterministic_and_chunkable(self):
        geom = ReplicaGeometry(8, (6,), n_replicas=2, cut=2)
        configs = free_prior(geom, 5, seed=61, thermalization=60)
        model = build_snf(geom, 2, seed=7)
        randomize_model(model.flow, np.random.default_rng(71), scale=0.05)
        whole = snf_batch(configs, model, FREE, seed=99)
        again = snf_batch(configs, model, FREE, seed=99)
        assert work_values(whole).tolist() == work_values(again).tolist()
        tail = snf_batch(configs[2:], model, FREE, seed=99, stream_offset=2)
        assert work_values(whole)[2:].tolist() == work_values(tail).tolist()
        assert [r.seed for r in tail] == [2, 3, 4]


class TestFreeFieldOracle:
    def setup_method(self):
        self.geom = ReplicaGeometry(16, (8,), n_replicas=2, cut=2)
        self.oracle = gaussian_log_ratio(
            self.geom, self.geom.with_cut(3), FREE.kappa
        )

    def test_random_snf_matches_determinant_oracle(self):
        configs = free_prior(self.geom, 600, seed=401)
        model = build_snf(self.geom, 5, seed=19, hidden=(6,))
        randomize_model(model.flow, np.random.default_rng(43), scale=0.05)
        recs = snf_batch(configs, model, FREE, seed=402)
        est = log_ratio(work_values(recs), method="snf")
        assert est.ess > 0.2  # estimator trustworthy at this sample size
        assert est.ln_ratio == pytest.approx(self.oracle, abs=3 * est.sigma)

    def test_deeper_evolution_gives_higher_ess(self):
        configs = free_prior(self.geom, 300, seed=403)
        shallow = build_snf(self.geom, 5, seed=21)
        deep = build_snf(self.geom, 10, seed=22)
        w5 = work_values(snf_batch(configs, shallow, FREE, seed=404))
        w10 = work_values(snf_batch(configs, deep, FREE, seed=404))
        assert ess(w10) > ess(w5)
