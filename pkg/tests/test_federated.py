import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsilo.federated import (
    CycleTrace, FedConfig, aggregate, aggregation_coefficients, coefficients_sum_error,
    local_spec, run_federated,
)
from fedsilo.isolation import IsolationAudit
from fedsilo.nn import LayerParams, Model, init_model
from fedsilo.training import TrainSpec, derive_seed, train

from conftest import clone_silo, toy_silos


def scalar_model(w):
    return Model((LayerParams(np.array([[float(w)]]), np.array([0.0]), "sigmoid"),))


def weight(m):
    return m.layers[0].weights[0, 0]


class TestAggregate:
    def test_zero_and_four(self):
        # 0.25 * 0 + 0.75 * 4
        assert weight(aggregate([scalar_model(0), scalar_model(4)], [1, 3])) == 3.0

    def test_one_and_three(self):
        assert weight(aggregate([scalar_model(1), scalar_model(3)], [1, 3])) == 2.5

    def test_single_model_passes_through(self):
        m = init_model([5, 3, 1], 0)
        assert aggregate([m], [17]).equals(m)

    @pytest.mark.parametrize("counts", [[1, 1, 1], [7, 13, 101, 3], [1, 999999]])
    def test_identical_models_fixed_point(self, counts):
        m = init_model([6, 4, 1], 3)
        assert aggregate([m.copy() for _ in counts], counts).equals(m)

    def test_matches_plain_weighted_sum(self):
        ms = [init_model([5, 3, 1], s) for s in range(4)]
        counts = [10, 20, 5, 65]
        out = aggregate(ms, counts)
        for k in range(2):
            ref = sum(n / 100 * m.layers[k].weights for n, m in zip(counts, ms))
            np.testing.assert_allclose(out.layers[k].weights, ref, rtol=0, atol=1e-15)

    def test_silo_id_order_not_argument_order(self):
        ms = [init_model([5, 3, 1], s) for s in range(3)]
        ids = ["c", "a", "b"]
        counts = [3, 5, 11]
        a = aggregate(ms, counts, ids)
        perm = [1, 2, 0]
        b = aggregate([ms[k] for k in perm], [counts[k] for k in perm], [ids[k] for k in perm])
        assert a.equals(b)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 10**6), min_size=1, max_size=60))
    def test_coefficients_sum_to_one(self, counts):
        assert coefficients_sum_error(counts) <= 1e-15
        assert all(c > 0 for c in aggregation_coefficients(counts))

    @settings(max_examples=25, deadline=None)
    @given(st.permutations(list(range(5))))
    def test_permutation_invariant(self, perm):
        ms = [init_model([4, 3, 1], s) for s in range(5)]
        ids = [f"s{k}" for k in range(5)]
        counts = [5, 9, 2, 40, 11]
        ref = aggregate(ms, counts, ids)
        out = aggregate([ms[k] for k in perm], [counts[k] for k in perm],
                        [ids[k] for k in perm])
        assert out.equals(ref)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate([], [])
        with pytest.raises(ValueError):
            aggregate([scalar_model(1)], [0])
        with pytest.raises(ValueError):
            aggregate([init_model([3, 1], 0), init_model([4, 1], 0)], [1, 1])


class TestRunFederated:
    cfg = dict(learning_rate=0.1, batch_size=16, lam=0.01, seed=4)

    def test_one_silo_reduces_to_plain_training(self):
        silo = toy_silos(n_silos=1)[0]
        init = init_model([6, 5, 1], 0)
        fed, trace = run_federated([silo], init, FedConfig(global_cycles=3, local_epochs=2,
                                                           **self.cfg))
        X, y = silo.part("train")
        spec = TrainSpec(epochs=6, batch_size=16, learning_rate=0.1, lam=0.01,
                         shuffle_seed=derive_seed(4, silo.silo_id))
        assert fed.equals(train(init, X, y, spec))
        assert len(trace) == 3

    def test_identical_silos_match_single_silo(self):
        silo = toy_silos(n_silos=1)[0]
        twin = clone_silo(silo, "zz_twin")
        init = init_model([6, 5, 1], 0)
        cfg = FedConfig(global_cycles=2, local_epochs=3, seed_by_silo=False, **self.cfg)
        both, _ = run_federated([silo, twin], init, cfg)
        alone, _ = run_federated([silo], init, cfg)
        assert both.equals(alone)

    def test_deterministic_and_thread_independent(self, silos5):
        init = init_model([6, 5, 1], 1)
        base = dict(global_cycles=2, local_epochs=2, **self.cfg)
        a, ta = run_federated(silos5, init, FedConfig(**base))
        b, tb = run_federated(silos5[::-1], init, FedConfig(n_jobs=4, **base))
        assert a.equals(b)
        assert [r.checksum for r in ta.records] == [r.checksum for r in tb.records]

    def test_no_cross_silo_reads(self, silos5):
        audit = IsolationAudit()
        _, trace = run_federated(silos5, init_model([6, 5, 1], 1),
                                 FedConfig(global_cycles=2, local_epochs=1, n_jobs=3,
                                           **self.cfg), audit)
        assert trace.cross_silo_accesses == 0
        assert audit.cross_silo_accesses == 0
        # each silo read only by itself, once per cycle
        assert set(audit.reads) == {(s.silo_id, s.silo_id) for s in silos5}

    def test_audit_catches_orchestrator_read(self, silos5):
        audit = IsolationAudit()
        with audit.run():
            silos5[0].part("train")
        with audit.local(silos5[1].silo_id):
            silos5[2].labels
        # part() reads features and labels
        assert audit.cross_silo_accesses == 3
        assert audit.reads[(None, silos5[0].silo_id)] == 2

    def test_local_spec_continues_epochs(self):
        cfg = FedConfig(local_epochs=5)
        assert local_spec(cfg, "a", 1).epoch_offset == 0
        assert local_spec(cfg, "a", 3).epoch_offset == 10
        assert local_spec(cfg, "a", 1).shuffle_seed != local_spec(cfg, "b", 1).shuffle_seed

    def test_trace_round_trip(self, silos5, tmp_path):
        _, trace = run_federated(silos5, init_model([6, 3, 1], 0),
                                 FedConfig(global_cycles=2, local_epochs=1, **self.cfg))
        trace.write_jsonl(tmp_path / "t.jsonl")
        back = CycleTrace.read_jsonl(tmp_path / "t.jsonl")
        assert [r.cycle for r in back.records] == [1, 2]
        assert back.records[1].silo_losses == trace.records[1].silo_losses
        assert back.records[1].checksum == trace.records[1].checksum

    def test_rejects_bad_input(self, silos5):
        init = init_model([6, 3, 1], 0)
        with pytest.raises(ValueError):
            run_federated([], init, FedConfig())
        with pytest.raises(ValueError):
            run_federated([silos5[0], clone_silo(silos5[1], silos5[0].silo_id)], init,
                          FedConfig())
        with pytest.raises(ValueError):
            run_federated(silos5, init_model([7, 3, 1], 0), FedConfig())

    @pytest.mark.parametrize("bad", [dict(global_cycles=0), dict(local_epochs=0),
                                     dict(aggregation_weighting="uniform"), dict(n_jobs=0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            FedConfig(**bad)
