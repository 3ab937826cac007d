import math

import numpy as np
import pytest

from fedcal.aggregation import AggregationConfig
from fedcal.data import Dataset, make_blobs
from fedcal.distillation import DistillConfig
from fedcal.federation import (
    FederatedDataset,
    InProcessTransport,
    PartitionSpec,
    class_histogram_tv,
    fedavg_aggregate,
    heterogeneous_shards,
    partition,
    run_one_shot,
    sample_clients,
)
from fedcal.nn import MlpConfig, PriorSpec
from fedcal.sampling import OptimizerConfig, PosteriorSampleSet, SamplerConfig


def all_indices(fed):
    return np.concatenate([*fed.shard_indices, fed.server_indices, fed.test_indices])


class TestClassificationPartition:
    @pytest.mark.parametrize("h", [0.0, 0.3, 0.9, 1.0])
    def test_is_a_partition(self, h):
        ds = make_blobs(1003, n_classes=4, seed=1)
        fed = partition(ds, PartitionSpec(5, h, seed=2))
        idx = all_indices(fed)
        assert len(idx) == len(ds)
        assert np.array_equal(np.sort(idx), np.arange(len(ds)))
        assert max(fed.shard_sizes) - min(fed.shard_sizes) <= 1
        assert fed.shard_sizes == sorted(fed.shard_sizes, reverse=True)

    def test_server_and_test_fractions(self):
        ds = make_blobs(1000, seed=0)
        fed = partition(ds, PartitionSpec(5, 0.0, server_fraction=0.2, test_fraction=0.2))
        assert len(fed.test_set) == 200
        assert len(fed.server_set) == 160

    def test_homogeneous_matches_global_histogram(self):
        ds = make_blobs(5000, n_classes=4, seed=3)
        fed = partition(ds, PartitionSpec(4, 0.0, server_fraction=0.0, test_fraction=0.2))
        assert min(fed.shard_sizes) == 1000
        assert class_histogram_tv(fed, 4) < 0.05

    def test_fully_heterogeneous_is_label_sorted(self):
        ds = make_blobs(2000, n_classes=4, seed=4)
        fed = partition(ds, PartitionSpec(5, 1.0, seed=4))
        for a, b in zip(fed.shards, fed.shards[1:]):
            assert a.y.max() <= b.y.min()

    def test_h_half_two_clients(self):
        labels = np.repeat([0, 1], 50)
        shards = heterogeneous_shards(labels, 2, 0.5, np.random.default_rng(0))
        assert [len(s) for s in shards] == [50, 50]
        # the 25 replacement rows of client 0 are the low half of the label-sorted pool
        assert np.sum(labels[shards[0]] == 0) >= 25
        assert np.sum(labels[shards[1]] == 1) >= 25
        assert np.array_equal(np.sort(np.concatenate(shards)), np.arange(100))

    def test_h_monotonicity(self):
        ds = make_blobs(2000, n_classes=4, seed=5)
        tvs = [class_histogram_tv(partition(ds, PartitionSpec(5, h, seed=7)), 4) for h in (0, 0.3, 0.6, 0.9)]
        assert all(a <= b for a, b in zip(tvs, tvs[1:]))

    def test_too_few_examples(self):
        with pytest.raises(ValueError):
            heterogeneous_shards(np.array([0, 1]), 3, 0.5, np.random.default_rng(0))

    def test_deterministic(self):
        ds = make_blobs(500, seed=0)
        a, b = (partition(ds, PartitionSpec(5, 0.6, seed=11)) for _ in range(2))
        assert np.array_equal(all_indices(a), all_indices(b))

    @pytest.mark.parametrize("kwargs", [dict(n_clients=1), dict(h=1.5), dict(mode="dirichlet")])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            PartitionSpec(**kwargs)


class TestRegressionPartition:
    def spec(self, **kw):
        return PartitionSpec(mode="regression-sorted", server_fraction=0.0, test_fraction=0.0, **kw)

    def test_sorted_contiguous(self):
        x = np.random.default_rng(0).permutation(100).astype(float)
        fed = partition(Dataset(x[:, None], x * 2), self.spec(n_clients=2, sort_feature=0))
        assert fed.shards[0].X[:, 0].max() < fed.shards[1].X[:, 0].min()

    def test_equal_sizes(self):
        fed = partition(Dataset(np.random.default_rng(1).standard_normal((1000, 3)), np.zeros(1000)),
                        self.spec(n_clients=5, sort_feature=2))
        assert fed.shard_sizes == [200] * 5

    def test_constant_feature_keeps_original_order(self):
        fed = partition(Dataset(np.zeros((10, 1)), np.arange(10.0)), self.spec(n_clients=3))
        assert np.array_equal(np.concatenate(fed.shard_indices), np.arange(10))
        assert fed.shard_sizes == [4, 3, 3]

    def test_invalid_feature(self):
        with pytest.raises(ValueError):
            partition(Dataset(np.zeros((10, 2)), np.zeros(10)), self.spec(n_clients=2, sort_feature=2))


class TestFedAvg:
    def test_examples(self):
        np.testing.assert_allclose(fedavg_aggregate([[0.0], [1.0]], [1, 3]), [0.75])
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(fedavg_aggregate([v, v, v], [5, 1, 2]), v)
        a = fedavg_aggregate([[1.0, 2.0], [3.0, 5.0], [0.0, 1.0]], [2, 3, 5])
        b = fedavg_aggregate([[0.0, 1.0], [1.0, 2.0], [3.0, 5.0]], [5, 2, 3])
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            fedavg_aggregate([[0.0], [1.0, 2.0]], [1, 1])
        with pytest.raises(ValueError):
            fedavg_aggregate([[0.0], [1.0]], [1, 0])


class TestTransport:
    def test_round_trip_and_counters(self):
        t = InProcessTransport()
        s = PosteriorSampleSet([np.arange(3.0), np.ones(3)], 4, "abc", 9)
        t.submit(4, s)
        (back,) = t.collect()
        assert back.client_id == 4 and back.fingerprint == "abc"
        np.testing.assert_array_equal(back.as_array(), s.as_array())
        assert t.messages == 1 and t.bytes_sent > 48
        with pytest.raises(RuntimeError):
            t.submit(4, s)


SMALL_SAMPLER = SamplerConfig(2, 6, 2, 3, 0.05, 1.0, 50, seed=0, temperature_mode="inverse-n")


@pytest.fixture(scope="module")
def small_fed():
    return partition(make_blobs(600, n_classes=3, seed=0), PartitionSpec(3, 0.5, seed=0))


class TestOneShot:
    def test_smoke_and_single_communication(self, small_fed):
        model = MlpConfig(2, (16,), 3)
        res = run_one_shot(small_fed, model, SMALL_SAMPLER, AggregationConfig("beta"),
                           DistillConfig(5, OptimizerConfig("adam", 5e-3)),
                           fedavg_optimizer=OptimizerConfig("sgdm", 0.01))
        assert res.transport_messages == 3
        assert res.sample_counts == [3, 3, 3]
        assert 0.0 <= res.beta <= 1.0
        for key in ("teacher", "student"):
            assert all(math.isfinite(v) for v in res.metrics[key].values())
        assert set(res.metrics["baselines"]) == {"mixture", "product", "fedavg"}

    def test_mixture_mode_has_no_beta(self, small_fed):
        res = run_one_shot(small_fed, MlpConfig(2, (16,), 3), SMALL_SAMPLER,
                           AggregationConfig("mixture", tune=False), None)
        assert res.beta is None and "beta" not in res.to_dict()
        assert res.metrics["teacher"] == res.metrics["baselines"]["mixture"]

    def test_single_client_modes_coincide(self, small_fed):
        one = FederatedDataset([small_fed.shards[0]], small_fed.server_set, small_fed.test_set)
        model = MlpConfig(2, (16,), 3)
        res = run_one_shot(one, model, SMALL_SAMPLER, AggregationConfig("beta"), None)
        t = res.metrics["teacher"]["nll"]
        assert res.metrics["baselines"]["mixture"]["nll"] == pytest.approx(t, abs=1e-12)
        assert res.metrics["baselines"]["product"]["nll"] == pytest.approx(t, abs=1e-12)

    def test_parallel_clients_match_serial(self, small_fed):
        model = MlpConfig(2, (8,), 3)
        runs = []
        for workers in (1, 3):
            t = InProcessTransport()
            sample_clients(small_fed, model, PriorSpec(), SMALL_SAMPLER, t, workers=workers)
            runs.append(np.concatenate([s.as_array().ravel() for s in t.collect()]))
        assert runs[0].tobytes() == runs[1].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_client_errors_are_attributed(self, small_fed):
        bad = SamplerConfig(2, 400, 1, 2, 1e6, 1.0, 50)
        with pytest.raises(RuntimeError, match="client 0"):
            sample_clients(small_fed, MlpConfig(2, (8,), 3, "categorical"), PriorSpec(), bad,
                           InProcessTransport())
