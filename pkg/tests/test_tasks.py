import itertools
import math
import struct

import numpy as np
import pytest

from spanlab.tasks import (
    Dataset,
    FlowGraph,
    IdxFormatError,
    SetInstance,
    TaskError,
    edmonds_karp_maxflow,
    gen_biased_maxdigit,
    gen_flow_dataset,
    gen_flowgraph,
    gen_kary_distance,
    gen_percentile,
    gen_spiked,
    load_dataset,
    load_mnist_idx,
    oracle_kary,
    oracle_maxflow,
    oracle_percentile,
    oracle_top_eigvec,
    oracle_verify,
    power_iteration,
    save_dataset,
    synthetic_digits,
)


def naive_kary(x, k):
    """Independent reimplementation: plain python loops over subsets."""
    best = -math.inf
    for combo in itertools.combinations(range(len(x)), k):
        total = 0.0
        for i, j in itertools.combinations(combo, 2):
            total += math.dist(x[i], x[j])
        best = max(best, total)
    return best


class TestKaryOracle:
    def test_three_points_pair(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        assert oracle_kary(x, 2) == 5.0

    def test_k3_single_subset(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        expected = 5.0 + math.sqrt(2.0) + math.sqrt(13.0)
        assert oracle_kary(x, 3) == pytest.approx(expected, abs=1e-12)

    def test_matches_naive_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            n = int(rng.integers(3, 11))
            k = int(rng.integers(2, 4))
            x = rng.normal(size=(n, 2)) * 5.0
            assert oracle_kary(x, k) == pytest.approx(naive_kary(x, k), abs=1e-12)

    def test_permutation_invariant_exactly(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 3)) * 4.0
        for k in (2, 3):
            ref = oracle_kary(x, k)
            for _ in range(10):
                assert oracle_kary(x[rng.permutation(8)], k) == ref

    def test_parameter_validation(self):
        with pytest.raises(TaskError):
            oracle_kary(np.zeros((5, 2)), 4)
        with pytest.raises(TaskError):
            oracle_kary(np.zeros((2, 2)), 3)


class TestKaryGenerator:
    def test_labels_nonnegative(self):
        ds = gen_kary_distance(n=8, d=2, k=2, count=20, seed=3)
        assert all(inst.label[0] >= 0.0 for inst in ds.instances)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(a, gen_kary_distance(6, 2, 2, 10, seed=9))
        save_dataset(b, gen_kary_distance(6, 2, 2, 10, seed=9))
        assert a.read_bytes() == b.read_bytes()

    def test_labels_match_oracle(self):
        ds = gen_kary_distance(n=7, d=3, k=3, count=15, seed=4)
        assert oracle_verify(ds) == []


class TestPercentile:
    def test_median_of_permutation(self):
        x = np.arange(1.0, 101.0)
        np.random.default_rng(0).shuffle(x)
        assert oracle_percentile(x, 50) == 50.0

    def test_constant_set(self):
        for r in (1, 37.5, 100):
            assert oracle_percentile(np.array([7.0, 7.0, 7.0]), r) == 7.0

    def test_against_sort_and_index(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n = int(rng.integers(5, 120))
            values = rng.integers(1, 100, size=n).astype(float)
            r = float(rng.uniform(1, 100))
            srt = sorted(values)
            expect = srt[math.ceil(r * n / 100) - 1]
            assert oracle_percentile(values, r) == expect

    def test_empty_set_rejected(self):
        with pytest.raises(TaskError):
            oracle_percentile(np.array([]), 50)

    def test_generator_matches_oracle(self):
        ds = gen_percentile(n=20, r=70, count=25, seed=6)
        assert oracle_verify(ds) == []
        assert ds.header["value_range"] == [1, 20]
        values = ds.instances[0].elements
        assert values.shape == (20, 1)
        assert np.all(values == np.round(values))
        assert values.min() >= 1 and values.max() <= 20


class TestMaxFlow:
    def test_single_edge(self):
        g = FlowGraph(vertices=2, edges=[(1, 0, 5)], sink=0)
        assert oracle_maxflow(g, [1]) == 5
        assert edmonds_karp_maxflow(g, [1]) == 5

    def test_empty_subset(self):
        g = FlowGraph(vertices=2, edges=[(1, 0, 5)], sink=0)
        assert oracle_maxflow(g, []) == 0

    def test_sink_in_subset_rejected(self):
        g = FlowGraph(vertices=2, edges=[(1, 0, 5)], sink=0)
        with pytest.raises(TaskError):
            oracle_maxflow(g, [0])

    def test_isolated_source_contributes_single_path(self):
        # vertex 3 has one outgoing edge, capacity 4, straight to the sink
        g = FlowGraph(
            vertices=4,
            edges=[(1, 0, 10), (2, 1, 3), (3, 0, 4)],
            sink=0,
        )
        assert oracle_maxflow(g, [3]) == 4
        assert oracle_maxflow(g, [2, 3]) == 3 + 4

    def test_dfs_equals_bfs_on_random_graphs(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            g = gen_flowgraph(20, 60, seed=trial)
            subset = rng.choice(np.arange(1, 20), size=3, replace=False)
            assert oracle_maxflow(g, subset) == edmonds_karp_maxflow(g, subset)

    def test_subset_order_irrelevant(self):
        g = gen_flowgraph(15, 40, seed=8)
        assert oracle_maxflow(g, [3, 7, 11]) == oracle_maxflow(g, [11, 3, 7])

    def test_graph_generator_properties(self):
        g = gen_flowgraph(30, 90, cap_range=(1, 20), seed=9)
        assert len(g.edges) == 90
        caps = [c for _, _, c in g.edges]
        assert min(caps) >= 1 and max(caps) <= 20
        # every vertex reaches the sink
        for v in range(1, 30):
            assert oracle_maxflow(g, [v]) > 0

    def test_dataset_round_trip_verifies(self, tmp_path):
        g = gen_flowgraph(12, 30, seed=10)
        ds = gen_flow_dataset(g, subset_size=3, count=10, seed=11)
        assert oracle_verify(ds) == []
        path = tmp_path / "flow.jsonl"
        save_dataset(path, ds)
        assert oracle_verify(load_dataset(path)) == []

    @pytest.mark.slow
    def test_paper_scale_label_range(self):
        g = gen_flowgraph(100, 300, cap_range=(1, 20), seed=12)
        ds = gen_flow_dataset(g, subset_size=3, count=60, seed=13)
        labels = np.array([inst.label[0] for inst in ds.instances])
        # loose distributional check around the reported range
        assert labels.min() >= 3 and labels.max() <= 130
        assert 10 <= np.median(labels) <= 90


class TestSpiked:
    def test_power_iteration_diagonal(self):
        vec = power_iteration(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(vec, [1.0, 0.0], atol=1e-10)

    def test_sigma_zero_exact_recovery(self):
        ds = gen_spiked(n=20, d=5, sigma=0.0, count=5, seed=14)
        for inst in ds.instances:
            est = oracle_top_eigvec(inst.elements)
            cos = abs(est @ inst.label)
            assert cos == pytest.approx(1.0, abs=1e-10)

    def test_alignment_over_seeds(self):
        for seed in range(50):
            ds = gen_spiked(n=100, d=10, sigma=0.1, count=1, seed=seed)
            inst = ds.instances[0]
            est = oracle_top_eigvec(inst.elements)
            cos = abs(est @ inst.label) / (
                np.linalg.norm(est) * np.linalg.norm(inst.label)
            )
            assert cos >= 0.99

    def test_labels_unit_norm_and_canonical(self):
        ds = gen_spiked(n=10, d=4, sigma=0.5, count=20, seed=15)
        for inst in ds.instances:
            assert np.linalg.norm(inst.label) == pytest.approx(1.0, abs=1e-12)
            nz = inst.label[inst.label != 0.0]
            assert nz[0] > 0.0

    def test_verify(self):
        ds = gen_spiked(n=60, d=8, sigma=0.1, count=5, seed=16)
        assert oracle_verify(ds) == []


def write_idx_pair(tmp_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(
        struct.pack(">IIII", 0x803, count, rows, cols) + images.tobytes()
    )
    lab_path.write_bytes(struct.pack(">II", 0x801, count) + labels.tobytes())
    return img_path, lab_path


class TestMnistIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        images = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
        labels = np.array([0, 1, 2, 3, 4], dtype=np.uint8)
        img_path, lab_path = write_idx_pair(tmp_path, images, labels)
        data, labs = load_mnist_idx(img_path, lab_path)
        assert data.shape == (5, 16)
        assert data.max() <= 1.0 and data.min() >= 0.0
        np.testing.assert_array_equal(labs, labels)
        np.testing.assert_allclose(data[2], images[2].reshape(-1) / 255.0)

    def test_bad_magic_rejected(self, tmp_path):
        img_path, lab_path = write_idx_pair(
            tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0]
        )
        raw = bytearray(img_path.read_bytes())
        raw[3] = 0x04  # magic 0x00000804
        img_path.write_bytes(bytes(raw))
        with pytest.raises(IdxFormatError):
            load_mnist_idx(img_path, lab_path)

    def test_truncated_rejected(self, tmp_path):
        img_path, lab_path = write_idx_pair(
            tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1]
        )
        img_path.write_bytes(img_path.read_bytes()[:-1])
        with pytest.raises(IdxFormatError):
            load_mnist_idx(img_path, lab_path)


class TestMaxDigit:
    def test_biased_places_max_last(self):
        images, labels = synthetic_digits(per_class=20, seed=18)
        ds = gen_biased_maxdigit(images, labels, set_size=4, count=50,
                                 seed=19, biased=True)
        for inst in ds.instances:
            assert inst.digits[-1] == max(inst.digits)
            assert inst.label[max(inst.digits)] == 1.0
            assert inst.label.sum() == 1.0
        assert oracle_verify(ds) == []

    def test_unbiased_max_position_uniform(self):
        images, labels = synthetic_digits(per_class=20, seed=18)
        ds = gen_biased_maxdigit(images, labels, set_size=4, count=10_000,
                                 seed=20, biased=False)
        positions = np.zeros(4)
        for inst in ds.instances:
            positions[inst.digits.index(max(inst.digits))] += 1
        expected = len(ds) / 4.0
        chi2 = float(np.sum((positions - expected) ** 2 / expected))
        # chi-square critical value for df=3 at p=0.001 is 16.27
        assert chi2 < 16.27

    def test_digits_distinct(self):
        images, labels = synthetic_digits(per_class=5, seed=21)
        ds = gen_biased_maxdigit(images, labels, set_size=6, count=30,
                                 seed=22, biased=False)
        for inst in ds.instances:
            assert len(set(inst.digits)) == 6

    def test_elements_match_digit_prototypes(self):
        images, labels = synthetic_digits(per_class=30, noise=0.05, seed=23)
        ds = gen_biased_maxdigit(images, labels, set_size=3, count=20,
                                 seed=24, biased=True)
        prototypes = synthetic_digits(per_class=1, noise=0.0, seed=23)[0]
        for inst in ds.instances:
            for row, digit in zip(inst.elements, inst.digits):
                dists = np.linalg.norm(prototypes - row, axis=1)
                assert int(np.argmin(dists)) == digit


class TestDatasetIO:
    def test_lossless_round_trip(self, tmp_path):
        ds = gen_kary_distance(5, 2, 2, 8, seed=25)
        path = tmp_path / "ds.jsonl"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.header == ds.header
        for a, b in zip(ds.instances, back.instances):
            assert a.elements.tobytes() == b.elements.tobytes()
            assert a.label.tobytes() == b.label.tobytes()

    def test_header_fields(self, tmp_path):
        ds = gen_percentile(10, 50, 3, seed=26)
        assert ds.header["task"] == "percentile"
        assert ds.header["n"] == 10
        assert ds.header["d"] == 1
        assert ds.header["L"] == 1
        assert ds.header["seed"] == 26

    def test_verify_catches_corruption(self, tmp_path):
        ds = gen_percentile(10, 50, 5, seed=27)
        ds.instances[2].label = ds.instances[2].label + 1.0
        failures = oracle_verify(ds)
        assert len(failures) == 1 and "record 2" in failures[0]
