import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from restrec.alignment import (
    AlignmentConfig,
    ClusterState,
    enhancement_weight,
    enhancement_weights,
    kmeans_update,
    nearest_centroid,
    project_attributes,
)
from restrec.data import ConfigError
from restrec.model import MLP


def straight_mlp(mlp, x):
    h = np.asarray(x, dtype=float)
    for k, (w, b) in enumerate(mlp.layers):
        h = np.array([sum(h[i] * w.value[i, j] for i in range(len(h))) + b.value[j] for j in range(w.shape[1])])
        if k < len(mlp.layers) - 1:
            h = np.maximum(h, 0)
    return h


class TestProjection:
    def make(self):
        return MLP((6, 6, 3), np.random.default_rng(0), "project")

    def test_zero_weights_gives_bias(self):
        mlp = self.make()
        for w, b in mlp.layers:
            w.value[:] = 0.0
        mlp.layers[-1][1].value[:] = [1.0, -2.0, 0.5]
        out = project_attributes(mlp, np.ones(3), np.ones(3)).value
        np.testing.assert_array_equal(out, [1.0, -2.0, 0.5])

    def test_zero_inputs_zero_bias(self):
        assert np.all(project_attributes(self.make(), np.zeros(3), np.zeros(3)).value == 0)

    def test_oracle(self):
        mlp = self.make()
        rng = np.random.default_rng(1)
        e_b, e_c = rng.normal(size=3), rng.normal(size=3)
        out = project_attributes(mlp, e_b, e_c).value
        np.testing.assert_allclose(out, straight_mlp(mlp, np.concatenate([e_b, e_c])), atol=1e-12)


class TestKMeans:
    def test_fixed_point(self):
        cents = np.array([[0.0, 0.0], [5.0, 5.0]])
        state = ClusterState.from_centroids(cents)
        new = kmeans_update(np.array([[0.0, 0.0], [5.0, 5.0], [5.0, 5.0]]), state)
        np.testing.assert_array_equal(new.centroids, cents)
        assert new.counts.tolist() == [1, 2]

    def test_running_mean_1d(self):
        state = ClusterState(np.array([[0.0]]), np.array([1]), 1)
        history = []
        for _ in range(50):
            state = kmeans_update(np.array([[0.0], [2.0]]), state)
            history.append(state.centroids[0, 0])
        # running mean of 0, 0, 2, 0, 2, ... equals (n-1)/n after each batch
        for n, c in enumerate(history, start=1):
            assert c == pytest.approx(2 * n / (2 * n + 1), abs=1e-12)
        assert abs(history[-1] - 1.0) < 0.02

    def test_two_blobs(self):
        rng = np.random.default_rng(0)
        means = np.array([[-4.0, 0.0], [4.0, 1.0]])
        state = ClusterState.empty(2, 2)
        state = kmeans_update(means + 0.01, state)  # seeds one row per blob
        for _ in range(100):
            lab = rng.integers(0, 2, 16)
            state = kmeans_update(means[lab] + rng.normal(0, 0.5, (16, 2)), state)
        for m in means:
            assert np.min(np.linalg.norm(state.centroids - m, axis=1)) < 0.1

    def test_seeding_skips_duplicates(self):
        state = kmeans_update(np.array([[1.0], [1.0], [2.0]]), ClusterState.empty(3, 1))
        assert state.n_filled == 2
        assert state.centroids[:2, 0].tolist() == [1.0, 2.0]

    def test_input_untouched(self):
        state = ClusterState.from_centroids([[0.0, 0.0]])
        kmeans_update(np.ones((3, 2)), state)
        assert state.centroids.tolist() == [[0.0, 0.0]] and state.counts.tolist() == [0]


class TestNearest:
    def test_exact_row(self):
        cents = np.random.default_rng(0).normal(size=(10, 3))
        assert nearest_centroid(cents[7], cents) == 7

    def test_tie_smallest(self):
        cents = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
        assert nearest_centroid([0.0, 0.0], cents[[2, 1, 2, 3]]) == 1

    def test_linear_scan(self):
        rng = np.random.default_rng(2)
        cents = rng.normal(size=(20, 4))
        for e in rng.normal(size=(30, 4)):
            d = [math.dist(e, c) for c in cents]
            assert nearest_centroid(e, cents) == d.index(min(d))


class TestWeight:
    def test_identical(self):
        r = np.array([0.3, -0.2, 0.9])
        assert enhancement_weight(r, r) == pytest.approx(0.0, abs=1e-7)

    def test_opposite(self):
        r = np.array([0.3, -0.2, 0.9])
        assert enhancement_weight(-r, r) == pytest.approx(1.0, abs=1e-7)

    def test_orthogonal(self):
        assert enhancement_weight([1.0, 0.0], [0.0, 2.0]) == 0.5

    def test_zero_vector(self):
        assert enhancement_weight(np.zeros(3), np.ones(3)) == 0.5

    @given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)))
    def test_range(self, e, r):
        assert 0.0 <= enhancement_weight(e, r) <= 1.0

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        state = ClusterState.from_centroids(rng.normal(size=(5, 4)))
        emb = rng.normal(size=(40, 4))
        w = enhancement_weights(emb, state)
        for e, a in zip(emb, w):
            r = state.centroids[nearest_centroid(e, state.centroids)]
            assert a == pytest.approx(enhancement_weight(e, r), abs=1e-12)

    def test_no_centroids(self):
        np.testing.assert_array_equal(enhancement_weights(np.ones((3, 2)), ClusterState.empty(4, 2)), 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        AlignmentConfig(n_clusters=0).validate()
    with pytest.raises(ConfigError):
        AlignmentConfig(epsilon=0.0).validate()
