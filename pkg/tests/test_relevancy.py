import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptpose.cloud import EmbeddedCloud
from promptpose.errors import ValidationError
from promptpose.ingest import QuerySet
from promptpose.relevancy import (colorize, compute_relevancy, cosine_relevancy, lerf_relevancy,
                                  relevancy_stats, RelevancyField)

from conftest import unit_rows


def cloud_of(emb):
    emb = np.atleast_2d(np.asarray(emb, dtype=float))
    return EmbeddedCloud(np.zeros((len(emb), 3)), embeddings=emb)


class TestCosine:
    def test_identical_and_orthogonal(self):
        q = QuerySet([1.0, 0, 0], [[0, 0, 1.0]])
        f = cosine_relevancy(cloud_of([[1.0, 0, 0], [0, 1.0, 0]]), q)
        assert f.scores.tolist() == [1.0, 0.0]

    def test_hand_dot_product(self):
        f = cosine_relevancy(cloud_of([[0.6, 0.8, 0]]), QuerySet([1.0, 0, 0], [[0, 0, 1.0]]))
        assert f.scores[0] == pytest.approx(0.6, abs=1e-15)

    def test_argmax_ignores_raw_row_scale(self, rng):
        raw = rng.normal(size=(50, 8))
        q = QuerySet(unit_rows(rng, 1, 8)[0], unit_rows(rng, 2, 8))
        a = cosine_relevancy(cloud_of(raw / np.linalg.norm(raw, axis=1, keepdims=True)), q)
        scaled = raw * rng.uniform(0.1, 10, size=(50, 1))
        b = cosine_relevancy(cloud_of(scaled / np.linalg.norm(scaled, axis=1, keepdims=True)), q)
        assert np.argmax(a.scores) == np.argmax(b.scores)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValidationError):
            cosine_relevancy(cloud_of(unit_rows(rng, 2, 4)), QuerySet(unit_rows(rng, 1, 3)[0], []))


class TestLerf:
    def test_tie_with_canonical_is_one_half(self):
        e = np.array([[1.0, 0, 0]])
        q = QuerySet([0.0, 1.0, 0], [[0.0, 0, 1.0]])  # e.q == e.c == 0
        assert lerf_relevancy(cloud_of(e), q).scores[0] == 0.5

    def test_scalar_evaluation(self):
        # e.q = 0.9 and e.c = -0.9
        s = np.sqrt(1 - 0.81)
        e = np.array([[0.9, s, 0]])
        f = lerf_relevancy(cloud_of(e), QuerySet([1.0, 0, 0], [[-1.0, 0, 0]]))
        assert f.scores[0] == pytest.approx(np.exp(0.9) / (np.exp(0.9) + np.exp(-0.9)), abs=1e-12)
        assert f.scores[0] == pytest.approx(0.858, abs=5e-4)

    def test_below_half_when_a_canonical_wins(self):
        e = np.array([[0.6, 0.8, 0]])
        f = lerf_relevancy(cloud_of(e), QuerySet([1.0, 0, 0], [[0, 0, 1.0], [0, 1.0, 0]]))
        assert f.scores[0] < 0.5

    def test_needs_canonicals(self):
        with pytest.raises(ValidationError):
            lerf_relevancy(cloud_of([[1.0, 0]]), QuerySet([1.0, 0], np.zeros((0, 2))))

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 12), st.integers(1, 5))
    def test_open_unit_interval_and_monotone(self, seed, d, k):
        rng = np.random.default_rng(seed)
        q = QuerySet(unit_rows(rng, 1, d)[0], unit_rows(rng, k, d))
        e = unit_rows(rng, 30, d)
        s = lerf_relevancy(cloud_of(e), q).scores
        assert np.all((s > 0) & (s < 1))
        # raising e.q with every e.c held fixed raises the score
        eq = e @ q.query
        ec = e @ q.canonicals.T
        bumped = 1.0 / (1.0 + np.exp(ec.max(axis=1) - (eq + 0.1)))
        assert np.all(bumped > s)

    def test_sigmoid_identity(self, rng):
        q = unit_rows(rng, 1, 6)[0]
        e = unit_rows(rng, 200, 6)
        s = lerf_relevancy(cloud_of(e), QuerySet(q, -q[None])).scores
        assert np.abs(s - 1.0 / (1.0 + np.exp(-2.0 * e @ q))).max() < 1e-12

    def test_compute_relevancy_dispatch(self, rng):
        c = cloud_of(unit_rows(rng, 3, 4))
        q = QuerySet(unit_rows(rng, 1, 4)[0], unit_rows(rng, 2, 4))
        assert compute_relevancy(c, q, "cosine").method == "cosine"
        with pytest.raises(ValidationError):
            compute_relevancy(c, q, "softmax")


class TestStats:
    def test_constant_field(self):
        st_ = relevancy_stats(RelevancyField(np.full(10, 0.7), "lerf"))
        assert st_.min == st_.max == pytest.approx(0.7)
        assert st_.mean == pytest.approx(0.7)
        assert sorted(st_.counts.tolist())[-1] == 10 and st_.counts.sum() == 10

    def test_binary_field_mean(self):
        assert relevancy_stats(RelevancyField(np.array([0.0, 1.0]), "lerf")).mean == 0.5

    def test_histogram_conserves_count(self, rng):
        st_ = relevancy_stats(RelevancyField(rng.uniform(size=10000), "cosine"))
        assert len(st_.counts) == 20 and st_.counts.sum() == 10000

    def test_colorize_red_channel(self):
        c = EmbeddedCloud(np.zeros((3, 3)))
        out = colorize(c, RelevancyField(np.array([0.2, 0.6, 1.0]), "lerf"))
        assert out.colors[:, 0].tolist() == [0.2, 0.6, 1.0]
        assert not out.colors[:, 1:].any()
        assert out.relevancy.tolist() == [0.2, 0.6, 1.0]
        cos = colorize(c, RelevancyField(np.array([-1.0, 0.0, 1.0]), "cosine"))
        assert cos.colors[:, 0].tolist() == [0.0, 0.5, 1.0]
