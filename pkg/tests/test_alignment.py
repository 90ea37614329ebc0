import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import scatter_add_loop, score_dot_loop, score_l1_loop, score_matrix_loop
from siamese_sqa import alignment as al
from siamese_sqa.errors import EmptyInput, ShapeError, StateError


def test_score_l1_examples(rng):
    s = rng.normal(size=40)
    assert al.score_l1(s, s) == 0.0
    assert al.score_l1(np.ones(40), np.zeros(40)) == -1.0
    h = rng.normal(size=40)
    assert al.score_l1(s, h) == pytest.approx(score_l1_loop(s, h), abs=1e-12)


def test_score_dot_examples(rng):
    assert al.score_dot(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    s = rng.normal(size=40)
    assert al.score_dot(s, s) == pytest.approx(np.sum(s ** 2))
    h = rng.normal(size=40)
    assert al.score_dot(s, h) == pytest.approx(score_dot_loop(s, h), abs=1e-12)


def test_score_shape_errors():
    with pytest.raises(ShapeError):
        al.score_l1(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        al.score_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


def test_score_matrix_matches_loops(rng):
    deg, ref = rng.normal(size=(5, 40)), rng.normal(size=(7, 40))
    np.testing.assert_allclose(al.score_matrix(deg, ref, al.L1), score_matrix_loop(deg, ref, score_l1_loop),
                               atol=1e-12)
    np.testing.assert_allclose(al.score_matrix(deg, ref, al.DOT), score_matrix_loop(deg, ref, score_dot_loop),
                               atol=1e-12)
    one = al.score_matrix(deg[:1], ref[:1], al.L1)
    assert one.shape == (1, 1) and one[0, 0] == pytest.approx(al.score_l1(deg[0], ref[0]))


def test_self_alignment(rng):
    x = rng.normal(size=(30, 40))
    res, aligned = al.align_hard(x, x, al.L1)
    assert np.all(np.diag(res.scores) == 0) and np.all(res.scores <= 0)
    np.testing.assert_array_equal(res.path, np.arange(30))
    np.testing.assert_array_equal(aligned, x)


@pytest.mark.parametrize("k", [1, 5, 12])
def test_shifted_features_recover_shift(rng, k):
    ref = rng.normal(size=(50, 40))
    deg = np.concatenate([rng.normal(size=(k, 40)), ref[:50 - k]])  # deg[i] = ref[i - k]
    res, _ = al.align_hard(deg, ref, al.L1)
    np.testing.assert_array_equal(res.path[k:], np.arange(50 - k))


def test_constant_reference_ties_to_zero(rng):
    res, _ = al.align_hard(rng.normal(size=(6, 4)), np.ones((9, 4)), al.L1)
    assert not res.path.any()


def test_empty_input():
    with pytest.raises(EmptyInput):
        al.align_hard(np.zeros((0, 4)), np.zeros((3, 4)))


def test_backward_examples(rng):
    g = rng.normal(size=(6, 4))
    res = al.AlignmentResult(np.zeros((6, 6)), np.arange(6), al.L1)
    np.testing.assert_array_equal(al.alignment_backward(g, res), g)
    res0 = al.AlignmentResult(np.zeros((6, 3)), np.zeros(6, dtype=int), al.L1)
    out = al.alignment_backward(g, res0)
    np.testing.assert_allclose(out[0], g.sum(axis=0))
    assert not out[1:].any()
    path = rng.integers(0, 5, size=6)
    resr = al.AlignmentResult(np.zeros((6, 5)), path, al.L1)
    np.testing.assert_allclose(al.alignment_backward(g, resr), scatter_add_loop(g, path, 5), atol=1e-14)
    with pytest.raises(StateError):
        al.alignment_backward(g[:3], resr)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.data())
def test_path_is_rowwise_argmax(n, m, data):
    deg = data.draw(arrays(np.float64, (n, 3), elements=st.floats(-5, 5)))
    ref = data.draw(arrays(np.float64, (m, 3), elements=st.floats(-5, 5)))
    for method in (al.L1, al.DOT):
        res, aligned = al.align_hard(deg, ref, method)
        assert res.path.shape == (n,)
        assert np.all((0 <= res.path) & (res.path < m))
        for i in range(n):
            best = res.scores[i].max()
            assert res.scores[i, res.path[i]] == best
            assert np.all(res.scores[i, :res.path[i]] < best)  # first maximum
        np.testing.assert_array_equal(aligned, ref[res.path])
