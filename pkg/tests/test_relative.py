from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_clamped
from sheafpc.experiments import KnottedSpec, feedback_id, make_chain, make_knotted
from sheafpc.relative import (
    clamp,
    diffusive_operator,
    harmonic_projector,
    hodge_decompose,
    laplacian_operator,
    solve_inference,
)
from sheafpc.sheaf import SheafError, ShapeError, assemble_coboundary

seeds = st.integers(0, 2**32 - 1)


def _exact_small_solution():
    """Normal equations of the (2, 1, 1) chain with x = 1, y = 5, in rationals."""
    # D^T D = [[2, -1], [-1, 2]], D^T b = (-2, -5); solve D^T D z = -D^T b
    a, b_, c, d = map(Fraction, (2, -1, -1, 2))
    rhs = (Fraction(2), Fraction(5))
    det = a * d - b_ * c
    return ((d * rhs[0] - b_ * rhs[1]) / det, (-c * rhs[0] + a * rhs[1]) / det)


def test_small_system_layout(small_rel):
    np.testing.assert_array_equal(small_rel.D, [[1, 0], [-1, 1], [0, -1]])
    np.testing.assert_array_equal(small_rel.b, [-2, 0, 5])
    assert small_rel.free == ("h1", "h2")
    assert small_rel.clamped == ("x", "y")


def test_small_system_solution(small_rel):
    sol = solve_inference(small_rel)
    z_exact = [float(v) for v in _exact_small_solution()]
    np.testing.assert_allclose(sol.z_star, z_exact, atol=1e-12)
    np.testing.assert_allclose(sol.z_star, [3, 4], atol=1e-12)
    np.testing.assert_allclose(sol.r_star, [1, 1, 1], atol=1e-12)
    assert sol.energy_rel == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(sol.s_star, [1, 3, 4, 5], atol=1e-12)


def test_small_hodge_split(small_rel):
    im_part, harm = hodge_decompose(small_rel)
    np.testing.assert_allclose(im_part, [-3, -1, 4], atol=1e-12)
    np.testing.assert_allclose(harm, [1, 1, 1], atol=1e-12)
    assert abs(im_part @ harm) < 1e-12
    np.testing.assert_allclose(harmonic_projector(small_rel) @ small_rel.b, harm, atol=1e-12)
    np.testing.assert_allclose(-diffusive_operator(small_rel) @ small_rel.b, [3, 4], atol=1e-12)


def test_three_layer_layout():
    rng = np.random.default_rng(0)
    W1, W2, W3 = (rng.standard_normal((3, 2)), rng.standard_normal((4, 3)), rng.standard_normal((2, 4)))
    sheaf = make_chain([2, 3, 4, 2], [W1, W2, W3])
    x, y = rng.standard_normal(2), rng.standard_normal(2)
    rel = clamp(sheaf, {"x": x, "y": y})
    expected_D = np.zeros((9, 7))
    expected_D[0:3, 0:3] = np.eye(3)
    expected_D[3:7, 0:3] = -W2
    expected_D[3:7, 3:7] = np.eye(4)
    expected_D[7:9, 3:7] = -W3
    np.testing.assert_allclose(rel.D, expected_D)
    np.testing.assert_allclose(rel.b, np.concatenate([-W1 @ x, np.zeros(4), y]))


def test_knotted_feedback_layout():
    sheaf = make_knotted(KnottedSpec(layers=3, theta=0.4, seed=1))
    rel = clamp(sheaf, {"x": np.ones(2), "y": np.ones(2)})
    fb = rel.edge_slice(feedback_id(1))
    W = sheaf.edge(feedback_id(1)).weight
    # feedback edge h2 -> h1: -W on h2's columns, +I on h1's
    np.testing.assert_allclose(rel.D[fb, rel.free_slice("h2")], -W)
    np.testing.assert_allclose(rel.D[fb, rel.free_slice("h1")], np.eye(2))
    np.testing.assert_array_equal(rel.b[fb], 0)


def test_clamping_everything_but_one():
    sheaf = make_chain([1, 1, 1, 1], [2.0, 1.0, 1.0])
    rel = clamp(sheaf, {"x": [1.0], "h1": [2.0], "y": [5.0]})
    assert rel.free == ("h2",)
    sol = solve_inference(rel)
    # h2 sits between W h1 = 2 and y = 5
    np.testing.assert_allclose(sol.z_star, [3.5])


def test_empty_clamp_is_full_system():
    sheaf = make_chain([1, 1, 1], [2.0, 3.0])
    rel = clamp(sheaf, {})
    np.testing.assert_array_equal(rel.D, assemble_coboundary(sheaf))
    np.testing.assert_array_equal(rel.b, 0)
    np.testing.assert_allclose(solve_inference(rel).z_star, 0)


def test_clamp_errors():
    sheaf = make_chain([2, 2], [np.eye(2)])
    with pytest.raises(SheafError):
        clamp(sheaf, {"nope": [1.0, 2.0]})
    with pytest.raises(ShapeError):
        clamp(sheaf, {"x": [1.0, 2.0, 3.0]})
    rel = clamp(sheaf, {"x": [1.0, 2.0]})
    with pytest.raises(SheafError):
        rel.free_slice("x")


def test_batch_solve_matches_columns():
    rng = np.random.default_rng(4)
    sheaf = make_chain([2, 3, 2], [rng.standard_normal((3, 2)), rng.standard_normal((2, 3))])
    X, Y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    rel = clamp(sheaf, {"x": X, "y": Y})
    batch = solve_inference(rel)
    for i in range(5):
        one = solve_inference(clamp(sheaf, {"x": X[i], "y": Y[i]}))
        np.testing.assert_allclose(batch.z_star[:, i], one.z_star, atol=1e-12)
        assert batch.energy_rel[i] == pytest.approx(one.energy_rel, abs=1e-12)


def test_minimum_norm_on_rank_deficient():
    # free vertex with no edge at all: its block is unconstrained and set to 0
    from sheafpc.sheaf import build_sheaf

    sheaf = build_sheaf([("x", 1), ("h", 1), ("lone", 2)], [("e", "x", "h", [[2.0]])])
    rel = clamp(sheaf, {"x": [1.5]})
    sol = solve_inference(rel)
    np.testing.assert_allclose(sol.z_star, [3.0, 0.0, 0.0], atol=1e-12)


def test_laplacian_operator_matches_matrix(small_rel):
    op = laplacian_operator(small_rel, shift=0.5)
    v = np.array([1.0, -2.0])
    np.testing.assert_allclose(op @ v, (small_rel.L_rel + 0.5 * np.eye(2)) @ v)


@settings(max_examples=80, deadline=None)
@given(seeds)
def test_hodge_properties(seed):
    rng = np.random.default_rng(seed)
    rel = random_clamped(rng)
    b = rel.b if rel.clamped else rng.standard_normal(rel.D.shape[0])
    sol = solve_inference(rel, values=None) if rel.clamped else None
    im_part, harm = hodge_decompose(rel, b)
    scale = max(1.0, np.linalg.norm(b))
    np.testing.assert_allclose(im_part + harm, b, atol=1e-12 * scale)
    assert abs(im_part @ harm) <= 1e-8 * scale**2
    assert np.linalg.norm(rel.D.T @ harm) <= 1e-8 * scale * max(1.0, np.linalg.norm(rel.D))
    H = harmonic_projector(rel)
    np.testing.assert_allclose(H @ H, H, atol=1e-9)
    np.testing.assert_allclose(H, H.T, atol=1e-9)
    if sol is not None:
        np.testing.assert_allclose(sol.r_star, harm, atol=1e-9 * scale)
        assert sol.energy_rel == pytest.approx(0.5 * harm @ harm, rel=1e-9, abs=1e-14 * scale**2)
