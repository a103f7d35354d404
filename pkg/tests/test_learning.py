import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sheafpc.experiments import make_chain, make_data
from sheafpc.learning import (
    GNConfig,
    TrainConfig,
    default_shift,
    edge_gradient,
    gn_source_covariance,
    gn_update,
    harmonic_diffusive_gradient,
    hutchinson_covariance,
    isotropic_sampler,
    scalar_rate,
    train,
    train_to_end,
)
from sheafpc.metrics import sample_batch
from sheafpc.relative import clamp, solve_inference
from sheafpc.sheaf import SheafError, ShapeError, build_sheaf, energy

seeds = st.integers(0, 2**32 - 1)


def _fd_gradient(sheaf, s, eid, h=1e-6):
    W = sheaf.edge(eid).weight
    grad = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        grad[idx] = (energy(sheaf.with_weights({eid: Wp}), s) - energy(sheaf.with_weights({eid: Wm}), s)) / (2 * h)
    return grad


def test_edge_gradient_small(small_rel):
    s = solve_inference(small_rel).s_star
    # (W s_u - s_v) s_u^T on x -> h1: (2 * 1 - 3) * 1
    np.testing.assert_allclose(edge_gradient(small_rel.sheaf, s, "x->h1"), [[-1.0]])
    np.testing.assert_allclose(edge_gradient(small_rel.sheaf, s, "h1->h2"), [[-3.0]])


def test_harmonic_diffusive_form_small(small_rel):
    s = solve_inference(small_rel).s_star
    np.testing.assert_allclose(
        harmonic_diffusive_gradient(small_rel, None, "h1->h2"),
        edge_gradient(small_rel.sheaf, s, "h1->h2"),
        atol=1e-12,
    )
    with pytest.raises(SheafError, match="clamped"):
        harmonic_diffusive_gradient(small_rel, None, "x->h1")


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(1, 4, size=4)]
    sheaf = make_chain(dims, [rng.standard_normal((dims[i + 1], dims[i])) for i in range(3)])
    s = solve_inference(clamp(sheaf, {"x": rng.standard_normal(dims[0]), "y": rng.standard_normal(dims[3])})).s_star
    for eid in sheaf.edge_ids:
        g = edge_gradient(sheaf, s, eid)
        fd = _fd_gradient(sheaf, s, eid)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-8)


def test_gn_covariance_small(small_rel):
    covs = gn_source_covariance(small_rel, 1.0)
    np.testing.assert_allclose(covs["h1"], [[2 / 3]])
    np.testing.assert_allclose(covs["h2"], [[2 / 3]])
    # the matrix form reduces to the scalar form for sigma^2 I
    m = small_rel.D.shape[0]
    covs2 = gn_source_covariance(small_rel, 2.5 * np.eye(m))
    np.testing.assert_allclose(covs2["h1"], [[2.5 * 2 / 3]])


def test_gn_covariance_rejects_bad_sigma(small_rel):
    with pytest.raises(ValueError, match="semidefinite"):
        gn_source_covariance(small_rel, -np.eye(3))
    with pytest.raises(ShapeError):
        gn_source_covariance(small_rel, np.eye(2))


def test_gn_update_example():
    W = np.zeros((2, 2))
    G = np.array([[1.0, 1.0], [2.0, 2.0]])
    out = gn_update(W, G, np.diag([3.0, 0.0]), GNConfig(gamma=1.0, epsilon=1.0))
    np.testing.assert_allclose(out, [[0.25, 1.0], [0.5, 2.0]])


def test_gn_update_shape_error():
    with pytest.raises(ShapeError):
        gn_update(np.zeros((2, 2)), np.zeros((2, 3)), np.eye(2), GNConfig())


def test_scalar_rate_example():
    assert scalar_rate(np.diag([3.0, 1.0]), GNConfig(gamma=1.0, epsilon=1.0)) == pytest.approx(0.25)


def test_gn_config_validation():
    with pytest.raises(ValueError):
        GNConfig(gamma=2.0)
    with pytest.raises(ValueError):
        GNConfig(epsilon=0.0)


def test_hutchinson_is_deterministic_and_unbiased(small_rel):
    sampler = isotropic_sampler(1.0)
    a = hutchinson_covariance(small_rel, sampler, 20_000, seed=5)
    b = hutchinson_covariance(small_rel, sampler, 20_000, seed=5)
    np.testing.assert_array_equal(a["h1"], b["h1"])
    np.testing.assert_allclose(a["h1"], [[2 / 3]], rtol=0.05)
    mf = hutchinson_covariance(small_rel, sampler, 200, seed=5, matrix_free=True)
    direct = hutchinson_covariance(small_rel, sampler, 200, seed=5)
    np.testing.assert_allclose(mf["h2"], direct["h2"], rtol=1e-8)


def test_hutchinson_singular_needs_shift():
    sheaf = build_sheaf([("x", 1), ("h", 1), ("lone", 1)], [("e", "x", "h", [[1.0]])])
    rel = clamp(sheaf, {"x": [1.0]})
    with pytest.raises(np.linalg.LinAlgError, match="singular"):
        hutchinson_covariance(rel, isotropic_sampler(1.0), 10)
    out = hutchinson_covariance(rel, isotropic_sampler(1.0), 10, lam=default_shift(rel))
    np.testing.assert_allclose(out["lone"], 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_train_plain_reduces_energy():
    rng = np.random.default_rng(0)
    sheaf = make_chain([2, 3, 2], [rng.standard_normal((3, 2)), rng.standard_normal((2, 3))])
    val = sample_batch(64, 2, seed=9)
    records, final = train_to_end(sheaf, make_data(2, 0.0), TrainConfig(steps=200, learning_rate=0.1), validation=val)
    assert len(records) == 201
    assert records[-1].train_energy < 0.2 * records[0].train_energy
    assert records[-1].val_mse < records[0].val_mse
    assert set(records[0].harmonic_load) == set(sheaf.edge_ids)
    assert final.edge("x->h1").weight.shape == (3, 2)


@pytest.mark.parametrize("rule", ["gauss_newton", "scalar_spectral"])
def test_train_gn_rules_descend(rule):
    rng = np.random.default_rng(1)
    sheaf = make_chain([2, 3, 2], [rng.standard_normal((3, 2)), rng.standard_normal((2, 3))])
    records, _ = train_to_end(sheaf, make_data(2, 0.0), TrainConfig(steps=50, update_rule=rule), gn=GNConfig())
    assert records[-1].train_energy < records[0].train_energy


def test_train_is_reproducible():
    rng = np.random.default_rng(2)
    sheaf = make_chain([2, 2, 2], [rng.standard_normal((2, 2)) for _ in range(2)])
    cfg = TrainConfig(steps=20, seed=42)
    a, fa = train_to_end(sheaf, make_data(2, 0.1), cfg)
    b, fb = train_to_end(sheaf, make_data(2, 0.1), cfg)
    assert [r.train_energy for r in a] == [r.train_energy for r in b]
    np.testing.assert_array_equal(fa.edge("h1->y").weight, fb.edge("h1->y").weight)


def test_trainable_subset_freezes_others():
    rng = np.random.default_rng(3)
    sheaf = make_chain([2, 2, 2], [rng.standard_normal((2, 2)) for _ in range(2)])
    _, final = train_to_end(sheaf, make_data(2, 0.0), TrainConfig(steps=5, trainable_edges=("h1->y",)))
    np.testing.assert_array_equal(final.edge("x->h1").weight, sheaf.edge("x->h1").weight)
    assert not np.array_equal(final.edge("h1->y").weight, sheaf.edge("h1->y").weight)


def test_train_is_a_generator():
    sheaf = make_chain([1, 1, 1], [1.0, 1.0])
    gen = train(sheaf, make_data(1, 0.0), TrainConfig(steps=3))
    first = next(gen)
    assert first.step == 0
