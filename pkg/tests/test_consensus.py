import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapefuse.consensus import (ConsensusAbort, EnergyConfig, gm_rho, gm_weight, make_problem,
                                 optimize_consensus, preset, solve_round)
from shapefuse.geometry import PluckerRay
from shapefuse.model import rest_vertices
from shapefuse.unpose import UnposedCloud

from instances import block_functions, fd_jacobian, random_cloud, random_consensus_problem, random_symmetric_model, relative_error


# -- robust cost ---------------------------------------------------------------

def test_gm_rho_values():
    s = 0.01
    assert gm_rho(0.0, s) == 0.0
    assert gm_rho(s, s) == pytest.approx(s**2 / 2)
    assert gm_rho(1e6, s) == pytest.approx(s**2, rel=1e-9)


@given(st.floats(1e-4, 1.0), st.floats(1e-3, 0.1))
def test_irls_weight_is_half_derivative(e, s):
    h = 1e-7 * max(e, 1e-3)
    deriv = (gm_rho(e + h, s) - gm_rho(e - h, s)) / (2 * h)
    assert gm_weight(e, s) == pytest.approx(deriv / (2 * e), rel=1e-5)
    assert 0 < gm_weight(e, s) <= 1


def test_presets_and_validation():
    c = preset("clothed")
    assert (c.w_lp, c.w_var, c.w_sym, c.sigma_gm) == (2.0, 0.2, 1.0, 0.01)
    m = preset("minimal", rounds=2)
    assert (m.w_lp, m.w_var, m.sigma_gm, m.rounds) == (1.0, 1.0, 0.005, 2)
    with pytest.raises(KeyError):
        preset("nope")
    for bad in (dict(w_lp=-1.0), dict(sigma_gm=0.0), dict(rounds=0)):
        with pytest.raises(ValueError):
            EnergyConfig(**bad).validate()


# -- residual blocks -------------------------------------------------------------

def blank_problem(model, cloud, **cfg):
    return make_problem(model, np.zeros(model.n_shape), None, cloud, EnergyConfig(**cfg))


@pytest.fixture
def tiny():
    model = random_symmetric_model(0)
    rng = np.random.default_rng(0)
    return model, random_cloud(model, 20, rng)


def test_data_residuals_zero_for_rays_through_vertices(tiny):
    model, _ = tiny
    rng = np.random.default_rng(1)
    vid = np.arange(model.n_vertices)
    rays = PluckerRay.from_point_direction(model.template_vertices, rng.normal(size=(len(vid), 3)))
    z = np.zeros(1, dtype=np.int64)
    cloud = UnposedCloud(z.repeat(len(vid)), vid, rays.direction, rays.moment, rays.direction, rays.moment,
                         np.zeros(len(vid)), z, z)
    prob = blank_problem(model, cloud)
    assert np.allclose(prob.data_residuals(prob.pack(np.zeros(model.n_shape), np.zeros((model.n_vertices, 3)))).residual, 0)


def test_data_residual_single_offset_ray(tiny):
    model, _ = tiny
    v = model.template_vertices[5]
    rays = PluckerRay.from_point_direction((v + [0.01, 0, 0])[None], np.array([[0, 0, 1.0]]))
    z = np.zeros(1, dtype=np.int64)
    cloud = UnposedCloud(z, np.array([5]), rays.direction, rays.moment, rays.direction, rays.moment,
                         np.zeros(1), z + 1, z + 1)
    prob = blank_problem(model, cloud)
    x = prob.pack(np.zeros(model.n_shape), np.zeros((model.n_vertices, 3)))
    w = 0.37
    r = prob.data_residuals(x, irls=np.array([w])).residual
    assert np.linalg.norm(r) == pytest.approx(0.01 * np.sqrt(w))
    # unit weights reduce the data term to the plain sum of squared distances
    assert prob.data_residuals(x, irls=np.ones(1)).energy == pytest.approx(0.01**2)


def test_regularizers_vanish_at_the_anchor(tiny):
    model, cloud = tiny
    prob = blank_problem(model, cloud, w_lp=2.0, w_var=0.5, w_sym=1.0)
    x = prob.pack(np.zeros(model.n_shape), np.zeros((model.n_vertices, 3)))
    for block in (prob.laplacian_residuals(x), prob.model_residuals(x), prob.symmetry_residuals(x)):
        assert np.allclose(block.residual, 0)
    # constant offsets are invisible to the uniform Laplacian
    x = prob.pack(np.zeros(model.n_shape), np.tile([0.01, -0.02, 0.03], (model.n_vertices, 1)))
    assert np.allclose(prob.laplacian_residuals(x).residual, 0, atol=1e-15)


def test_laplacian_spike(tiny):
    model, cloud = tiny
    prob = blank_problem(model, cloud, w_lp=1.0)
    d = np.zeros((model.n_vertices, 3))
    d[7] = [0.01, 0, 0]
    r = prob.laplacian_residuals(prob.pack(np.zeros(model.n_shape), d)).residual.reshape(-1, 3)
    s = np.sqrt(model.lap_weights)
    ring = set(model.faces[(model.faces == 7).any(axis=1)].ravel()) - {7}
    assert np.isclose(r[7, 0], s[7] * 0.01)
    for j in ring:
        assert np.isclose(r[j, 0], -s[j] * 0.01 / len(set(model.faces[(model.faces == j).any(axis=1)].ravel()) - {j}))
    assert set(np.flatnonzero(np.abs(r).sum(1))) == ring | {7}


def test_mirror_consistent_offsets_and_single_pair(tiny):
    model, cloud = tiny
    prob = blank_problem(model, cloud, w_sym=1.0)
    rng = np.random.default_rng(2)
    d = np.zeros((model.n_vertices, 3))
    i, j = model.symmetry_pairs.T
    d[i] = rng.normal(size=(len(i), 3))
    d[j] = d[i] * [-1, 1, 1]
    assert np.allclose(prob.symmetry_residuals(prob.pack(np.zeros(model.n_shape), d)).residual, 0)
    d = np.zeros((model.n_vertices, 3))
    d[i[0]] = [0.001, 0, 0]
    r = prob.symmetry_residuals(prob.pack(np.zeros(model.n_shape), d)).residual.reshape(-1, 3)
    gamma = 0.5 * (model.sym_weights[i[0]] + model.sym_weights[j[0]])
    assert np.allclose(r[0], np.sqrt(gamma) * np.array([-0.001, 0, 0]))
    assert np.allclose(r[1:], 0)


def test_height_residual(toy):
    rng = np.random.default_rng(3)
    cloud = random_cloud(toy, 10, rng)
    prob = make_problem(toy, np.zeros(toy.n_shape), None, cloud, EnergyConfig(height=1.80, w_height=4.0))
    x = prob.pack(np.zeros(toy.n_shape), np.zeros((toy.n_vertices, 3)))
    h = np.ptp(toy.template_vertices[:, 1])
    assert h == pytest.approx(1.75, abs=0.02)
    assert prob.height_residual(x).residual[0] == pytest.approx((h - 1.80) * 2.0)
    prob = make_problem(toy, np.zeros(toy.n_shape), None, cloud, EnergyConfig(height=h))
    assert prob.height_residual(x).residual[0] == pytest.approx(0.0, abs=1e-15)
    prob = make_problem(toy, np.zeros(toy.n_shape), None, cloud, EnergyConfig())
    assert prob.height_residual(x) is None
    assert [b.name for b in prob.blocks(x)] == ["data", "laplacian", "model", "symmetry"]


@pytest.mark.parametrize("seed", range(5))
def test_block_jacobians_finite_differences(seed):
    prob, x = random_consensus_problem(seed)
    funcs = block_functions(prob)
    assert set(funcs) == {b.name for b in prob.blocks(x)}
    for name, fn in funcs.items():
        err = relative_error(fn(x).jacobian, fd_jacobian(lambda y: fn(y).residual, x))
        assert err < 1e-4, name


def test_model_term_absorbs_a_basis_column(tiny):
    model, cloud = tiny
    cfg = EnergyConfig(w_lp=0.0, w_var=1.0, w_sym=0.0)
    prob = make_problem(model, np.zeros(model.n_shape), None, cloud, cfg, weights=np.zeros(len(cloud)))
    d = model.shape_basis[:, :, 1].copy()
    x0 = prob.pack(np.zeros(model.n_shape), d)
    beta = np.linalg.lstsq(prob.model_residuals(x0).jacobian[:, :model.n_shape].toarray(),
                           -prob.model_residuals(x0).residual, rcond=None)[0]
    assert np.allclose(beta, [0, 1, 0], atol=1e-9)
    # the solver finds the same optimum when D is free too; with only the model
    # term active, beta moves to explain D and D shrinks
    bh, dd, res = solve_round(prob, np.zeros(model.n_shape), d, cfg)
    assert prob.model_residuals(prob.pack(bh, dd)).energy < 1e-16


def test_model_term_orthogonal_offsets(tiny):
    model, cloud = tiny
    cfg = EnergyConfig(w_lp=0.0, w_var=1.0, w_sym=0.0)
    prob = make_problem(model, np.zeros(model.n_shape), None, cloud, cfg, weights=np.zeros(len(cloud)))
    s = np.sqrt(model.var_weights)
    b = (s[:, None, None] * model.shape_basis).reshape(-1, model.n_shape)
    q, _ = np.linalg.qr(b)
    rng = np.random.default_rng(4)
    y = rng.normal(size=b.shape[0])
    y -= q @ (q.T @ y)
    d = (y.reshape(-1, 3) / s[:, None]) * 0.01
    block = prob.model_residuals(prob.pack(np.zeros(model.n_shape), d))
    beta = np.linalg.lstsq(block.jacobian[:, :model.n_shape].toarray(), -block.residual, rcond=None)[0]
    assert np.allclose(beta, 0, atol=1e-9)
    assert np.sqrt(block.energy) == pytest.approx(np.linalg.norm(s[:, None] * d))


# -- alternation ---------------------------------------------------------------

def test_fixed_correspondence_round_is_one_linear_solve(tiny):
    model, cloud = tiny
    cfg = EnergyConfig(rounds=1)
    prob = make_problem(model, np.zeros(model.n_shape), None, cloud, cfg)
    bh, d, res = solve_round(prob, np.zeros(model.n_shape), np.zeros((model.n_vertices, 3)), cfg)
    r, jac = prob.residuals(prob.pack(bh, d))
    assert np.abs(jac.T @ r).max() < 1e-9
    assert res.iterations <= 2


def test_optimize_consensus_reports_and_monotone_rounds(tiny):
    model, cloud = tiny
    seen = []
    result = optimize_consensus(model, np.zeros(model.n_shape), cloud, EnergyConfig(rounds=3),
                                callback=lambda r, b, d: seen.append(r))
    assert seen == [1, 2, 3]
    rounds = result.report["rounds"]
    assert len(rounds) == 3
    for entry in rounds:
        e = entry["surrogate_energies"]
        assert all(b <= a for a, b in zip(e, e[1:]))
    assert np.allclose(result.vertices(model), rest_vertices(model, result.beta, result.offsets))


def test_collapse_aborts_with_report(small_toy):
    from shapefuse.synthbench import SequenceSpec, render_sequence
    from shapefuse.unpose import build_unposed_cloud
    seq = render_sequence(small_toy, SequenceSpec(frames=2, width=270, height=270, focal=250.0))
    beta = np.zeros(small_toy.n_shape)
    cloud = build_unposed_cloud(small_toy, beta, seq.poses, seq.masks, seq.cameras)
    far = [p.copy() for p in seq.poses]
    for p in far:
        p[-3:] += [3.0, 0, 0]
    with pytest.raises(ConsensusAbort) as err:
        optimize_consensus(small_toy, beta, cloud, EnergyConfig(rounds=2), poses=far, masks=seq.masks,
                           cameras=seq.cameras)
    assert len(err.value.report["rounds"]) == 2
