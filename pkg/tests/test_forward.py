import numpy as np
import pytest

from emsampling.forward import (CONTRAST_A, Ball, Box, Bump, Constant, ContrastScene,
                                GreenConvolution, Primitive, ScatteringProblem, SolverConfig,
                                SolverError, VolumeGrid, assemble_far_field_data,
                                born_total_field, cube_scene, dyadic_kernel, eval_contrast,
                                far_field_from_solution, incident_plane_wave, l_shape_scene,
                                three_balls_scene, two_balls_scene, self_cell_coefficient,
                                solve_lippmann_schwinger, tangent_basis)
from emsampling.geometry import DEFAULT_POLARIZATION, fibonacci_directions, tangential_component

from oracles import mie_far_field

K = 8.0


def weak_ball(center=(0.1, -0.05, 0.2), radius=0.3, scale=0.01):
    return ContrastScene((Primitive(Ball(center, radius), Bump(scale * CONTRAST_A)),))


# --- scenes ---------------------------------------------------------------------

def test_contrast_at_center_value_is_A():
    scene = three_balls_scene()
    np.testing.assert_allclose(eval_contrast(scene, [0.4, 0.0, -0.45]), CONTRAST_A, rtol=1e-15)


@pytest.mark.parametrize("x", [
    [0.4 + 0.3, 0.0, -0.45],         # boundary of the first ball
    [0.4, 0.0, -0.45 - 0.3],
    [5.0, 5.0, 5.0],                 # outside the bounding box
])
def test_contrast_vanishes_on_boundary_and_outside(x):
    assert not np.any(eval_contrast(three_balls_scene(), x))


def test_bump_continuous_at_boundary():
    scene = weak_ball(center=(0, 0, 0), radius=0.3, scale=1.0)
    r = 0.3 * (1 - np.geomspace(1e-1, 1e-8, 30))
    vals = [np.abs(eval_contrast(scene, [ri, 0, 0])).max() for ri in r]
    assert np.all(np.diff(vals) <= 0)
    assert vals[-1] < 1e-12


def test_constant_amplitude_and_box():
    scene = ContrastScene((Primitive(Box((0, 0, 0), (0.2, 0.3, 0.4)), Constant(CONTRAST_A / 2)),))
    np.testing.assert_array_equal(eval_contrast(scene, [0.19, -0.29, 0.39]), CONTRAST_A / 2)
    assert not np.any(eval_contrast(scene, [0.2, 0, 0]))


def test_contrast_batched_shape():
    x = np.random.default_rng(0).uniform(-1, 1, (4, 5, 3))
    assert eval_contrast(three_balls_scene(), x).shape == (4, 5, 3, 3)


@pytest.mark.parametrize("prims", [
    (Primitive(Ball((0, 0, 0), 0.5), Bump(CONTRAST_A)), Primitive(Ball((0.9, 0, 0), 0.5), Bump(CONTRAST_A))),
    (Primitive(Box((0, 0, 0), (0.5, 0.5, 0.5)), Constant(CONTRAST_A)),
     Primitive(Box((0.9, 0, 0), (0.5, 0.5, 0.5)), Constant(CONTRAST_A))),
    (Primitive(Box((0, 0, 0), (0.5, 0.5, 0.5)), Constant(CONTRAST_A)),
     Primitive(Ball((0.8, 0.0, 0.0), 0.4), Constant(CONTRAST_A))),
])
def test_overlapping_primitives_rejected(prims):
    with pytest.raises(ValueError, match="overlap"):
        ContrastScene(prims)


def test_overlap_first_listed_wins():
    scene = two_balls_scene()
    # (0, 0, 0.15) lies in both balls; the upper ball's bump applies
    x = np.array([0.0, 0.0, 0.15])
    r2, s = 0.3 ** 2, 0.25 ** 2
    np.testing.assert_allclose(eval_contrast(scene, x), CONTRAST_A / 2 * np.exp(1 - r2 / (r2 - s)))
    np.testing.assert_allclose(eval_contrast(scene, [0, 0, -0.3]), CONTRAST_A / 2)


def test_touching_boxes_allowed():
    assert len(l_shape_scene().primitives) == 2
    assert len(cube_scene().primitives) == 1


@pytest.mark.parametrize("kwargs, match", [
    (dict(shape=Box((0, 0, 0), (1, 1, 1)), amplitude=Bump(CONTRAST_A)), "bump"),
])
def test_bump_needs_ball(kwargs, match):
    with pytest.raises(ValueError, match=match):
        Primitive(**kwargs)


@pytest.mark.parametrize("bad", [
    lambda: Ball((0, 0, 0), -1.0),
    lambda: Ball((0, 0, np.nan), 1.0),
    lambda: Box((0, 0, 0), (1, 0, 1)),
    lambda: Constant(np.full((3, 3), np.inf)),
    lambda: Bump(np.eye(2)),
])
def test_invalid_primitives(bad):
    with pytest.raises(ValueError):
        bad()


def test_bounding_box_and_translation():
    scene = three_balls_scene()
    lo, hi = scene.bounding_box
    np.testing.assert_allclose(lo, [-0.75, -0.4, -0.75])
    np.testing.assert_allclose(hi, [0.8, 0.4, 0.8])
    t = np.array([0.3, -0.2, 0.1])
    moved = scene.translated(t)
    x = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    np.testing.assert_allclose(eval_contrast(moved, x + t), eval_contrast(scene, x), atol=1e-13)


# --- incident field and kernels ---------------------------------------------------

def test_incident_plane_wave_examples():
    d, p = np.array([0, 0, 1.0]), np.array([1, 0, 0.0])
    np.testing.assert_allclose(incident_plane_wave(np.zeros(3), d, p, 12.0), [12j, 0, 0])
    assert not np.any(incident_plane_wave(np.ones(3), d, d, 12.0))
    x = d * 2 * np.pi / 12.0
    np.testing.assert_allclose(incident_plane_wave(x, d, p, 12.0), [12j, 0, 0], atol=1e-13)


def test_self_cell_static_limit():
    assert self_cell_coefficient(1e-8, 0.1) == pytest.approx(-1 / 3, abs=1e-12)


def test_dyadic_kernel_far_zone_is_transverse():
    # at large kr only the transverse part I - rr^T survives, at rate 1/r
    r = np.array([0.0, 0.0, 500.0])
    G = dyadic_kernel(r, 1.0)
    g = abs(np.exp(500j) / (4 * np.pi * 500))
    assert abs(G[2]) < 1e-2 * g and abs(G[0]) == pytest.approx(g, rel=1e-2)


def test_green_convolution_matches_dense_sum(rng):
    shape, h, k = (3, 4, 2), 0.1, 7.0
    conv = GreenConvolution(shape, h, k)
    J = rng.normal(size=(3,) + shape) + 1j * rng.normal(size=(3,) + shape)
    idx = np.argwhere(np.ones(shape, bool))
    pts = idx * h
    out = np.zeros((len(idx), 3), complex)
    Jf = J.reshape(3, -1).T
    for i, xi in enumerate(pts):
        for j, yj in enumerate(pts):
            if i == j:
                out[i] += conv.self_term * Jf[j]
                continue
            c = dyadic_kernel(xi - yj, k) * h ** 3
            M = np.array([[c[0], c[3], c[4]], [c[3], c[1], c[5]], [c[4], c[5], c[2]]])
            out[i] += M @ Jf[j]
    np.testing.assert_allclose(conv(J).reshape(3, -1).T, out, rtol=1e-12, atol=1e-14)


def test_tangent_basis_orthonormal(rng):
    for d in fibonacci_directions(30).nodes:
        e1, e2 = tangent_basis(d)
        B = np.stack([d, e1, e2])
        np.testing.assert_allclose(B @ B.T, np.eye(3), atol=1e-14)


# --- grids ---------------------------------------------------------------------

def test_default_grid_covers_scene_with_margin():
    scene = three_balls_scene()
    grid = VolumeGrid.for_scene(scene, 12.0)
    lo, hi = scene.bounding_box
    lam = 2 * np.pi / 12.0
    first = grid.origin - grid.spacing / 2
    last = grid.origin + (np.array(grid.dims) - 0.5) * grid.spacing
    assert np.all(first <= lo - lam + 1e-12) and np.all(last >= hi + lam - 1e-12)
    assert grid.points_per_wavelength(12.0) == pytest.approx(10.0)


def test_covering_by_cell_count():
    grid = VolumeGrid.covering([-1, -1, -1], [1, 1, 1], cells=32)
    assert grid.dims == (32, 32, 32)
    assert grid.spacing == pytest.approx(2 / 32)
    with pytest.raises(ValueError):
        VolumeGrid.covering([0, 0, 0], [1, 1, 1])


def test_coarse_grid_warning():
    prob = ScatteringProblem(weak_ball(), K, VolumeGrid.for_scene(weak_ball(), K, cells=8))
    assert "points per wavelength" in prob.metadata["warning"]


@pytest.mark.parametrize("kwargs", [dict(tolerance=0), dict(tolerance=1.0),
                                    dict(max_iterations=0), dict(points_per_wavelength=-1)])
def test_solver_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


# --- solver ------------------------------------------------------------------

def test_empty_scene_returns_incident_field():
    scene = ContrastScene()
    d = np.array([0.0, 0.6, 0.8])
    sol = solve_lippmann_schwinger(scene, d, DEFAULT_POLARIZATION, K)
    born = born_total_field(scene, d, DEFAULT_POLARIZATION, K)
    expected = incident_plane_wave(sol.grid.centers(), d, DEFAULT_POLARIZATION, K)
    np.testing.assert_array_equal(sol.field, expected)
    np.testing.assert_array_equal(born.field, sol.field)
    assert sol.iterations == 0 and sol.residual == 0.0
    assert not np.any(far_field_from_solution(scene, sol, d, K))


def test_born_field_is_incident_field():
    scene = weak_ball(scale=1.0)
    d = np.array([1.0, 0, 0])
    born = born_total_field(scene, d, DEFAULT_POLARIZATION, K)
    np.testing.assert_allclose(born.field, incident_plane_wave(born.grid.centers(), d,
                                                               DEFAULT_POLARIZATION, K))
    assert born.residual > 0


def test_weak_scene_total_field_close_to_born():
    scene = weak_ball()
    d = np.array([0.0, 0.0, 1.0])
    sol = solve_lippmann_schwinger(scene, d, DEFAULT_POLARIZATION, K)
    born = born_total_field(scene, d, DEFAULT_POLARIZATION, K)
    rel = np.linalg.norm(sol.field - born.field) / np.linalg.norm(born.field)
    assert rel <= 0.05
    assert sol.residual <= 1e-6


def test_weak_scene_far_field_close_to_born():
    scene = weak_ball()
    ds = fibonacci_directions(30)
    prob = ScatteringProblem(scene, K)
    full = assemble_far_field_data(scene, ds, ds, DEFAULT_POLARIZATION, K, problem=prob)
    born = assemble_far_field_data(scene, ds, ds, DEFAULT_POLARIZATION, K, problem=prob, born=True)
    rel = np.linalg.norm(full.polarized - born.polarized) / np.linalg.norm(full.polarized)
    assert rel <= 0.05


def test_residual_is_true_residual():
    scene = three_balls_scene()
    prob = ScatteringProblem(scene, K)
    d = np.array([0.6, 0.0, 0.8])
    b = prob.support_incident(d, tangential_component(d, DEFAULT_POLARIZATION))
    E, res, its = prob.solve_support(b)
    true = np.linalg.norm(b.ravel() - prob.matvec(E.ravel())) / np.linalg.norm(b)
    assert res == pytest.approx(true, rel=1e-12)
    assert res <= 1e-6 and its > 0


def test_three_ball_scene_converges_at_k12():
    sol = solve_lippmann_schwinger(three_balls_scene(), [0.0, 0.0, 1.0], DEFAULT_POLARIZATION,
                                   12.0, SolverConfig(tolerance=1e-6))
    assert sol.residual <= 1e-6


def test_solver_failure_reports_direction():
    cfg = SolverConfig(tolerance=1e-10, max_iterations=2, restart=2)
    d = np.array([0.0, 1.0, 0.0])
    with pytest.raises(SolverError) as info:
        solve_lippmann_schwinger(three_balls_scene(), d, DEFAULT_POLARIZATION, K, cfg)
    assert info.value.residual > 1e-10
    np.testing.assert_array_equal(info.value.direction, d)


def test_grid_field_solves_integral_equation():
    scene = weak_ball(scale=1.0)
    d = np.array([0.0, 0.0, 1.0])
    sol = solve_lippmann_schwinger(scene, d, DEFAULT_POLARIZATION, K)
    e_in = incident_plane_wave(sol.grid.centers(), d, DEFAULT_POLARIZATION, K)
    J = np.einsum("...ab,...b->a...", eval_contrast(scene, sol.grid.centers()), sol.field)
    scat = np.moveaxis(GreenConvolution(sol.grid.dims, sol.grid.spacing, K)(J), 0, -1)
    rel = np.linalg.norm(sol.field - e_in - scat) / np.linalg.norm(e_in)
    assert rel <= 1e-6


# --- far fields -------------------------------------------------------------------

def test_far_field_tangential(ball_scene):
    sol = solve_lippmann_schwinger(ball_scene, [0, 0, 1.0], DEFAULT_POLARIZATION, K)
    xh = fibonacci_directions(60).nodes
    u = far_field_from_solution(ball_scene, sol, xh, K)
    assert np.max(np.abs(np.sum(u * xh, axis=1))) <= 1e-12 * np.abs(u).max()
    single = far_field_from_solution(ball_scene, sol, xh[3], K)
    np.testing.assert_allclose(single, u[3], rtol=1e-13)


def test_far_field_matches_problem_far_field(ball_scene):
    d = np.array([0, 0, 1.0])
    prob = ScatteringProblem(ball_scene, K)
    q = 1j * K * tangential_component(d, DEFAULT_POLARIZATION)
    E, _, _ = prob.solve_support(prob.support_incident(d, q))
    sol = solve_lippmann_schwinger(ball_scene, d, DEFAULT_POLARIZATION, K, problem=prob)
    xh = fibonacci_directions(20).nodes
    # the grid field is E_in + G[P E]; on the support it differs from E by the residual
    u_grid = far_field_from_solution(ball_scene, sol, xh, K)
    u_support = prob.far_field(E, xh)
    assert np.linalg.norm(u_grid - u_support) <= 1e-5 * np.linalg.norm(u_support)


@pytest.mark.parametrize("ppw, tol", [(10, 0.2), (20, 0.05)])
def test_far_field_matches_mie_series(ppw, tol):
    # homogeneous isotropic sphere, eps_r = 2, radius 0.3, k = 8
    scene = ContrastScene((Primitive(Ball((0, 0, 0), 0.3), Constant(np.eye(3))),))
    prob = ScatteringProblem(scene, K, cfg=SolverConfig(points_per_wavelength=ppw,
                                                         margin_wavelengths=0.1))
    E, _, _ = prob.solve_support(prob.support_incident([0, 0, 1.0], [1.0, 0, 0]))
    xh = fibonacci_directions(100).nodes
    u = prob.far_field(E, xh)
    ref = mie_far_field(xh, K, 0.3, 2.0)
    assert np.linalg.norm(u - ref) / np.linalg.norm(ref) <= tol


def test_grid_refinement_first_order(ball_scene):
    d = np.array([0.0, 0.0, 1.0])
    q = tangential_component(d, DEFAULT_POLARIZATION)
    xh = fibonacci_directions(40).nodes
    u = {}
    for cells in (16, 32, 64):
        prob = ScatteringProblem(ball_scene, K, VolumeGrid.for_scene(ball_scene, K, cells=cells))
        E, _, _ = prob.solve_support(prob.support_incident(d, q))
        u[cells] = prob.far_field(E, xh)
    ratio = np.linalg.norm(u[16] - u[32]) / np.linalg.norm(u[32] - u[64])
    assert ratio >= 2.0


# --- data assembly ----------------------------------------------------------------

def test_assemble_empty_scene():
    ds = fibonacci_directions(8)
    data = assemble_far_field_data(ContrastScene(), ds, ds, DEFAULT_POLARIZATION, K, full=True)
    assert not np.any(data.polarized) and not np.any(data.full)
    assert data.polarized.shape == (8, 8, 3)


def test_assemble_shapes_and_metadata(small_data):
    assert small_data.polarized.shape == (50, 50, 3)
    assert small_data.metadata["max_residual"] <= 1e-6
    assert len(small_data.metadata["residuals"]) == 50


def test_full_matrices_consistent(full_data):
    q = tangential_component(full_data.inc.nodes, full_data.p)
    np.testing.assert_allclose(np.einsum("ijab,jb->ija", full_data.full, q),
                               full_data.polarized, rtol=1e-14)
    # matrices annihilate the incident direction
    Ud = np.einsum("ijab,jb->ija", full_data.full, full_data.inc.nodes)
    assert np.abs(Ud).max() <= 1e-14 * np.abs(full_data.full).max()


def test_linearity_in_polarization(ball_scene):
    prob = ScatteringProblem(ball_scene, K)
    d = np.array([0.0, 0.6, 0.8])
    e1, e2 = tangent_basis(d)
    xh = fibonacci_directions(30).nodes
    far = {}
    for name, q in (("1", e1), ("2", e2), ("sum", 0.3 * e1 - 2.0 * e2)):
        E, _, _ = prob.solve_support(prob.support_incident(d, q))
        far[name] = prob.far_field(E, xh)
    combo = 0.3 * far["1"] - 2.0 * far["2"]
    assert np.linalg.norm(far["sum"] - combo) <= 5e-6 * np.linalg.norm(combo)


def test_threaded_assembly_matches_sequential(ball_scene, monkeypatch):
    ds = fibonacci_directions(12)
    seq = assemble_far_field_data(ball_scene, ds, ds, DEFAULT_POLARIZATION, K, workers=1)
    par = assemble_far_field_data(ball_scene, ds, ds, DEFAULT_POLARIZATION, K, workers=3)
    assert seq.polarized.tobytes() == par.polarized.tobytes()
