import numpy as np
import pytest

from mfglab.forward import MfgSolution
from mfglab.grid import build_grid, time_derivative
from mfglab.linearized import (
    LinearizedCoefficients,
    assemble_coefficients,
    linearization_gap,
    solve_linearized,
    solve_time_differentiated,
)


def _quadratic_solution(g, rng):
    """Fields quadratic in x so that the gradients are exact at every node."""
    x = g.coords[0][None]
    t = g.times[:, None]
    a, b, c = rng.normal(size=3)
    u = (a + b * t) * x**2 + c * np.cos(t) * x
    v = 1.0 + (b - a * t) * x * (1 - x)
    return MfgSolution(g, np.broadcast_to(u, g.st_shape).copy(),
                       np.broadcast_to(v, g.st_shape).copy()), (a, b, c)


def test_coefficients_for_coincident_solutions():
    g = build_grid(1, 29, 1.0, 20)
    sol, _ = _quadratic_solution(g, np.random.default_rng(0))
    p2 = 1.0 + 0.1 * g.coords[0]
    co = assemble_coefficients(sol, sol, p2)
    grad = np.gradient(sol.u, g.h, axis=1, edge_order=2)
    np.testing.assert_allclose(co.r1[:, 0], p2 * grad, atol=1e-12)
    np.testing.assert_allclose(co.r2[:, 0], p2 * grad, atol=1e-12)
    np.testing.assert_allclose(co.g, grad**2, atol=1e-12)


def test_zero_density_gives_zero_h():
    g = build_grid(1, 29, 1.0, 20)
    sol, _ = _quadratic_solution(g, np.random.default_rng(1))
    sol0 = MfgSolution(g, sol.u, np.zeros(g.st_shape))
    assert np.all(assemble_coefficients(sol0, sol, 1.0).h == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_coefficients_match_symbolic_values(seed):
    g = build_grid(1, 39, 1.0, 30)
    rng = np.random.default_rng(seed)
    s1, (a1, b1, c1) = _quadratic_solution(g, rng)
    s2, (a2, b2, c2) = _quadratic_solution(g, rng)
    x = g.coords[0][None]
    t = g.times[:, None]
    gu1 = 2 * (a1 + b1 * t) * x + c1 * np.cos(t)
    gu2 = 2 * (a2 + b2 * t) * x + c2 * np.cos(t)
    p2 = 1.0 + 0.2 * np.sin(np.pi * g.coords[0])
    co = assemble_coefficients(s1, s2, p2)
    np.testing.assert_allclose(co.g, gu1**2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(co.h[:, 0], 2 * s1.v * gu1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(co.r1[:, 0], 0.5 * p2 * (gu1 + gu2), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(co.r2[:, 0], p2 * gu1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(co.r3, p2 * s2.v, rtol=1e-12, atol=1e-12)


def test_zero_source_gives_zero_solution(base_pair, grid99):
    p1, p2, s1, s2 = base_pair
    co = assemble_coefficients(s1, s2, p2)
    lin = solve_linearized(co, 0.0, 0.5)
    assert np.all(lin.y == 0.0) and np.all(lin.z == 0.0)


def test_linearity_in_source(base_pair):
    p1, p2, s1, s2 = base_pair
    co = assemble_coefficients(s1, s2, p2)
    f = 0.5 * (p1 - p2)
    a = solve_linearized(co, f, 0.5)
    b = solve_linearized(co, 2 * f, 0.5)
    scale = np.max(np.abs(a.y))
    assert np.max(np.abs(b.y - 2 * a.y)) < 1e-9 * scale
    assert np.max(np.abs(b.z - 2 * a.z)) < 1e-9 * np.max(np.abs(a.z))


def test_differences_of_forward_solves_are_reproduced(base_pair):
    p1, p2, s1, s2 = base_pair
    co = assemble_coefficients(s1, s2, p2)
    lin = solve_linearized(co, 0.5 * (p1 - p2), 0.5)
    gap = linearization_gap(lin, s1, s2)
    assert lin.converged
    # the value equation is discretely exact; y inherits the O(h^2) z gap via c0 z
    assert gap["y"] <= gap["z"]
    assert gap["max"] < 1e-2


def test_time_independent_coefficients_give_zero_time_derivative():
    g = build_grid(1, 29, 1.0, 40)
    x = g.coords[0]
    const = lambda f: np.broadcast_to(f, g.st_shape).copy()  # noqa: E731
    vec = lambda f: np.broadcast_to(f, (g.nt + 1, 1) + g.shape).copy()  # noqa: E731
    zs, zv = np.zeros(g.st_shape), np.zeros((g.nt + 1, 1) + g.shape)
    co = LinearizedCoefficients(g, const(1 + x), vec(x), vec(0.3 * x), vec(0.2 * x),
                                const(1 + x**2), zs, zv, zv, zv, zs)
    lin = solve_time_differentiated(co, 0.0, 0.5)
    assert np.all(lin.y1 == 0.0) and np.all(lin.z1 == 0.0)


def test_time_differentiated_solve_matches_difference_quotients():
    rel = []
    from mfglab.stability import default_base_p, default_setup

    for n, nt in ((49, 100), (99, 200)):
        g = build_grid(1, n, 1.0, nt)
        setup = default_setup(g)
        p2 = default_base_p(g)
        x = g.coords[0]
        p1 = p2 + 0.1 * np.sin(2 * np.pi * x) * np.sin(np.pi * x) ** 2
        s1, s2 = setup.solve(p1), setup.solve(p2)
        co = assemble_coefficients(s1, s2, p2)
        lin = solve_time_differentiated(co, 0.5 * (p1 - p2), 0.5)
        assert lin.endpoint_rule == "difference_quotient"
        ref = time_derivative(lin.y, g)
        rel.append(np.linalg.norm(lin.y1 - ref) / np.linalg.norm(ref))
    assert rel[1] < 0.05
    assert rel[1] < rel[0]
