import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thbbpx.adaptivity import (AdaptiveConfig, Problem, adaptive_loop, estimate, lshape_problem,
                               mark_dorfler, square_corner_problem)
from thbbpx.bspline import TensorSpace, gauss_rule
from thbbpx.data import load_geometry
from thbbpx.galerkin import GeometryMap, build_system, solve_direct
from thbbpx.mesh import AdmissibilityClass, HierarchicalMesh
from thbbpx.space import HierarchicalSpace


def test_dorfler_examples():
    assert list(mark_dorfler([3, 2, 1], 0.85)) == [0, 1]
    assert list(mark_dorfler([1, 3, 2], 0.85)) == [1, 2]
    assert list(mark_dorfler([0.5, 0, 2, 1], 1.0)) == [0, 2, 3]
    assert list(mark_dorfler([0.1, 10, 0.2], 0.9)) == [1]
    assert len(mark_dorfler([0, 0], 0.5)) == 0
    # ties go to the lower index
    assert list(mark_dorfler([1, 1, 1, 1], 0.5)) == [0]


@settings(max_examples=60, deadline=None)
@given(eta=st.lists(st.floats(0, 10), min_size=1, max_size=40), theta=st.floats(0.05, 1.0))
def test_dorfler_minimality(eta, theta):
    eta = np.array(eta)
    marked = mark_dorfler(eta, theta)
    total = np.sum(eta ** 2)
    if total == 0:
        assert len(marked) == 0
        return
    got = np.sum(eta[marked] ** 2)
    assert got >= theta ** 2 * total * (1 - 1e-12)
    smallest = marked[np.argmin(eta[marked])]
    assert got - eta[smallest] ** 2 < theta ** 2 * total or eta[smallest] == 0
    # the marked indicators are the largest ones
    rest = np.setdiff1d(np.arange(len(eta)), marked)
    if len(rest):
        assert eta[rest].max() <= eta[marked].min()


def test_config_validation():
    for theta in (0, -0.1, 1.2):
        with pytest.raises(ValueError):
            AdaptiveConfig(theta=theta)
    with pytest.raises(ValueError):
        AdaptiveConfig(estimator="jump")
    assert AdaptiveConfig(theta=1).theta == 1


def test_estimator_vanishes_for_exact_solution():
    # u = x(1-x)y(1-y) lies in the biquadratic space; -Laplace u = f
    f = lambda x: 2 * x[:, 1] * (1 - x[:, 1]) + 2 * x[:, 0] * (1 - x[:, 0])
    mesh = HierarchicalMesh.uniform((2, 2), (4, 4)).refine_raw({0: [0, 1, 4]})
    space = HierarchicalSpace(mesh, "thb")
    system = build_system(space, None, f)
    u = system.expand(solve_direct(system), space.size)
    eta = np.concatenate(estimate(space, None, u, f))
    assert eta.shape == (mesh.num_active,)
    assert eta.max() < 1e-10


def test_estimator_for_zero_solution_is_element_area():
    # f = 1, u_h = 0: eta_Q = h_Q |Q|^(1/2) with h_Q = |Q|^(1/2)
    geom = load_geometry("lshape_c0.geo")
    mesh = HierarchicalMesh.uniform((2, 2), (4, 4)).refine_raw({0: [5]})
    space = HierarchicalSpace(mesh, "thb")
    eta = estimate(space, geom, np.zeros(space.size), lambda x: np.ones(len(x)))
    xg, wg = gauss_rule(8)
    ref = np.stack(np.meshgrid(xg, xg, indexing="ij"), -1).reshape(-1, 2)
    wref = np.outer(wg, wg).ravel()
    for l, act in enumerate(mesh.active_elements):
        for k, b in enumerate(mesh.element_bounds(l, act)):
            size = b[:, 1] - b[:, 0]
            _, J = geom.evaluate(b[:, 0] + ref * size)
            area = np.sum(wref * np.prod(size) * np.abs(np.linalg.det(J)))
            assert abs(eta[l][k] - area) < 1e-12


def test_indicators_peak_at_corner():
    prob = square_corner_problem(2, (8, 8), alpha=1.0)
    space = HierarchicalSpace(HierarchicalMesh(prob.base), "thb")
    system = build_system(space, prob.geometry, prob.f)
    u = system.expand(solve_direct(system), space.size)
    eta = estimate(space, prob.geometry, u, prob.f)[0]
    assert np.argmax(eta) == 0  # the element touching the origin


def test_zero_source_stops_without_refining():
    prob = Problem(TensorSpace.uniform((2, 2), (4, 4)), GeometryMap.identity(2), lambda x: np.zeros(len(x)))
    steps = adaptive_loop(AdaptiveConfig(), prob, spectra=False)
    assert len(steps) == 1 and steps[0].marked == 0 and steps[0].mesh.nlevels == 1


@pytest.mark.parametrize("p,alpha", [(2, 1.0), (3, 0.5)])
def test_square_refinement_localizes(p, alpha):
    adm = AdmissibilityClass("T", 2)
    steps = adaptive_loop(AdaptiveConfig(adm=adm, max_levels=7), square_corner_problem(p, alpha=alpha),
                          spectra=False)
    assert len(steps) >= 7
    for s in steps:
        assert s.mesh.is_strictly_admissible(adm)
    mesh = steps[6].mesh
    L = mesh.nlevels - 1
    far = mesh.element_bounds(L, mesh.active_elements[L])[:, :, 1]
    assert np.linalg.norm(far, axis=1).max() <= 4 * mesh.h(L)


def test_lshape_loop_short():
    adm = AdmissibilityClass("T", 2)
    steps = adaptive_loop(AdaptiveConfig(adm=adm, max_levels=3), lshape_problem(2, nel=(8, 4)))
    assert [s.mesh.nlevels for s in steps][-1] == 3
    for s in steps:
        assert s.mesh.is_strictly_admissible(adm)
        assert 0 < s.bpx.lambda_min <= s.bpx.lambda_max
        assert s.noprec.kappa > s.bpx.kappa
    # the re-entrant corner (0, 0) is the image of the parametric point (1/2, 0)
    fine = steps[-1].mesh
    b = fine.element_bounds(2, fine.active_elements[2])
    centre = b.mean(axis=2)
    assert np.min(np.linalg.norm(centre - [0.5, 0.0], axis=1)) < 2 * fine.h(2)
