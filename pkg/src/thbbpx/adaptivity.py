"""Solve / estimate / mark / refine loop with residual indicators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bspline import KnotVector, QuadratureRule, TensorSpace
from .bpx import BPX, Decomposition, estimate_spectrum, pcg, unpreconditioned_spectrum
from .galerkin import GeometryMap, build_system, level_quadrature, level_coefficients
from .mesh import AdmissibilityClass, HierarchicalMesh
from .space import HierarchicalSpace


@dataclass
class AdaptiveConfig:
    theta: float = 0.85
    adm: Optional[AdmissibilityClass] = field(default_factory=lambda: AdmissibilityClass("T", 2))
    max_levels: int = 11
    max_steps: int = 100
    estimator: str = "residual"
    smoother: str = "sgs"
    decomposition: str = "tsupp"
    tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.estimator != "residual":
            raise ValueError("only the residual estimator is available")


@dataclass
class Problem:
    """Poisson problem ``-Laplace u = f`` with zero Dirichlet data."""

    base: TensorSpace
    geometry: GeometryMap
    f: Callable


@dataclass
class AdaptiveStep:
    mesh: HierarchicalMesh
    space: HierarchicalSpace
    dofs: int
    eta: float
    bpx: object
    noprec: object
    iterations: int
    marked: int
    A: object = None


def estimate(space, geom, u, f, quad=None):
    """Element indicators ``h_Q ||f + Laplace u_h||_{L2(Q)}`` per level,
    aligned with ``space.mesh.active_elements``.  ``u`` holds global
    coefficients (boundary entries included, zero for Dirichlet data)."""
    if quad is None:
        quad = QuadratureRule.for_degree(space.degree, extra=1)
    out = []
    d = space.dim
    for l in range(space.nlevels):
        act = space.mesh.active_elements[l]
        eta = np.zeros(len(act))
        if len(act):
            c = level_coefficients(space, u, l)
            nloc = int(np.prod([p + 1 for p in space.degree]))
            step = max(1, 200_000 // (nloc * int(np.prod(quad.order))))
            for s in range(0, len(act), step):
                el = act[s:s + step]
                _, pos, vals, _, w, X, lap = level_quadrature(space, quad, geom, l, el, nders=2)
                Xf = X.reshape(-1, d)
                phys = Xf if geom is None or geom.is_identity else geom.evaluate(Xf, nders=1)[0]
                fx = np.asarray(f(phys), dtype=float).reshape(w.shape)
                res = fx + np.einsum("eqi,ei->eq", lap, c[pos])
                area = w.sum(axis=1)
                hq = area ** (1.0 / d)
                eta[s:s + len(el)] = hq * np.sqrt(np.sum(w * res ** 2, axis=1))
        out.append(eta)
    return out


def mark_dorfler(eta, theta):
    """Greedy Dörfler marking on a flat indicator array: indices of the
    largest indicators (ties by index) until ``sum eta^2 >= theta^2 total``."""
    eta = np.asarray(eta, dtype=float)
    total = np.sum(eta ** 2)
    if total <= 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(len(eta)), -eta))
    cum = np.cumsum(eta[order] ** 2)
    k = int(np.searchsorted(cum, theta ** 2 * total * (1 - 1e-14))) + 1
    marked = order[:min(k, len(eta))]
    return np.sort(marked[eta[marked] > 0])


def _flat_to_levels(mesh, flat):
    sizes = [len(a) for a in mesh.active_elements]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    out = {}
    for l in range(mesh.nlevels):
        sel = flat[(flat >= offs[l]) & (flat < offs[l + 1])] - offs[l]
        if len(sel):
            out[l] = mesh.active_elements[l][sel]
    return out


def solve(space, problem, config):
    """Assemble and solve with PCG preconditioned by BPX; returns the global
    coefficient vector, the system and the preconditioner."""
    system = build_system(space, problem.geometry, problem.f)
    B = BPX(Decomposition(space, config.decomposition), system.A, config.smoother)
    res = pcg(system.A, system.b, B, tol=config.tol, maxit=2000)
    return system.expand(res.x, space.size), system, B, res.iterations


def adaptive_loop(config, problem, spectra=True, log=None):
    """Run the adaptive loop until ``config.max_levels`` levels exist (the
    final mesh is also solved and recorded) or nothing is marked."""
    mesh = HierarchicalMesh(problem.base)
    steps = []
    for _ in range(config.max_steps):
        space = HierarchicalSpace(mesh, "thb")
        u, system, B, its = solve(space, problem, config)
        eta_lv = estimate(space, problem.geometry, u, problem.f)
        eta = np.concatenate(eta_lv)
        bpx_est = noprec = None
        if spectra and system.A.shape[0]:
            bpx_est = estimate_spectrum(system.A, B, seed=config.seed)
            noprec = unpreconditioned_spectrum(system.A, precond=B, seed=config.seed)
        done = mesh.nlevels >= config.max_levels
        marked = np.zeros(0, dtype=int) if done else mark_dorfler(eta, config.theta)
        steps.append(AdaptiveStep(mesh, space, system.A.shape[0], float(np.sqrt(np.sum(eta ** 2))),
                                  bpx_est, noprec, its, len(marked), system.A))
        if log is not None:
            log(steps[-1])
        if done or len(marked) == 0:
            break
        sel = _flat_to_levels(mesh, marked)
        mesh = mesh.admissible_refine(sel, config.adm) if config.adm is not None else mesh.refine_raw(sel)
    return steps


def lshape_problem(p, nel=(32, 16), geometry=None):
    """L-shaped domain with one C0 parametric line, ``f = 1``."""
    from .data import load_geometry
    geom = geometry if geometry is not None else load_geometry("lshape_c0.geo")
    n1, n2 = nel
    br1 = np.linspace(0.0, 1.0, n1 + 1)
    mult = np.ones(n1 - 1, dtype=int)
    mult[np.isclose(br1[1:-1], 0.5)] = p
    kv1 = KnotVector.from_breaks(p, br1, mult)
    kv2 = KnotVector.uniform(p, n2)
    return Problem(TensorSpace([kv1, kv2]), geom, lambda x: np.ones(len(x)))


def square_corner_problem(p, nel=(8, 8), alpha=1.0):
    """Unit square with source ``|x|^{-alpha}`` singular at the origin."""
    def f(x):
        return np.linalg.norm(x, axis=1) ** (-alpha)
    return Problem(TensorSpace.uniform((p, p), nel), GeometryMap.identity(2), f)
