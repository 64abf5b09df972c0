"""Poisson assembly on hierarchical spline spaces over spline-mapped domains."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bspline import KnotVector, QuadratureRule, TensorSpace
from .space import element_values


class GeometryError(ValueError):
    """Invalid geometry map (e.g. non-positive Jacobian)."""


class GeometryMap:
    """Tensor-product (optionally rational) spline map from ``[0,1]^d``.

    ``control`` has shape ``space.shape + (d,)``; ``weights`` (if given) has
    shape ``space.shape``.  ``GeometryMap.identity(d)`` is the unit cube.
    """

    def __init__(self, space=None, control=None, weights=None, dim=None):
        self.space = space
        self.control = None if control is None else np.asarray(control, dtype=float)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        if space is None:
            self.dim = int(dim)
        else:
            self.dim = space.dim
            if self.control.shape != space.shape + (self.dim,):
                raise GeometryError("control net does not match the space")
            if self.weights is not None and np.any(self.weights <= 0):
                raise GeometryError("weights must be positive")

    @classmethod
    def identity(cls, dim):
        return cls(dim=dim)

    @property
    def is_identity(self):
        return self.space is None

    @classmethod
    def from_file(cls, path):
        """Read ``d p1..pd`` / knot lines / control rows ``x y [z] [w]``."""
        lines = [ln.split() for ln in Path(path).read_text().splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
        head = [int(v) for v in lines[0]]
        d, degs = head[0], head[1:]
        if len(degs) != d:
            raise GeometryError("header must list one degree per direction")
        kvs = [KnotVector(p, tuple(float(v) for v in lines[1 + k])) for k, p in enumerate(degs)]
        space = TensorSpace(kvs)
        rows = np.array([[float(v) for v in ln] for ln in lines[1 + d:]])
        if len(rows) != space.size:
            raise GeometryError(f"expected {space.size} control points, got {len(rows)}")
        if rows.shape[1] == d:
            weights = None
        elif rows.shape[1] == d + 1:
            weights = rows[:, d].reshape(space.shape)
        else:
            raise GeometryError("control rows must have d or d+1 entries")
        return cls(space, rows[:, :d].reshape(space.shape + (d,)), weights)

    def to_text(self):
        if self.is_identity:
            raise GeometryError("identity map has no control net")
        out = [" ".join(map(str, (self.dim,) + self.space.degree))]
        for kv in self.space.kvs:
            out.append(" ".join(f"{k:.17g}" for k in kv.knots))
        pts = self.control.reshape(-1, self.dim)
        w = None if self.weights is None else self.weights.ravel()
        for i, p in enumerate(pts):
            vals = list(p) + ([] if w is None else [w[i]])
            out.append(" ".join(f"{v:.17g}" for v in vals))
        return "\n".join(out) + "\n"

    def evaluate(self, x, nders=1):
        """Map values ``(n, d)``, Jacobians ``(n, d, d)`` (``J[c, a] =
        dF_c/dx_a``) and, for ``nders=2``, Hessians ``(n, d, d, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        if self.is_identity:
            out = [x.copy(), np.broadcast_to(np.eye(d), (n, d, d)).copy()]
            if nders >= 2:
                out.append(np.zeros((n, d, d, d)))
            return tuple(out)
        ids = np.arange(self.space.size)
        P = self.control.reshape(-1, d)
        w = np.ones(len(ids)) if self.weights is None else self.weights.ravel()
        B = self.space.eval_functions(x, ids, 0)
        G = self.space.eval_functions(x, ids, 1)
        W = B @ w
        N = B @ (w[:, None] * P)
        dW = np.einsum("nia,i->na", G, w)
        dN = np.einsum("nia,ic->nca", G, w[:, None] * P)
        F = N / W[:, None]
        J = (dN - F[:, :, None] * dW[:, None, :]) / W[:, None, None]
        out = [F, J]
        if nders >= 2:
            H = self.space.eval_functions(x, ids, 2)
            d2W = np.einsum("niab,i->nab", H, w)
            d2N = np.einsum("niab,ic->ncab", H, w[:, None] * P)
            Hs = (d2N - J[:, :, :, None] * dW[:, None, None, :]
                  - J[:, :, None, :] * dW[:, None, :, None]
                  - F[:, :, None, None] * d2W[:, None, :, :]) / W[:, None, None, None]
            out.append(Hs)
        return tuple(out)


def _chunks(n, per_element):
    size = max(1, int(4_000_000 // max(per_element, 1)))
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def level_quadrature(space, quad, geom, level, elements, nders=1):
    """Basis data and geometric factors at quadrature points of level elements.

    Returns ``(tensor_ids, positions, values, grads, weights, X, extra)`` where
    values are ``(ne, nq, nloc)``, physical gradients ``(ne, nq, nloc, d)``,
    weights include the Jacobian determinant, and ``extra`` holds the
    Laplacians ``(ne, nq, nloc)`` when ``nders == 2``.
    """
    lspace = space.mesh.space(level)
    d = lspace.dim
    data, Xp = element_values(lspace, elements, quad, nders=nders)
    ne, nq = Xp.shape[:2]
    _, wref = quad.points()
    b = lspace.element_bounds(elements)
    vol = np.prod(b[:, :, 1] - b[:, :, 0], axis=1)
    vals = data[(0,) * d]
    grads = np.stack([data[tuple(int(j == k) for j in range(d))] for k in range(d)], axis=-1)
    weights = wref[None, :] * vol[:, None]
    extra = None
    if geom is None or geom.is_identity:
        if nders >= 2:
            extra = sum(data[tuple(2 * int(j == k) for j in range(d))] for k in range(d))
    else:
        out = geom.evaluate(Xp.reshape(-1, d), nders=nders)
        J = out[1].reshape(ne, nq, d, d)
        det = np.linalg.det(J)
        if np.any(det <= 0):
            bad = np.nonzero(np.any(det <= 0, axis=1))[0][0]
            raise GeometryError(f"non-positive Jacobian on level-{level} element "
                                f"{int(elements[bad])}")
        Jinv = np.linalg.inv(J)  # Jinv[a, c] = d x_a / d F_c
        pgrad = np.einsum("eqia,eqac->eqic", grads, Jinv)
        if nders >= 2:
            Hs = out[2].reshape(ne, nq, d, d, d)
            Hp = np.empty(vals.shape + (d, d))
            for a in range(d):
                for bb in range(d):
                    key = [0] * d
                    key[a] += 1
                    key[bb] += 1
                    Hp[..., a, bb] = data[tuple(key)]
            # remove the map curvature term, then transform both indices
            Hp = Hp - np.einsum("eqic,eqcab->eqiab", pgrad, Hs)
            Hx = np.einsum("eqac,eqiab,eqbd->eqicd", Jinv, Hp, Jinv)
            extra = np.einsum("eqicc->eqi", Hx)
        grads = pgrad
        weights = weights * det
    tids, pos = space.element_data(level, elements)
    return tids, pos, vals, grads, weights, Xp, extra


def _level_assemble(space, geom, quad, level, kinds, f=None, order=None):
    """Level contributions over the active level elements (relevant rows)."""
    act = space.mesh.active_elements[level]
    if order is not None:
        act = act[order(len(act))]
    nrel = len(space.levels[level].relevant)
    nloc = int(np.prod([p + 1 for p in space.degree]))
    nq = int(np.prod(quad.order))
    mats = {k: sp.csr_matrix((nrel, nrel)) for k in kinds if k != "rhs"}
    rhs = np.zeros(nrel)
    for ch in _chunks(len(act), nloc * nloc + nq * nloc * space.dim * 4):
        el = act[ch]
        _, pos, vals, grads, w, X, _ = level_quadrature(space, quad, geom, level, el)
        ne = len(el)
        rows = np.repeat(pos, nloc, axis=1).ravel()
        cols = np.tile(pos, (1, nloc)).ravel()
        if "stiffness" in mats:
            Gw = grads * w[:, :, None, None]
            Gt = np.transpose(Gw, (0, 2, 1, 3)).reshape(ne, nloc, -1)
            G2 = np.transpose(grads, (0, 2, 1, 3)).reshape(ne, nloc, -1)
            Ke = Gt @ np.transpose(G2, (0, 2, 1))
            mats["stiffness"] = mats["stiffness"] + sp.csr_matrix(
                (Ke.ravel(), (rows, cols)), shape=(nrel, nrel))
        if "mass" in mats:
            Vt = np.transpose(vals * w[:, :, None], (0, 2, 1))
            Me = Vt @ vals
            mats["mass"] = mats["mass"] + sp.csr_matrix(
                (Me.ravel(), (rows, cols)), shape=(nrel, nrel))
        if "rhs" in kinds:
            fx = np.asarray(f(X.reshape(-1, space.dim) if geom is None or geom.is_identity
                              else geom.evaluate(X.reshape(-1, space.dim), nders=1)[0]),
                            dtype=float).reshape(ne, -1)
            be = np.einsum("eqi,eq->ei", vals, fx * w)
            rhs += np.bincount(pos.ravel(), weights=be.ravel(), minlength=nrel)
    return mats, rhs


def assemble(space, geom=None, quad=None, kinds=("stiffness",), f=None, order=None):
    """Assemble global matrices/vectors over all functions (incl. boundary).

    ``kinds`` may contain ``'stiffness'``, ``'mass'`` and ``'rhs'`` (the latter
    needs ``f``, a function of physical points ``(n, d)``).  ``order`` is an
    optional callable returning an element permutation for each level.
    """
    if quad is None:
        quad = QuadratureRule.for_degree(space.degree)
    out = {k: None for k in kinds}
    N = space.size
    for l in range(space.nlevels):
        if len(space.mesh.active_elements[l]) == 0:
            continue
        mats, rhs = _level_assemble(space, geom, quad, l, kinds, f, order)
        D = space.level_matrix(l)
        for k, K in mats.items():
            contrib = (D.T @ K @ D).tocsr()
            out[k] = contrib if out[k] is None else out[k] + contrib
        if "rhs" in kinds:
            contrib = D.T @ rhs
            out["rhs"] = contrib if out["rhs"] is None else out["rhs"] + contrib
    for k in kinds:
        if out[k] is None:
            out[k] = np.zeros(N) if k == "rhs" else sp.csr_matrix((N, N))
        elif k != "rhs":
            out[k] = _coalesce(out[k])
    return out


def _coalesce(A):
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def assemble_stiffness(space, geom=None, quad=None, interior=True):
    A = assemble(space, geom, quad, ("stiffness",))["stiffness"]
    return _restrict(space, A) if interior else A


def assemble_mass(space, geom=None, quad=None, interior=True):
    M = assemble(space, geom, quad, ("mass",))["mass"]
    return _restrict(space, M) if interior else M


def assemble_rhs(space, geom, quad, f, interior=True):
    b = assemble(space, geom, quad, ("rhs",), f=f)["rhs"]
    return b[space.interior] if interior else b


def _restrict(space, A):
    idx = space.interior
    return _coalesce(A[idx][:, idx])


@dataclass
class LinearSystem:
    """Interior stiffness system ``A u = b`` with its DOF map."""

    A: sp.csr_matrix
    b: np.ndarray
    dofs: np.ndarray  # global hierarchical ids of the interior unknowns

    def expand(self, u, size):
        full = np.zeros(size)
        full[self.dofs] = u
        return full


def build_system(space, geom=None, f=None, quad=None):
    """Stiffness (and load, if ``f`` given) with homogeneous Dirichlet
    conditions imposed by dropping boundary functions."""
    kinds = ("stiffness", "rhs") if f is not None else ("stiffness",)
    out = assemble(space, geom, quad, kinds, f=f)
    idx = space.interior
    A = _coalesce(out["stiffness"][idx][:, idx])
    b = out["rhs"][idx] if f is not None else np.zeros(len(idx))
    return LinearSystem(A, b, idx)


def solve_direct(system):
    """Sparse direct solve of an interior system."""
    A = system.A.tocsc()
    if A.shape[0] == 0:
        return np.zeros(0)
    return spla.spsolve(A, system.b)


def level_coefficients(space, u, level):
    """Coefficients of a global function w.r.t. the relevant level B-splines
    (exact on active elements of the level)."""
    return space.level_matrix(level) @ u


def evaluate_solution(space, u, x, geom=None, deriv_order=0):
    """Evaluate ``sum_i u_i phi_i`` at parametric points ``x`` (values, or
    parametric gradients for ``deriv_order=1``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lev, _ = space.locate(x)
    shape = (len(x),) + ((space.dim,) if deriv_order == 1 else ())
    out = np.zeros(shape)
    for l in np.unique(lev):
        sel = np.nonzero(lev == l)[0]
        c = level_coefficients(space, u, l)
        ids = space.levels[l].relevant
        vals = space.mesh.space(l).eval_functions(x[sel], ids, deriv_order)
        out[sel] = np.tensordot(vals, c, axes=([1], [0])) if deriv_order else vals @ c
    return out


def error_norms(space, u, exact, grad_exact, quad=None, extra=2):
    """L2 and H1-seminorm errors on the identity geometry."""
    if quad is None:
        quad = QuadratureRule.for_degree(space.degree, extra=extra)
    e0 = e1 = 0.0
    for l in range(space.nlevels):
        act = space.mesh.active_elements[l]
        if len(act) == 0:
            continue
        c = level_coefficients(space, u, l)
        for ch in _chunks(len(act), 4000):
            _, pos, vals, grads, w, X, _ = level_quadrature(space, quad, None, l, act[ch])
            uc = c[pos]
            uh = np.einsum("eqi,ei->eq", vals, uc)
            gh = np.einsum("eqid,ei->eqd", grads, uc)
            Xf = X.reshape(-1, space.dim)
            ue = np.asarray(exact(Xf)).reshape(uh.shape)
            ge = np.asarray(grad_exact(Xf)).reshape(gh.shape)
            e0 += np.sum(w * (uh - ue) ** 2)
            e1 += np.sum(w * np.sum((gh - ge) ** 2, axis=-1))
    return np.sqrt(e0), np.sqrt(e1)
