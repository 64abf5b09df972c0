"""Hierarchical (HB) and truncated hierarchical (THB) B-spline spaces.

The basis is built level by level.  ``F^l`` denotes the function list after
processing levels ``0..l``: the active functions of levels below ``l``
followed by all level-l B-splines supported in ``Omega^l``.  Every function
of ``F^l`` is stored through its coefficients with respect to the level-l
B-splines whose support meets ``Omega^l`` (the *relevant* rows); these are
the matrices ``C^l``.  Global numbering is level-major and lexicographic
within a level, and ``F^l`` is always numbered consistently with it.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .bspline import basis_ders, subdivision_matrix, subdivision_matrix_1d
from .mesh import _member, box_counts, _box_product


def _support_boxes(space, ids):
    """Per-direction inclusive element ranges of function supports."""
    mi = np.unravel_index(np.asarray(ids, dtype=np.int64), space.shape)
    lo = np.stack([kv.support_elements[i, 0] for kv, i in zip(space.kvs, mi)], axis=-1)
    hi = np.stack([kv.support_elements[i, 1] for kv, i in zip(space.kvs, mi)], axis=-1)
    return lo, hi


def _padded_rows(M):
    """Dense ``(nrows, w)`` column/value arrays of a CSR matrix (zero padded)."""
    M = M.tocsr()
    nnz = np.diff(M.indptr)
    w = int(nnz.max()) if len(nnz) else 0
    cols = np.zeros((M.shape[0], w), dtype=np.int64)
    vals = np.zeros((M.shape[0], w))
    pos = np.arange(w)[None, :] < nnz[:, None]
    cols[pos] = M.indices
    vals[pos] = M.data
    return cols, vals


def restricted_subdivision(coarse, fine, rows, cols):
    """Rows ``rows`` and columns ``cols`` (sorted flat ids) of the tensor
    subdivision matrix from ``coarse`` to ``fine`` without forming it."""
    mi = np.unravel_index(rows, fine.shape)
    acc_c = np.zeros((len(rows), 1), dtype=np.int64)
    acc_v = np.ones((len(rows), 1))
    for k in range(fine.dim):
        c, v = _padded_rows(subdivision_matrix_1d(coarse.kvs[k], fine.kvs[k]))
        ck, vk = c[mi[k]], v[mi[k]]
        acc_c = (acc_c[:, :, None] * coarse.shape[k] + ck[:, None, :]).reshape(len(rows), -1)
        acc_v = (acc_v[:, :, None] * vk[:, None, :]).reshape(len(rows), -1)
    keep = acc_v != 0
    r = np.broadcast_to(np.arange(len(rows))[:, None], keep.shape)[keep]
    cflat = acc_c[keep]
    pos = np.searchsorted(cols, cflat)
    ok = (pos < len(cols)) & (cols[np.minimum(pos, len(cols) - 1)] == cflat)
    return sp.csr_matrix((acc_v[keep][ok], (r[ok], pos[ok])), shape=(len(rows), len(cols)))


def tensor_boundary(space, ids):
    """Whether level functions touch the boundary (first/last index)."""
    mi = np.unravel_index(np.asarray(ids, dtype=np.int64), space.shape)
    out = np.zeros(np.shape(ids), dtype=bool)
    for i, n in zip(mi, space.shape):
        out |= (i == 0) | (i == n - 1)
    return out


@dataclass
class LevelData:
    """Per-level bookkeeping of a hierarchical space."""

    relevant: np.ndarray     # level functions whose support meets Omega^l
    in_omega: np.ndarray     # level functions supported in Omega^l
    removed_mask: np.ndarray  # over in_omega: supported in Omega^{l+1}
    C: sp.csr_matrix         # relevant rows x F^l columns
    raw: sp.csr_matrix = None  # subdivided F^{l-1} before truncation


@dataclass
class HierFunction:
    """Description of one global basis function."""

    index: int
    level: int
    mother: int
    interior: bool
    support: np.ndarray  # flat level elements of the mother support


class HierarchicalSpace:
    """HB (``kind='hb'``) or THB (``kind='thb'``) basis on a hierarchical mesh."""

    def __init__(self, mesh, kind="thb"):
        kind = str(kind).lower()
        if kind not in ("hb", "thb"):
            raise ValueError("basis kind must be 'hb' or 'thb'")
        self.mesh = mesh
        self.kind = kind
        self.levels = []
        offsets = [0]
        for l in range(mesh.nlevels):
            lev = self._classify(l)
            if l == 0:
                n = len(lev.in_omega)
                lev.C = sp.identity(n, format="csr")
            else:
                prev = self.levels[-1]
                M = restricted_subdivision(mesh.space(l - 1), mesh.space(l),
                                           lev.relevant, prev.relevant)
                raw = (M @ prev.C).tocsr()
                raw.eliminate_zeros()
                lev.raw = raw
                old = raw[:, self._survivors(l - 1, prev, offsets[l - 1])]
                if kind == "thb":
                    keep = (~_member(lev.in_omega, lev.relevant)).astype(float)
                    old = (sp.diags(keep) @ old).tocsr()
                    old.eliminate_zeros()
                pos = np.searchsorted(lev.relevant, lev.in_omega)
                new = sp.csr_matrix((np.ones(len(pos)), (pos, np.arange(len(pos)))),
                                    shape=(len(lev.relevant), len(pos)))
                lev.C = sp.hstack([old, new], format="csr")
            self.levels.append(lev)
            offsets.append(offsets[-1] + int((~lev.removed_mask).sum()))
        self.offsets = np.array(offsets)

    # ---- construction helpers -----------------------------------------
    def _classify(self, l):
        mesh = self.mesh
        space = mesh.space(l)
        omega = mesh.omega[l]
        shape = mesh.grid_shape(l)
        emi = np.array(np.unravel_index(omega, shape))
        emin, emax = emi.min(axis=1), emi.max(axis=1)
        lo = [kv.first_function[a] for kv, a in zip(space.kvs, emin)]
        hi = [kv.first_function[b] + kv.p for kv, b in zip(space.kvs, emax)]
        cand = _box_product(np.array(lo), np.array(hi), space.shape)
        slo, shi = _support_boxes(space, cand)
        vol = np.prod(shi - slo + 1, axis=1)
        cnt = box_counts(omega, shape, slo, shi)
        relevant = cand[cnt > 0]
        inside = cnt == vol
        in_omega = cand[inside]
        refined = mesh.refined(l)
        if len(refined):
            removed = box_counts(refined, shape, slo[inside], shi[inside]) == vol[inside]
        else:
            removed = np.zeros(len(in_omega), dtype=bool)
        return LevelData(relevant, in_omega, removed, None)

    @staticmethod
    def _survivors(l, lev, offset):
        """Columns of ``F^l`` that are kept in ``F^{l+1}``."""
        return np.concatenate([np.arange(offset),
                               offset + np.nonzero(~lev.removed_mask)[0]])

    def survivors(self, l):
        return self._survivors(l, self.levels[l], self.offsets[l])

    # ---- sizes and metadata -------------------------------------------
    @property
    def nlevels(self):
        return self.mesh.nlevels

    @property
    def degree(self):
        return self.mesh.degree

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def size(self):
        return int(self.offsets[-1])

    def intermediate_size(self, l):
        """Number of functions in ``F^l``."""
        return int(self.offsets[l] + len(self.levels[l].in_omega))

    def active_functions(self, l):
        """Flat level-l ids of the active level-l functions."""
        lev = self.levels[l]
        return lev.in_omega[~lev.removed_mask]

    @cached_property
    def function_level(self):
        return np.repeat(np.arange(self.nlevels), np.diff(self.offsets))

    @cached_property
    def function_mother(self):
        return np.concatenate([self.active_functions(l) for l in range(self.nlevels)])

    @cached_property
    def boundary(self):
        """Whether each global function has a nonzero boundary trace."""
        return np.concatenate([tensor_boundary(self.mesh.space(l), self.active_functions(l))
                               for l in range(self.nlevels)])

    @cached_property
    def interior(self):
        return np.nonzero(~self.boundary)[0]

    def intermediate_levels(self, l):
        """Level of origin of every function of ``F^l``."""
        return np.concatenate([self.function_level[: self.offsets[l]],
                               np.full(len(self.levels[l].in_omega), l)])

    def intermediate_mothers(self, l):
        return np.concatenate([self.function_mother[: self.offsets[l]], self.levels[l].in_omega])

    def intermediate_boundary(self, l):
        return np.concatenate([self.boundary[: self.offsets[l]],
                               tensor_boundary(self.mesh.space(l), self.levels[l].in_omega)])

    def function(self, i):
        l = int(self.function_level[i])
        mother = int(self.function_mother[i])
        return HierFunction(int(i), l, mother, not bool(self.boundary[i]),
                            self.mesh.space(l).function_support(mother))

    # ---- level representations ----------------------------------------
    def level_matrix(self, l):
        """``D^l``: relevant level-l rows x global columns.  Exact on the
        active level-l elements."""
        lev = self.levels[l]
        D = lev.C[:, self.survivors(l)]
        return sp.csr_matrix((D.data, D.indices, D.indptr), shape=(D.shape[0], self.size))

    def transfer(self, l):
        """Matrix expressing ``F^l`` functions in the ``F^{l+1}`` basis."""
        lev, nxt = self.levels[l], self.levels[l + 1]
        surv = self.survivors(l)
        nf, nn = self.intermediate_size(l), self.intermediate_size(l + 1)
        off = self.offsets[l + 1]
        rows = nxt.raw[np.searchsorted(nxt.relevant, nxt.in_omega)]
        if self.kind == "hb":
            mask = np.ones(nf)
            mask[surv] = 0.0
            rows = (rows @ sp.diags(mask)).tocsr()
            rows.eliminate_zeros()
        rows = rows.tocoo()
        ident = (np.arange(len(surv)), surv)
        r = np.concatenate([ident[0], rows.row + off])
        c = np.concatenate([ident[1], rows.col])
        v = np.concatenate([np.ones(len(surv)), rows.data])
        return sp.csr_matrix((v, (r, c)), shape=(nn, nf))

    def truncate(self, k, coeffs):
        """Zero level-k coefficients of B-splines supported in ``Omega^k``."""
        out = np.array(coeffs, dtype=float, copy=True)
        if k < self.nlevels:
            out[self.levels[k].in_omega] = 0.0
        return out

    def finest_coefficients(self):
        """All basis functions on the finest tensor level (dense rows).

        Built independently of the restricted level matrices by cascading full
        subdivision matrices; meant for small meshes.
        """
        mesh = self.mesh
        Cf = sp.identity(mesh.space(0).size, format="csr")
        Cf = Cf[:, self.levels[0].in_omega]
        for l in range(1, self.nlevels):
            M = subdivision_matrix(mesh.space(l - 1), mesh.space(l))
            old = (M @ Cf[:, self.survivors(l - 1)]).tocsr()
            if self.kind == "thb":
                keep = np.ones(mesh.space(l).size)
                keep[self.levels[l].in_omega] = 0.0
                old = (sp.diags(keep) @ old).tocsr()
            n = mesh.space(l).size
            ins = self.levels[l].in_omega
            new = sp.csr_matrix((np.ones(len(ins)), (ins, np.arange(len(ins)))), shape=(n, len(ins)))
            Cf = sp.hstack([old, new], format="csr")
        Cf = Cf[:, self.survivors(self.nlevels - 1)]
        Cf.eliminate_zeros()
        return Cf

    # ---- evaluation ------------------------------------------------------
    def element_data(self, l, elements):
        """Tensor functions alive on each element: flat ids ``(ne, nloc)`` and
        their positions among the relevant rows of level l."""
        space = self.mesh.space(l)
        mi = np.unravel_index(np.asarray(elements, dtype=np.int64), space.nel)
        acc = np.zeros((len(mi[0]), 1), dtype=np.int64)
        for k, kv in enumerate(space.kvs):
            f = kv.first_function[mi[k]][:, None] + np.arange(kv.p + 1)[None, :]
            acc = (acc[:, :, None] * kv.n + f[:, None, :]).reshape(len(mi[0]), -1)
        rel = self.levels[l].relevant
        return acc, np.searchsorted(rel, acc)

    def evaluate_all(self, level, element, points, method="level"):
        """All global functions not vanishing on an active element.

        ``points`` are local coordinates in ``[0,1]^d``.  Returns ``(ids,
        values, gradients)`` with values ``(npts, nf)`` and gradients
        ``(npts, nf, d)`` in parametric coordinates.  ``method='finest'``
        evaluates through the finest-level representation instead.
        """
        if not self.mesh.is_active(level, [element])[0]:
            raise ValueError("element is not active")
        points = np.atleast_2d(points)
        bnd = self.mesh.element_bounds(level, [element])[0]
        x = bnd[:, 0] + points * (bnd[:, 1] - bnd[:, 0])
        if method == "finest":
            L = self.nlevels - 1
            fine = self.mesh.space(L)
            Cf = self.finest_coefficients()
            # fine functions alive anywhere in this element
            desc = np.array([element])
            for k in range(level, L):
                desc = self.mesh.children(k, desc)
            ids = np.unique(self.element_data(L, desc)[0])
            B = fine.eval_functions(x, ids, 0)
            G = fine.eval_functions(x, ids, 1)
            sub = Cf[ids].toarray()
        else:
            space = self.mesh.space(level)
            ids, pos = self.element_data(level, [element])
            ids = ids[0]
            B = space.eval_functions(x, ids, 0)
            G = space.eval_functions(x, ids, 1)
            sub = self.level_matrix(level)[pos[0]].toarray()
        alive = np.nonzero(np.any(sub != 0, axis=0))[0]
        sub = sub[:, alive]
        vals = B @ sub
        grads = np.einsum("pfd,fg->pgd", G, sub)
        return alive, vals, grads

    def locate(self, x):
        """Active element ``(level, id)`` containing each point."""
        x = np.atleast_2d(x)
        lev = np.full(len(x), -1)
        el = np.zeros(len(x), dtype=np.int64)
        for l in range(self.nlevels - 1, -1, -1):
            todo = lev < 0
            if not todo.any():
                break
            e = self.mesh.space(l).find_element(x[todo])
            hit = self.mesh.is_active(l, e)
            idx = np.nonzero(todo)[0][hit]
            lev[idx] = l
            el[idx] = e[hit]
        return lev, el

    def evaluate(self, x, deriv_order=0):
        """Values (``deriv_order=0``), gradients (1) or Hessians (2) of all
        global functions at points ``x``; returns a dense array with the
        function axis second."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lev, _ = self.locate(x)
        shape = (len(x), self.size) + (self.dim,) * deriv_order
        out = np.zeros(shape)
        for l in np.unique(lev):
            sel = np.nonzero(lev == l)[0]
            space = self.mesh.space(l)
            D = self.level_matrix(l)
            ids = self.levels[l].relevant
            vals = space.eval_functions(x[sel], ids, deriv_order)
            out[sel] = np.moveaxis(np.tensordot(vals, D.toarray(), axes=([1], [0])), -1, 1)
        return out

    # ---- admissibility by functions -----------------------------------
    def level_span(self):
        """For every active element, the number of consecutive levels of the
        basis functions that do not vanish on it; returns per-level arrays."""
        out = []
        flev = self.function_level
        for l in range(self.nlevels):
            act = self.mesh.active_elements[l]
            if len(act) == 0:
                out.append(np.zeros(0, dtype=int))
                continue
            D = self.level_matrix(l).tocoo()
            rowmin = np.full(D.shape[0], l)
            np.minimum.at(rowmin, D.row, flev[D.col])
            _, pos = self.element_data(l, act)
            out.append(l - rowmin[pos].min(axis=1) + 1)
        return out

    def is_admissible(self, m):
        """Whether functions alive on any element span at most ``m`` levels."""
        return all(np.all(s <= m) for s in self.level_span())

    # ---- extended supports (THB only) ----------------------------------
    def esupp(self, i):
        """Active elements ``{level: ids}`` covering the support of the
        once-truncated mother of global THB function ``i``."""
        if self.kind != "thb":
            raise NotImplementedError("extended supports are defined for THB only")
        l = int(self.function_level[i])
        mother = int(self.function_mother[i])
        mesh = self.mesh
        supp = mesh.space(l).function_support(mother)
        res = {l: supp[mesh.is_active(l, supp)]}
        if l + 1 < self.nlevels:
            M = subdivision_matrix(mesh.space(l), mesh.space(l + 1))
            c = np.asarray(M[:, mother].todense()).ravel()
            c[self.levels[l + 1].in_omega] = 0.0
            fine = mesh.space(l + 1)
            cells = np.unique(np.concatenate(
                [fine.function_support(j) for j in np.nonzero(c)[0]] or [np.zeros(0, int)]))
            for k in range(l + 1, self.nlevels):
                act = mesh.active_elements[k]
                anc = mesh.ancestors(k, act, l + 1)
                res[k] = act[_member(cells, anc)]
        return {k: v for k, v in res.items() if len(v)}

    @cached_property
    def _esupp_all(self):
        return [self.esupp(i) for i in range(self.size)]

    def _overlaps(self, region, level, element):
        """Whether an element-set region contains ``element`` or one of its
        descendants/ancestors."""
        for k, ids in region.items():
            if k >= level:
                if np.any(self.mesh.ancestors(k, ids, level) == element):
                    return True
            elif np.any(ids == self.mesh.ancestors(level, [element], k)[0]):
                return True
        return False

    def S_star(self, level, element, return_functions=False):
        """Union of extended supports meeting the given active element."""
        res, funcs = {}, []
        for i, reg in enumerate(self._esupp_all):
            if self._overlaps(reg, level, element):
                funcs.append(i)
                for k, ids in reg.items():
                    res[k] = np.union1d(res.get(k, np.zeros(0, dtype=np.int64)), ids)
        if return_functions:
            return res, np.array(funcs)
        return res

    def S_star_region(self, elements):
        """Union of :meth:`S_star` over a list of ``(level, id)`` elements."""
        res = {}
        for l, e in elements:
            for k, ids in self.S_star(l, e).items():
                res[k] = np.union1d(res.get(k, np.zeros(0, dtype=np.int64)), ids)
        return res

    # ---- quasi-interpolation --------------------------------------------
    def qi_element(self, i):
        """Element used by the dual functional of function ``i``: the
        lexicographically first active mother-support element of its level."""
        f = self.function(i)
        act = f.support[self.mesh.is_active(f.level, f.support)]
        return int(act.min())

    def hierarchical_quasi_interpolant(self, f):
        """Coefficients of the hierarchical quasi-interpolant of ``f``."""
        if self.kind != "thb":
            raise NotImplementedError("quasi-interpolant is defined for THB")
        from .bspline import _element_projection
        coeffs = np.empty(self.size)
        cache = {}
        for i in range(self.size):
            l = int(self.function_level[i])
            q = self.qi_element(i)
            key = (l, q)
            if key not in cache:
                ids, c = _element_projection(self.mesh.space(l), q, f)
                cache[key] = dict(zip(ids.tolist(), c))
            coeffs[i] = cache[key][int(self.function_mother[i])]
        return coeffs


def element_values(level_space, elements, quad, nders=1):
    """Tensor basis values/derivatives at quadrature points of elements.

    Returns a dict keyed by per-direction derivative orders with arrays
    ``(ne, nq, nloc)`` and the physical quadrature points ``(ne, nq, d)``.
    """
    mi = np.unravel_index(np.asarray(elements, dtype=np.int64), level_space.nel)
    ne = len(mi[0])
    acc = {(): np.ones((ne, 1, 1))}
    pts = []
    for k, kv in enumerate(level_space.kvs):
        xq, _ = quad.nodes_weights[k]
        a = kv.breaks[mi[k]]
        b = kv.breaks[mi[k] + 1]
        x = a[:, None] + xq[None, :] * (b - a)[:, None]  # (ne, qk)
        f, v = basis_ders(kv, x.ravel(), nders, element=np.repeat(mi[k], len(xq)))
        v = v.reshape(ne, len(xq), nders + 1, kv.p + 1)
        pts.append(x)
        new = {}
        for key, val in acc.items():
            for o in range(nders + 1):
                if sum(key) + o <= nders:
                    # outer product over quadrature and local function axes
                    t = val[:, :, None, :, None] * v[:, None, :, o, None, :]
                    new[key + (o,)] = t.reshape(ne, val.shape[1] * len(xq), -1)
        acc = new
    grids = np.meshgrid(*[np.arange(p.shape[1]) for p in pts], indexing="ij")
    X = np.stack([p[:, g.ravel()] for p, g in zip(pts, grids)], axis=-1)
    return acc, X

