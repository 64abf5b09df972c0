"""Hierarchical meshes built by dyadic refinement of a tensor grid.

Level ``l`` uses the grid of ``base`` refined ``l`` times.  The nested
subdomain ``Omega^l`` is stored as a sorted array of flat (C-ordered) level-l
element ids; it is always a union of children of level-(l-1) elements, so
parent/child maps reduce to halving or doubling multi-indices.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from .bspline import KnotVector, TensorSpace


class AdmissibilityClass:
    """Admissibility kind ``'H'`` or ``'T'`` together with the class ``m``."""

    def __init__(self, kind, m):
        kind = str(kind).upper()
        if kind not in ("H", "T"):
            raise ValueError("admissibility kind must be 'H' or 'T'")
        if int(m) < 2:
            raise ValueError("admissibility class m must be at least 2")
        self.kind = kind
        self.m = int(m)

    @classmethod
    def parse(cls, text):
        """Parse ``'T:2'`` style strings; ``'none'`` gives ``None``."""
        if text is None or str(text).lower() == "none":
            return None
        kind, _, m = str(text).partition(":")
        return cls(kind, int(m))

    def __repr__(self):
        return f"{self.kind}:{self.m}"

    def __eq__(self, other):
        return isinstance(other, AdmissibilityClass) and (self.kind, self.m) == (other.kind, other.m)


def _member(sorted_ids, q):
    """Boolean mask: which entries of ``q`` occur in ``sorted_ids``."""
    q = np.asarray(q)
    if len(sorted_ids) == 0:
        return np.zeros(q.shape, dtype=bool)
    pos = np.minimum(np.searchsorted(sorted_ids, q), len(sorted_ids) - 1)
    return sorted_ids[pos] == q


def _box_product(lo, hi, shape):
    """Flat ids of all cells in the boxes ``[lo, hi]`` (inclusive, per row)."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    out = []
    for a, b in zip(lo, hi):
        ranges = [np.arange(x, y + 1) for x, y in zip(a, b)]
        grid = np.meshgrid(*ranges, indexing="ij")
        out.append(np.ravel_multi_index([g.ravel() for g in grid], shape))
    if not out:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(out))


def box_counts(members, shape, lo, hi):
    """Number of cells of the sorted flat id set ``members`` inside every box
    ``[lo_i, hi_i]`` (inclusive multi-index corners, clipped to the grid).

    Uses a summed-area table over the bounding box of ``members``.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=np.int64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.int64))
    res = np.zeros(len(lo), dtype=np.int64)
    if len(members) == 0 or len(lo) == 0:
        return res
    d = len(shape)
    mi = np.array(np.unravel_index(members, shape))
    bmin = mi.min(axis=1)
    bmax = mi.max(axis=1)
    a = np.clip(lo - bmin, 0, bmax - bmin + 1)
    b = np.clip(hi - bmin + 1, 0, bmax - bmin + 1)
    b = np.maximum(a, b)
    mask = np.zeros(tuple(bmax - bmin + 1), dtype=np.int64)
    mask[tuple(mi - bmin[:, None])] = 1
    sat = mask
    for k in range(d):
        sat = np.cumsum(sat, axis=k)
    sat = np.pad(sat, [(1, 0)] * d)
    for corner in range(2 ** d):
        sel = [(corner >> k) & 1 for k in range(d)]
        idx = tuple(b[:, k] if sel[k] else a[:, k] for k in range(d))
        res += (-1) ** (d - sum(sel)) * sat[idx]
    return res


def boxes_inside(members, shape, lo, hi):
    """Whether every cell of each box ``[lo_i, hi_i]`` belongs to ``members``."""
    lo = np.atleast_2d(np.asarray(lo, dtype=np.int64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.int64))
    return box_counts(members, shape, lo, hi) == np.prod(hi - lo + 1, axis=1)


class HierarchicalMesh:
    """Hierarchical mesh over the tensor grid of ``base``.

    ``omega[l]`` holds the sorted flat level-l element ids of ``Omega^l``;
    ``omega[0]`` is always the whole level-0 grid and trailing empty levels
    are dropped.
    """

    def __init__(self, base, omega=None):
        self.base = base
        if omega is None:
            omega = [np.arange(base.num_elements)]
        omega = [np.unique(np.asarray(o, dtype=np.int64)) for o in omega]
        while len(omega) > 1 and len(omega[-1]) == 0:
            omega.pop()
        if len(omega[0]) != base.num_elements:
            raise ValueError("Omega^0 must be the whole domain")
        self.omega = omega
        self._spaces = [base]
        self._check_nested()

    @classmethod
    def uniform(cls, degree, nel):
        return cls(TensorSpace.uniform(degree, nel))

    # ---- level grids -------------------------------------------------
    @property
    def dim(self):
        return self.base.dim

    @property
    def degree(self):
        return self.base.degree

    @property
    def nlevels(self):
        return len(self.omega)

    def space(self, level):
        """Tensor B-spline space of the given level."""
        while len(self._spaces) <= level:
            self._spaces.append(self._spaces[-1].refine())
        return self._spaces[level]

    def grid_shape(self, level):
        return tuple(n << level for n in self.base.nel)

    def h(self, level):
        return self.base.h / 2 ** level

    # ---- parent / child arithmetic ----------------------------------
    def children(self, level, ids):
        """Flat level-(l+1) ids of all children of level-l elements."""
        ids = np.asarray(ids, dtype=np.int64)
        mi = np.array(np.unravel_index(ids, self.grid_shape(level)))
        out = []
        for off in np.ndindex(*(2,) * self.dim):
            out.append(np.ravel_multi_index(tuple(2 * mi + np.array(off)[:, None]),
                                            self.grid_shape(level + 1)))
        return np.sort(np.concatenate(out)) if out else ids

    def ancestors(self, level, ids, k):
        """Level-k ancestors (k <= level) of level-l elements, elementwise."""
        if k > level:
            raise ValueError("ancestor level above element level")
        ids = np.asarray(ids, dtype=np.int64)
        mi = np.array(np.unravel_index(ids, self.grid_shape(level)))
        return np.ravel_multi_index(tuple(mi >> (level - k)), self.grid_shape(k))

    def parents(self, level, ids):
        return self.ancestors(level, ids, level - 1)

    # ---- active elements --------------------------------------------
    def refined(self, level):
        """Level-l elements whose children form ``Omega^{l+1}``."""
        if level + 1 >= self.nlevels:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.parents(level + 1, self.omega[level + 1]))

    def active(self, level):
        om = self.omega[level]
        return om[~_member(self.refined(level), om)]

    @cached_property
    def active_elements(self):
        return [self.active(l) for l in range(self.nlevels)]

    @property
    def num_active(self):
        return sum(len(a) for a in self.active_elements)

    def is_active(self, level, ids):
        if level >= self.nlevels:
            return np.zeros(np.shape(ids), dtype=bool)
        return _member(self.active_elements[level], ids)

    def element_bounds(self, level, ids):
        return self.space(level).element_bounds(ids)

    def _check_nested(self):
        for l in range(1, self.nlevels):
            par = self.parents(l, self.omega[l])
            if not np.all(_member(self.omega[l - 1], par)):
                raise ValueError(f"Omega^{l} is not contained in Omega^{l - 1}")
            if not np.array_equal(self.children(l - 1, np.unique(par)), self.omega[l]):
                raise ValueError(f"Omega^{l} is not a union of level-{l - 1} cells")

    def measure_check(self):
        """Total measure of all active elements (equals 1 for the unit cube)."""
        tot = 0.0
        for l, act in enumerate(self.active_elements):
            b = self.element_bounds(l, act)
            tot += np.prod(b[:, :, 1] - b[:, :, 0], axis=1).sum()
        return tot

    # ---- refinement -------------------------------------------------
    def refine_raw(self, marked):
        """Refine the marked active elements (``{level: ids}``)."""
        omega = [o.copy() for o in self.omega]
        for l, ids in marked.items():
            ids = np.unique(np.asarray(ids, dtype=np.int64))
            if len(ids) == 0:
                continue
            if not np.all(self.is_active(l, ids)):
                raise ValueError(f"marked level-{l} elements are not active")
            if l + 1 >= len(omega):
                omega.append(np.zeros(0, dtype=np.int64))
            omega[l + 1] = np.union1d(omega[l + 1], self.children(l, ids))
        return self._derived(omega)

    def _derived(self, omega):
        new = HierarchicalMesh(self.base, omega)
        new._spaces = list(self._spaces[: new.nlevels])
        return new

    # ---- support extensions and admissibility -------------------------
    def _extension_boxes(self, level, ids):
        """Per-direction inclusive element ranges of the support extension."""
        sp_ = self.space(level)
        mi = np.unravel_index(np.asarray(ids, dtype=np.int64), sp_.nel)
        lo, hi = [], []
        for kv, i in zip(sp_.kvs, mi):
            f = kv.first_function[i]
            lo.append(kv.support_elements[f, 0])
            hi.append(kv.support_elements[f + kv.p, 1])
        return np.stack(lo, axis=-1), np.stack(hi, axis=-1)

    def multilevel_support_extension(self, level, element, k):
        """Level-k elements in the support extension of the level-k ancestor
        of ``element`` (a level-l element)."""
        if not 0 <= k <= level:
            raise ValueError("need 0 <= k <= level")
        anc = self.ancestors(level, [element], k)
        lo, hi = self._extension_boxes(k, anc)
        return _box_product(lo, hi, self.grid_shape(k))

    def _in_aux(self, level, kind, ids):
        """Whether level-l elements ``ids`` lie in the auxiliary domain."""
        ids = np.asarray(ids, dtype=np.int64)
        if level >= self.nlevels:
            return np.zeros(len(ids), dtype=bool)
        if kind == "T":
            lo, hi = self._extension_boxes(level, ids)
            return boxes_inside(self.omega[level], self.grid_shape(level), lo, hi)
        if level == 0:
            return np.ones(len(ids), dtype=bool)
        par, inv = np.unique(self.parents(level, ids), return_inverse=True)
        lo, hi = self._extension_boxes(level - 1, par)
        ok = boxes_inside(self.refined(level - 1), self.grid_shape(level - 1), lo, hi)
        return ok[inv.ravel()]

    def aux_domain(self, level, kind):
        """Level-l elements of the auxiliary subdomain of kind ``'H'``/``'T'``."""
        kind = str(kind).upper()
        if level >= self.nlevels:
            return np.zeros(0, dtype=np.int64)
        om = self.omega[level]
        return om[self._in_aux(level, kind, om)]

    def is_strictly_admissible(self, adm):
        """Check ``Omega^l`` against the auxiliary domain of level l-m+1."""
        for l in range(adm.m, self.nlevels):
            j = l - adm.m + 1
            anc = np.unique(self.ancestors(l, self.omega[l], j))
            if not np.all(self._in_aux(j, adm.kind, anc)):
                return False
        return True

    def admissible_refine(self, marked, adm):
        """Refine marked active elements and close the result so that the
        mesh is strictly admissible of the given class."""
        for l, ids in marked.items():
            if len(ids) and not np.all(self.is_active(l, ids)):
                raise ValueError(f"marked level-{l} elements are not active")
        top = max([self.nlevels - 1] + [l + 1 for l, ids in marked.items() if len(ids)])
        req = [self.refined(l) for l in range(top)]
        for l, ids in marked.items():
            if len(ids):
                req[l] = np.union1d(req[l], np.asarray(ids, dtype=np.int64))
        for _ in range(top + 2):
            req = self._close(req, adm)
            omega = [np.arange(self.base.num_elements)]
            omega += [self.children(l, req[l]) for l in range(len(req))]
            mesh = self._derived(omega)
            if mesh.is_strictly_admissible(adm):
                return mesh
            req = [mesh.refined(l) for l in range(mesh.nlevels - 1)]
        raise RuntimeError("admissible closure did not converge")

    def _close(self, req, adm):
        req = [np.asarray(r, dtype=np.int64) for r in req]
        for k in range(len(req) - 1, -1, -1):
            if len(req[k]) == 0:
                continue
            j = k - adm.m + 2
            if j >= 1:
                if adm.kind == "T":
                    anc = np.unique(self.ancestors(k, req[k], j))
                    lo, hi = self._extension_boxes(j, anc)
                    ext = _box_product(lo, hi, self.grid_shape(j))
                    need = np.unique(self.parents(j, ext))
                else:
                    anc = np.unique(self.ancestors(k, req[k], j - 1))
                    lo, hi = self._extension_boxes(j - 1, anc)
                    need = _box_product(lo, hi, self.grid_shape(j - 1))
                req[j - 1] = np.union1d(req[j - 1], need)
            if k >= 1:
                req[k - 1] = np.union1d(req[k - 1], np.unique(self.parents(k, req[k])))
        return req

    # ---- text export ------------------------------------------------
    def to_text(self):
        """One line per active element: ``level ix iy [iz] x0 x1 y0 y1 ...``."""
        lines = [f"# dim {self.dim}", "# degree " + " ".join(map(str, self.degree))]
        for kv in self.base.kvs:
            lines.append("# breaks " + " ".join(repr(float(b)) for b in kv.breaks))
            if np.any(kv.multiplicities != 1):
                lines.append("# mult " + " ".join(str(int(m)) for m in kv.multiplicities))
        for l, act in enumerate(self.active_elements):
            if len(act) == 0:
                continue
            mi = np.array(np.unravel_index(act, self.grid_shape(l))).T
            bnd = self.element_bounds(l, act)
            for idx, b in zip(mi, bnd):
                lines.append(" ".join([str(l)] + [str(int(i)) for i in idx]
                                      + [f"{v:.17g}" for v in b.ravel()]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Rebuild a mesh from :meth:`to_text` output."""
        dim, degree, breaks, mults, rows = None, None, [], {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, *vals = line[1:].split()
                if key == "dim":
                    dim = int(vals[0])
                elif key == "degree":
                    degree = [int(v) for v in vals]
                elif key == "breaks":
                    breaks.append([float(v) for v in vals])
                elif key == "mult":
                    mults[len(breaks) - 1] = [int(v) for v in vals]
                continue
            parts = line.split()
            rows.append((int(parts[0]), tuple(int(v) for v in parts[1:1 + dim])))
        base = TensorSpace([KnotVector.from_breaks(p, b, mults.get(k))
                            for k, (p, b) in enumerate(zip(degree, breaks))])
        nlev = 1 + max(r[0] for r in rows)
        shapes = [tuple(n << l for n in base.nel) for l in range(nlev)]
        act = [[] for _ in range(nlev)]
        for l, idx in rows:
            act[l].append(np.ravel_multi_index(idx, shapes[l]))
        # Omega^l is the union of active elements of level >= l seen at level l
        omega = [np.arange(base.num_elements)]
        for l in range(1, nlev):
            cells = []
            for k in range(l, nlev):
                if act[k]:
                    mi = np.array(np.unravel_index(np.array(act[k]), shapes[k]))
                    cells.append(np.ravel_multi_index(tuple(mi >> (k - l)), shapes[l]))
            omega.append(np.unique(np.concatenate(cells)))
        return cls(base, omega)

    def to_svg(self, size=512):
        """Minimal SVG sketch of a 2D mesh."""
        if self.dim != 2:
            raise ValueError("SVG export only for d = 2")
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
               f'viewBox="0 0 {size} {size}">']
        for l, act in enumerate(self.active_elements):
            for b in self.element_bounds(l, act):
                x0, x1 = b[0] * size
                y0, y1 = (1 - b[1][::-1]) * size
                out.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{x1 - x0:.3f}" '
                           f'height="{y1 - y0:.3f}" fill="none" stroke="black" stroke-width="0.3"/>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
