"""Univariate and tensor-product B-spline machinery.

Knot vectors are open (first and last knot repeated ``p+1`` times) on
``[0, 1]``.  Elements are the non-empty knot spans, numbered from left to
right.  Multivariate objects use C-ordered flat indices, i.e. the last
multi-index component runs fastest, which makes tensor-product matrices plain
Kronecker products.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp


class DomainError(ValueError):
    """A point lies outside the parametric domain."""


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector of degree ``p`` on ``[0, 1]``."""

    p: int
    knots: tuple

    def __post_init__(self):
        kn = np.asarray(self.knots, dtype=float)
        if self.p < 1:
            raise ValueError("degree must be at least 1")
        if np.any(np.diff(kn) < 0):
            raise ValueError("knots must be non-decreasing")
        if not (np.all(kn[: self.p + 1] == 0.0) and np.all(kn[-self.p - 1:] == 1.0)):
            raise ValueError("knot vector must be p-open on [0, 1]")
        if len(kn) - self.p - 1 < self.p + 1:
            raise ValueError("too few knots for the degree")
        # interior multiplicity above p would break continuity assumptions
        _, counts = np.unique(kn[self.p + 1: -self.p - 1], return_counts=True)
        if counts.size and counts.max() > self.p:
            raise ValueError("interior knot multiplicity exceeds the degree")

    @classmethod
    def uniform(cls, p, nel):
        """Uniform open knot vector with ``nel`` elements and no repeated
        interior knots."""
        inner = np.linspace(0.0, 1.0, nel + 1)
        kn = np.concatenate([np.zeros(p), inner, np.ones(p)])
        return cls(p, tuple(float(k) for k in kn))

    @classmethod
    def from_breaks(cls, p, breaks, mult=None):
        """Knot vector with given breakpoints and interior multiplicities."""
        breaks = np.asarray(breaks, dtype=float)
        if mult is None:
            mult = np.ones(len(breaks) - 2, dtype=int)
        kn = [0.0] * (p + 1)
        for b, m in zip(breaks[1:-1], mult):
            kn += [float(b)] * int(m)
        kn += [1.0] * (p + 1)
        return cls(p, tuple(kn))

    @cached_property
    def array(self):
        return np.asarray(self.knots, dtype=float)

    @property
    def n(self):
        """Number of basis functions."""
        return len(self.knots) - self.p - 1

    @cached_property
    def breaks(self):
        return np.unique(self.array)

    @property
    def nel(self):
        return len(self.breaks) - 1

    @cached_property
    def multiplicities(self):
        """Multiplicity of every interior breakpoint."""
        _, counts = np.unique(self.array, return_counts=True)
        return counts[1:-1]

    @cached_property
    def element_span(self):
        """Knot span index ``mu`` of every element (``t[mu] < t[mu+1]``)."""
        return np.searchsorted(self.array, self.breaks[:-1], side="right") - 1

    @cached_property
    def first_function(self):
        """Index of the first of the ``p+1`` functions alive on each element."""
        return self.element_span - self.p

    @cached_property
    def support_elements(self):
        """``(n, 2)`` array: first and last element of every function support."""
        t = self.array
        lo = np.searchsorted(self.breaks, t[: self.n], side="left")
        hi = np.searchsorted(self.breaks, t[self.p + 1: self.p + 1 + self.n], side="left") - 1
        return np.stack([lo, hi], axis=1)

    @cached_property
    def greville(self):
        t = self.array
        return np.array([t[i + 1: i + self.p + 1].mean() for i in range(self.n)])

    def refine(self):
        """Dyadic refinement: every element is bisected, multiplicities kept."""
        b = self.breaks
        mid = 0.5 * (b[:-1] + b[1:])
        newbreaks = np.empty(2 * len(b) - 1)
        newbreaks[0::2] = b
        newbreaks[1::2] = mid
        mult = np.ones(len(newbreaks) - 2, dtype=int)
        mult[1::2] = self.multiplicities
        return KnotVector.from_breaks(self.p, newbreaks, mult)

    def mesh_sizes(self):
        return np.diff(self.breaks)

    def quasi_uniformity(self):
        """Largest ratio between neighbouring element sizes."""
        h = self.mesh_sizes()
        if len(h) < 2:
            return 1.0
        r = h[1:] / h[:-1]
        return float(max(r.max(), (1.0 / r).max()))

    def find_element(self, x):
        """Element containing each point; the last element is closed."""
        x = np.asarray(x, dtype=float)
        if np.any((x < 0.0) | (x > 1.0)) or np.any(np.isnan(x)):
            raise DomainError("point outside [0, 1]")
        el = np.searchsorted(self.breaks, x, side="right") - 1
        return np.minimum(el, self.nel - 1)


def basis_ders(kv, x, nders=0, element=None):
    """Evaluate the ``p+1`` non-vanishing B-splines and derivatives.

    Returns ``(first, values)`` where ``first[i]`` is the index of the first
    non-vanishing function at ``x[i]`` and ``values`` has shape
    ``(npts, nders+1, p+1)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = kv.p
    if nders < 0:
        raise ValueError("nders must be non-negative")
    if element is None:
        element = kv.find_element(x)
    span = kv.element_span[element]
    t = kv.array
    npts = len(x)

    # values of all degrees q = 0..p on the span (Cox-de Boor triangle)
    N = [np.ones((npts, 1))]
    for q in range(1, p + 1):
        prev = N[-1]
        cur = np.zeros((npts, q + 1))
        for r in range(q + 1):
            i = span - q + r
            if r >= 1:
                den = t[i + q] - t[i]
                w = np.divide(x - t[i], den, out=np.zeros(npts), where=den > 0)
                cur[:, r] += w * prev[:, r - 1]
            if r <= q - 1:
                den = t[i + q + 1] - t[i + 1]
                w = np.divide(t[i + q + 1] - x, den, out=np.zeros(npts), where=den > 0)
                cur[:, r] += w * prev[:, r]
        N.append(cur)

    out = np.zeros((npts, nders + 1, p + 1))
    out[:, 0, :] = N[p]
    if nders:
        # coefficients of every basis function w.r.t. lower-degree bases
        c = np.broadcast_to(np.eye(p + 1), (npts, p + 1, p + 1)).copy()
        for k in range(1, min(nders, p) + 1):
            q = p - k + 1
            newc = np.empty((npts, p + 1, q))
            for r in range(q):
                den = t[span + 1 + r] - t[span - q + 1 + r]
                newc[:, :, r] = q * (c[:, :, r + 1] - c[:, :, r]) / den[:, None]
            c = newc
            out[:, k, :] = np.einsum("nar,nr->na", c, N[p - k])
    return span - p, out


@lru_cache(maxsize=256)
def subdivision_matrix_1d(coarse, fine):
    """Sparse matrix ``M`` with ``B_coarse = M.T @ B_fine``, i.e. fine
    coefficients ``M @ c`` represent the coarse spline ``c``.

    Computed with the discrete B-spline (Oslo) recursion.
    """
    if coarse.p != fine.p:
        raise ValueError("degrees differ")
    p = coarse.p
    t = coarse.array
    tau = fine.array
    # nestedness: each coarse knot must appear in the fine vector with at
    # least the same multiplicity
    cv, cc = np.unique(t, return_counts=True)
    fv, fc = np.unique(tau, return_counts=True)
    pos = np.searchsorted(fv, cv)
    if np.any(pos >= len(fv)) or np.any(np.abs(fv[np.minimum(pos, len(fv) - 1)] - cv) > 0) \
            or np.any(fc[np.minimum(pos, len(fv) - 1)] < cc):
        raise ValueError("knot vectors are not nested")
    rows, cols, vals = [], [], []
    for j in range(fine.n):
        mu = int(np.searchsorted(t, tau[j], side="right") - 1)
        mu = min(mu, coarse.n - 1)
        b = np.array([1.0])
        for k in range(1, p + 1):
            x = tau[j + k]
            nb = np.zeros(k + 1)
            for r in range(k + 1):
                i = mu - k + r
                if r >= 1:
                    den = t[i + k] - t[i]
                    if den > 0:
                        nb[r] += (x - t[i]) / den * b[r - 1]
                if r <= k - 1:
                    den = t[i + k + 1] - t[i + 1]
                    if den > 0:
                        nb[r] += (t[i + k + 1] - x) / den * b[r]
            b = nb
        for r in range(p + 1):
            if b[r] != 0.0:
                rows.append(j)
                cols.append(mu - p + r)
                vals.append(b[r])
    return sp.csr_matrix((vals, (rows, cols)), shape=(fine.n, coarse.n))


def gauss_rule(q):
    """Gauss-Legendre nodes and weights on ``[0, 1]`` with ``q`` points."""
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss rule on the reference cell ``[0,1]^d``."""

    order: tuple

    @classmethod
    def for_degree(cls, degree, extra=0):
        return cls(tuple(int(p) + 1 + extra for p in degree))

    @cached_property
    def nodes_weights(self):
        return tuple(gauss_rule(q) for q in self.order)

    def points(self):
        """Tensor quadrature points ``(nq, d)`` and weights ``(nq,)``."""
        xs = [nw[0] for nw in self.nodes_weights]
        ws = [nw[1] for nw in self.nodes_weights]
        grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, len(xs))
        w = ws[0]
        for wk in ws[1:]:
            w = np.multiply.outer(w, wk).ravel()
        return grid, w


class TensorSpace:
    """Tensor-product B-spline space on ``[0,1]^d``."""

    def __init__(self, kvs):
        self.kvs = tuple(kvs)
        if not 1 <= len(self.kvs) <= 3:
            raise ValueError("dimension must be 1, 2 or 3")

    @classmethod
    def uniform(cls, degree, nel):
        return cls([KnotVector.uniform(p, n) for p, n in zip(degree, nel)])

    def __eq__(self, other):
        return isinstance(other, TensorSpace) and self.kvs == other.kvs

    def __hash__(self):
        return hash(self.kvs)

    def __repr__(self):
        return f"TensorSpace(degree={self.degree}, nel={self.nel})"

    @property
    def dim(self):
        return len(self.kvs)

    @property
    def degree(self):
        return tuple(kv.p for kv in self.kvs)

    @property
    def shape(self):
        """Number of functions per direction."""
        return tuple(kv.n for kv in self.kvs)

    @property
    def nel(self):
        return tuple(kv.nel for kv in self.kvs)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def num_elements(self):
        return int(np.prod(self.nel))

    @property
    def h(self):
        return max(kv.mesh_sizes().max() for kv in self.kvs)

    def refine(self):
        return TensorSpace([kv.refine() for kv in self.kvs])

    def element_bounds(self, elements):
        """``(n, d, 2)`` array of lower/upper corners for flat element ids."""
        idx = np.unravel_index(np.asarray(elements), self.nel)
        return np.stack([np.stack([kv.breaks[i], kv.breaks[i + 1]], axis=-1)
                         for kv, i in zip(self.kvs, idx)], axis=1)

    def find_element(self, x):
        x = np.atleast_2d(x)
        idx = [kv.find_element(x[:, k]) for k, kv in enumerate(self.kvs)]
        return np.ravel_multi_index(idx, self.nel)

    def element_functions(self, element):
        """Flat indices of the functions non-vanishing on one element."""
        idx = np.unravel_index(int(element), self.nel)
        ranges = [np.arange(kv.first_function[i], kv.first_function[i] + kv.p + 1)
                  for kv, i in zip(self.kvs, idx)]
        grid = np.meshgrid(*ranges, indexing="ij")
        return np.ravel_multi_index([g.ravel() for g in grid], self.shape)

    def function_support(self, fn):
        """Flat element ids in the support of flat function ``fn``."""
        idx = np.unravel_index(int(fn), self.shape)
        ranges = [np.arange(kv.support_elements[i, 0], kv.support_elements[i, 1] + 1)
                  for kv, i in zip(self.kvs, idx)]
        grid = np.meshgrid(*ranges, indexing="ij")
        return np.sort(np.ravel_multi_index([g.ravel() for g in grid], self.nel))

    def eval_nonzero_basis(self, x, deriv_order=0):
        """Non-vanishing tensor B-splines at a single point.

        Returns ``(indices, values)``; for ``deriv_order == 0`` the values are
        a vector, for 1 an array ``(nfun, d)`` of first partials and for 2 an
        array ``(nfun, d, d)`` of second partials.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise ValueError("point has wrong dimension")
        if deriv_order not in (0, 1, 2) or deriv_order > min(self.degree):
            raise ValueError("unsupported derivative order")
        firsts, vals = [], []
        for k, kv in enumerate(self.kvs):
            f, v = basis_ders(kv, x[k:k + 1], deriv_order)
            firsts.append(int(f[0]))
            vals.append(v[0])
        ranges = [np.arange(f, f + kv.p + 1) for f, kv in zip(firsts, self.kvs)]
        grid = np.meshgrid(*ranges, indexing="ij")
        ids = np.ravel_multi_index([g.ravel() for g in grid], self.shape)
        values = tensor_values(vals, deriv_order)
        return ids, values

    def eval_functions(self, x, ids, deriv_order=0):
        """Evaluate arbitrary tensor functions (flat ``ids``) at points ``x``.

        Returns an array ``(npts, nids)`` (plus trailing derivative axes)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mi = np.unravel_index(np.asarray(ids), self.shape)
        acc = {(): np.ones((len(x), len(mi[0])))}
        for k, kv in enumerate(self.kvs):
            f, v = basis_ders(kv, x[:, k], deriv_order)
            loc = mi[k][None, :] - f[:, None]
            ok = (loc >= 0) & (loc <= kv.p)
            vk = np.where(ok[:, None, :],
                          np.take_along_axis(v, np.clip(loc, 0, kv.p)[:, None, :], axis=2),
                          0.0)  # (npts, nders+1, nids)
            acc = {key + (a,): val * vk[:, a, :]
                   for key, val in acc.items() for a in range(vk.shape[1])
                   if sum(key) + a <= deriv_order}
        return _collect_derivatives(acc, self.dim, deriv_order)


def _collect_derivatives(acc, dim, deriv_order):
    """Turn a dict keyed by per-direction derivative orders into values,
    gradients (last axis) or Hessians (last two axes)."""
    if deriv_order == 0:
        return acc[(0,) * dim]
    if deriv_order == 1:
        return np.stack([acc[tuple(int(j == k) for j in range(dim))] for k in range(dim)], axis=-1)
    out = np.empty(acc[(0,) * dim].shape + (dim, dim))
    for a in range(dim):
        for b in range(dim):
            key = [0] * dim
            key[a] += 1
            key[b] += 1
            out[..., a, b] = acc[tuple(key)]
    return out


def tensor_values(univariate, deriv_order):
    """Combine per-direction arrays ``(nders+1, p_k+1)`` into tensor values."""
    acc = {(): np.ones(1)}
    for v in univariate:
        acc = {key + (a,): np.multiply.outer(val, v[a]).reshape(-1)
               for key, val in acc.items() for a in range(v.shape[0])
               if sum(key) + a <= deriv_order}
    return _collect_derivatives(acc, len(univariate), deriv_order)


def subdivision_matrix(coarse, fine):
    """Tensor-product subdivision matrix (``fine.size x coarse.size``)."""
    if isinstance(coarse, KnotVector):
        return subdivision_matrix_1d(coarse, fine)
    if coarse.dim != fine.dim:
        raise ValueError("dimensions differ")
    M = None
    for kc, kf in zip(coarse.kvs, fine.kvs):
        Mk = subdivision_matrix_1d(kc, kf)
        M = Mk if M is None else sp.kron(M, Mk, format="csr")
    return M.tocsr()


def support_extension_1d(kv, element):
    """First and last element of the union of supports of the functions
    alive on ``element``."""
    f = kv.first_function[element]
    return kv.support_elements[f, 0], kv.support_elements[f + kv.p, 1]


def support_extension(space, element):
    """Flat ids of the elements in the support extension of ``element``."""
    if isinstance(space, KnotVector):
        lo, hi = support_extension_1d(space, int(element))
        return np.arange(lo, hi + 1)
    idx = element if isinstance(element, tuple) else np.unravel_index(int(element), space.nel)
    ranges = []
    for kv, i in zip(space.kvs, idx):
        if not 0 <= i < kv.nel:
            raise IndexError("element index out of range")
        lo, hi = support_extension_1d(kv, i)
        ranges.append(np.arange(lo, hi + 1))
    grid = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index([g.ravel() for g in grid], space.nel)


def _element_projection(space, element, f, extra=3):
    """Local L2 projection of ``f`` on one element onto the functions alive
    there; returns ``(ids, coefficients)``."""
    bounds = space.element_bounds([element])[0]
    quad = QuadratureRule.for_degree(space.degree, extra=extra)
    ref, w = quad.points()
    size = bounds[:, 1] - bounds[:, 0]
    x = bounds[:, 0] + ref * size
    w = w * np.prod(size)
    ids = space.element_functions(element)
    # weighted least squares instead of normal equations: conditioning of
    # the basis matrix rather than of its Gram matrix
    sw = np.sqrt(w)[:, None]
    B = space.eval_functions(x, ids) * sw
    if np.linalg.cond(B) > 1e8:
        raise RuntimeError("singular local Gram matrix")
    c, *_ = np.linalg.lstsq(B, sw[:, 0] * np.asarray(f(x), dtype=float), rcond=None)
    return ids, c


def dual_functional(space, fn, element, f):
    """Coefficient of function ``fn`` in the local L2 projection of ``f`` on
    ``element``; ``element`` must lie in the support of ``fn``."""
    if isinstance(space, KnotVector):
        space = TensorSpace([space])
    ids, c = _element_projection(space, element, f)
    hit = np.nonzero(ids == fn)[0]
    if hit.size == 0:
        raise ValueError("element is not in the support of the function")
    return float(c[hit[0]])


def quasi_interpolant(space, f, element_choice=None):
    """Coefficients of the quasi-interpolant built from local projections.

    ``element_choice`` maps a flat function index to an element in its
    support; by default the first support element is used.
    """
    if isinstance(space, KnotVector):
        space = TensorSpace([space])
    coeffs = np.empty(space.size)
    if element_choice is None:
        element_choice = {fn: int(space.function_support(fn)[0]) for fn in range(space.size)}
    by_element = {}
    for fn in range(space.size):
        by_element.setdefault(int(element_choice[fn]), []).append(fn)
    for el, fns in by_element.items():
        ids, c = _element_projection(space, el, f)
        lookup = dict(zip(ids.tolist(), c))
        for fn in fns:
            if fn not in lookup:
                raise ValueError("element is not in the support of the function")
            coeffs[fn] = lookup[fn]
    return coeffs
