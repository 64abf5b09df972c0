"""Subspace decompositions, smoothers, the additive BPX preconditioner, PCG
and Lanczos spectral estimates.

Level subspaces live inside the intermediate spaces ``F^l`` of a
:class:`~thbbpx.space.HierarchicalSpace`.  The map from ``F^l`` to the final
basis is the product of exact two-level transfer matrices, so level operators
are Galerkin products computed from the finest stiffness matrix downwards.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

KINDS = ("new", "mod", "tsupp", "hsupp", "all")


def _required_basis(kind):
    return "hb" if kind == "hsupp" else "thb"


class Decomposition:
    """Level subspaces of the interior part of a hierarchical space.

    ``sets[l]`` indexes the interior functions of ``F^l`` spanning the level-l
    subspace; ``transfers[l]`` maps interior coefficients of ``F^l`` to those
    of ``F^{l+1}``.
    """

    def __init__(self, space, kind):
        kind = str(kind).lower()
        if kind not in KINDS:
            raise ValueError(f"unknown decomposition kind {kind!r}")
        if space.kind != _required_basis(kind):
            raise ValueError(f"decomposition {kind!r} requires a {_required_basis(kind).upper()} basis")
        self.space = space
        self.kind = kind
        nl = space.nlevels
        self.interior = [np.nonzero(~space.intermediate_boundary(l))[0] for l in range(nl)]
        self.transfers = []
        for l in range(nl - 1):
            P = space.transfer(l)
            self.transfers.append(P[self.interior[l + 1]][:, self.interior[l]].tocsr())
        self.sets = [self._level_set(l) for l in range(nl)]

    @property
    def nlevels(self):
        return self.space.nlevels

    def h(self, l):
        return self.space.mesh.h(l)

    def _level_set(self, l):
        space = self.space
        intr = self.interior[l]
        if l == 0 or self.kind == "all":
            return np.arange(len(intr))
        off = space.offsets[l]
        if self.kind == "new":
            sel = intr >= off
        elif self.kind in ("tsupp", "hsupp"):
            C = space.levels[l].C.tocsc()
            sel = np.diff(C.indptr)[intr] > 0
        else:  # mod: new functions plus those changed by the last truncation
            P = space.transfer(l - 1).tocsc()
            newpart = P[off:, :]
            changed_prev = np.diff(newpart.tocsc().indptr) > 0
            surv = space.survivors(l - 1)
            changed = np.ones(space.intermediate_size(l), dtype=bool)
            changed[: len(surv)] = changed_prev[surv]
            sel = changed[intr]
        return np.nonzero(sel)[0]

    def generators(self, l):
        """``(level of origin, mother id)`` of every level-l subspace function."""
        pos = self.interior[l][self.sets[l]]
        return list(zip(self.space.intermediate_levels(l)[pos].tolist(),
                        self.space.intermediate_mothers(l)[pos].tolist()))

    def embedding(self, l):
        """Explicit ``E_l``: subspace coefficients -> global interior ones."""
        n = len(self.interior[l])
        E = sp.identity(n, format="csr")[:, self.sets[l]]
        for k in range(l, self.nlevels - 1):
            E = (self.transfers[k] @ E).tocsr()
        return E

    def galerkin_chain(self, A):
        """Stiffness matrices of all interior ``F^l`` from the global one."""
        mats = [None] * self.nlevels
        mats[-1] = A.tocsr()
        for l in range(self.nlevels - 2, -1, -1):
            P = self.transfers[l]
            mats[l] = (P.T @ mats[l + 1] @ P).tocsr()
        return mats

    def restrict_stiffness(self, A, level=None):
        """``E_l^T A E_l`` for one level or a list for all levels."""
        chain = self.galerkin_chain(A)
        out = []
        for l in range(self.nlevels):
            S = self.sets[l]
            out.append(chain[l][S][:, S].tocsr())
        return out if level is None else out[level]


# ---- smoothers -----------------------------------------------------------

class Smoother:
    """One Jacobi or symmetric Gauss-Seidel step for a sparse SPD matrix."""

    def __init__(self, A, kind="sgs"):
        kind = str(kind).lower()
        if kind not in ("sgs", "jacobi"):
            raise ValueError("smoother must be 'sgs' or 'jacobi'")
        self.kind = kind
        A = sp.csr_matrix(A)
        self.n = A.shape[0]
        self.diag = A.diagonal()
        if np.any(self.diag <= 0):
            raise ValueError("smoother needs a positive diagonal")
        if kind == "sgs" and self.n:
            opts = dict(permc_spec="NATURAL", diag_pivot_thresh=0.0,
                        options=dict(SymmetricMode=True))
            self._lower = spla.splu(sp.tril(A, format="csc"), **opts)
            self._upper = spla.splu(sp.triu(A, format="csc"), **opts)

    def __call__(self, r):
        if self.n == 0:
            return np.zeros_like(r)
        if self.kind == "jacobi":
            return r / (self.diag if r.ndim == 1 else self.diag[:, None])
        y = self._lower.solve(np.asarray(r, dtype=float))
        y = y * (self.diag if r.ndim == 1 else self.diag[:, None])
        return self._upper.solve(y)


def smoother_apply(A, r, kind="sgs"):
    """Jacobi ``D^{-1} r`` or SGS ``(D-U)^{-1} D (D-L)^{-1} r`` for ``A = D-L-U``."""
    return Smoother(A, kind)(np.asarray(r, dtype=float))


def _worker_count():
    try:
        return max(1, int(os.environ.get("THBBPX_THREADS", "1")))
    except ValueError:
        return 1


class ExactSolver:
    """Sparse direct solve, used on the coarsest level."""

    def __init__(self, A):
        self.n = A.shape[0]
        if self.n:
            self._lu = spla.splu(sp.csc_matrix(A))

    def __call__(self, r):
        if self.n == 0:
            return np.zeros_like(r)
        return self._lu.solve(np.asarray(r, dtype=float))


class BPX:
    """Additive multilevel preconditioner ``B = sum_l E_l R_l E_l^T``.

    ``R_l`` is one smoothing step on every level except the coarsest, which
    is solved exactly unless ``coarse='smoother'``.  Restrictions and
    prolongations use the transfer chain; per-level smoothing may run on
    several threads and is reduced in level order.
    """

    def __init__(self, decomp, A, smoother="sgs", coarse="exact", workers=None):
        if coarse not in ("exact", "smoother"):
            raise ValueError("coarse must be 'exact' or 'smoother'")
        self.decomp = decomp
        self.smoother_kind = smoother
        self.coarse = coarse
        self.levels = decomp.restrict_stiffness(A)
        self.smoothers = [ExactSolver(Al) if (l == 0 and coarse == "exact") else Smoother(Al, smoother)
                          for l, Al in enumerate(self.levels)]
        self.workers = _worker_count() if workers is None else int(workers)
        self.shape = A.shape

    def __call__(self, r):
        d = self.decomp
        r = np.asarray(r, dtype=float)
        res = [None] * d.nlevels
        res[-1] = r
        for l in range(d.nlevels - 2, -1, -1):
            res[l] = d.transfers[l].T @ res[l + 1]
        args = [(l, res[l][d.sets[l]]) for l in range(d.nlevels)]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                corr = list(ex.map(lambda a: self.smoothers[a[0]](a[1]), args))
        else:
            corr = [self.smoothers[l](v) for l, v in args]
        z = np.zeros((len(d.interior[0]),) + r.shape[1:])
        for l in range(d.nlevels):
            if l:
                z = d.transfers[l - 1] @ z
            z[d.sets[l]] += corr[l]
        return z

    def as_linear_operator(self):
        return spla.LinearOperator(self.shape, matvec=self, matmat=self, dtype=float)

    def dense(self):
        """Dense ``B`` (small problems only)."""
        B = self(np.eye(self.shape[0]))
        return 0.5 * (B + B.T)


def bpx_apply(decomp, smoother_kind, r, A, coarse="exact"):
    return BPX(decomp, A, smoother_kind, coarse=coarse)(r)


# ---- PCG and Lanczos -------------------------------------------------------

@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    alphas: np.ndarray
    betas: np.ndarray

    def tridiagonal(self):
        return lanczos_tridiagonal(self.alphas, self.betas)


def lanczos_tridiagonal(alphas, betas):
    """Diagonal and off-diagonal of the Lanczos matrix from PCG coefficients."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)[: max(len(a) - 1, 0)]
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(b) / a[:-1]
    return diag, off


def _identity(r):
    return r


def pcg(A, b, M=None, tol=1e-8, maxit=1000, x0=None, callback=None):
    """Preconditioned CG; stops when the preconditioned residual norm has
    dropped by ``tol``.  ``callback(k, alphas, betas)`` may return True to stop."""
    M = _identity if M is None else M
    x = np.zeros_like(b, dtype=float) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = M(r)
    rz = float(r @ z)
    rz0 = rz
    p = z.copy()
    alphas, betas = [], []
    if rz0 <= 0:
        return PCGResult(x, 0, True, np.array([]), np.array([]))
    converged = False
    k = 0
    for k in range(1, maxit + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = M(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        alphas.append(alpha)
        betas.append(beta)
        if rz_new <= 0 or np.sqrt(rz_new / rz0) < tol:
            converged = True
            break
        if callback is not None and callback(k, alphas, betas):
            break
        rz = rz_new
        p = z + beta * p
    return PCGResult(x, k, converged, np.array(alphas), np.array(betas))


@dataclass
class SpectralEstimate:
    lambda_min: float
    lambda_max: float
    iterations: int
    converged: bool

    @property
    def kappa(self):
        return self.lambda_max / self.lambda_min


def _ritz_extremes(alphas, betas):
    d, e = lanczos_tridiagonal(alphas, betas)
    if len(d) == 1:
        return d[0], d[0]
    w = sla.eigvalsh_tridiagonal(d, e, select="i", select_range=(0, 0))[0], \
        sla.eigvalsh_tridiagonal(d, e, select="i", select_range=(len(d) - 1, len(d) - 1))[0]
    return w


def _ritz_residuals(alphas, betas):
    """Extreme Ritz values of the Lanczos matrix and their residual bounds
    ``|T_{k,k+1} y_k|`` (``y`` the normalized Ritz vector)."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)
    d, e = lanczos_tridiagonal(a, b)
    nxt = np.sqrt(b[len(a) - 1]) / a[-1]
    if len(d) == 1:
        return (d[0], d[0]), (nxt, nxt)
    w, v = sla.eigh_tridiagonal(d, e, select="i", select_range=(0, len(d) - 1))
    return (w[0], w[-1]), (abs(nxt * v[-1, 0]), abs(nxt * v[-1, -1]))


def estimate_spectrum(A, M=None, seed=0, rtol=1e-4, maxit=400, patience=5, floor=1e-13, restol=1e-3):
    """Extreme eigenvalues of ``M A`` from the Lanczos matrix of PCG.

    The right-hand side is random (fixed seed).  Iteration stops once both
    extreme Ritz values change relatively by less than ``rtol`` for
    ``patience`` consecutive steps and their residual bounds are below
    ``restol`` times the Ritz value, at ``maxit`` steps, or when the
    preconditioned residual has dropped to ``floor``.
    """
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n)
    state = {"prev": None, "calm": 0, "done": False}

    def watch(k, alphas, betas):
        ext = _ritz_extremes(alphas, betas)
        prev = state["prev"]
        if prev is not None and all(abs(x - y) <= rtol * abs(x) for x, y in zip(ext, prev)):
            state["calm"] += 1
        else:
            state["calm"] = 0
        state["prev"] = ext
        if state["calm"] >= patience:
            # the residual check needs eigenvectors, so it runs only once stationary
            vals, res = _ritz_residuals(alphas, betas)
            if all(r <= restol * abs(v) for v, r in zip(vals, res)):
                state["done"] = True
                return True
        return False

    res = pcg(A, b, M, tol=floor, maxit=maxit, callback=watch)
    if len(res.alphas) == 0:
        return SpectralEstimate(np.nan, np.nan, 0, False)
    lo, hi = _ritz_extremes(res.alphas, res.betas)
    return SpectralEstimate(float(lo), float(hi), res.iterations, state["done"] or res.converged)


def dense_spectrum(A, B=None):
    """Extreme eigenvalues of ``B A`` by a dense symmetric eigensolve."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    if B is None:
        w = np.linalg.eigvalsh(A)
    else:
        L = np.linalg.cholesky(A)
        w = np.linalg.eigvalsh(L.T @ B @ L)
    return float(w[0]), float(w[-1])


def unpreconditioned_spectrum(A, precond=None, dense_limit=2000, seed=0):
    """Extreme eigenvalues of ``A``: dense for small sizes, otherwise Lanczos
    (largest) and LOBPCG, accelerated by ``precond`` when given (smallest)."""
    n = A.shape[0]
    if n <= dense_limit:
        return SpectralEstimate(*dense_spectrum(A), 0, True)
    rng = np.random.default_rng(seed)
    lmax = float(spla.eigsh(A, k=1, which="LA", return_eigenvectors=False,
                            v0=rng.standard_normal(n), tol=1e-6)[0])
    X = rng.standard_normal((n, 4))
    Mop = None if precond is None else spla.LinearOperator(A.shape, matvec=precond,
                                                           matmat=precond, dtype=float)
    w, _ = spla.lobpcg(A, X, M=Mop, largest=False, tol=1e-7, maxiter=400)
    return SpectralEstimate(float(np.min(w)), lmax, 0, True)
