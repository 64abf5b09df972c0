import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from thbbpx.bench import gen_test1_mesh, gen_test3_mesh
from thbbpx.bpx import (BPX, Decomposition, ExactSolver, Smoother, dense_spectrum, estimate_spectrum,
                        pcg, smoother_apply, unpreconditioned_spectrum)
from thbbpx.galerkin import assemble, assemble_stiffness
from thbbpx.mesh import AdmissibilityClass, HierarchicalMesh
from thbbpx.space import HierarchicalSpace

from oracles import lift, subspace_oracle, truncated
from test_space import MESHES

CHAIN = ("new", "mod", "tsupp", "hsupp", "all")


def basis_of(kind):
    return "hb" if kind == "hsupp" else "thb"


def finest_columns(space, decomp, l):
    """Subspace functions of level l in finest tensor coefficients."""
    Cf = space.finest_coefficients()[:, space.interior]
    return (Cf @ decomp.embedding(l)).toarray()


def explicit_B(decomp, A, kind="sgs"):
    """``sum_l E_l R_l E_l^T`` from explicit dense matrices."""
    B = np.zeros(A.shape)
    for l, Al in enumerate(decomp.restrict_stiffness(A)):
        Al = Al.toarray()
        if l == 0:
            R = np.linalg.inv(Al)
        elif kind == "jacobi":
            R = np.diag(1 / np.diag(Al))
        else:
            D = np.diag(np.diag(Al))
            R = np.linalg.inv(np.triu(Al)) @ D @ np.linalg.inv(np.tril(Al))
        E = decomp.embedding(l).toarray()
        B += E @ R @ E.T
    return B


def setup(mesh, kind="tsupp", smoother="sgs"):
    space = HierarchicalSpace(mesh, basis_of(kind))
    A = assemble_stiffness(space)
    decomp = Decomposition(space, kind)
    return space, A, decomp, BPX(decomp, A, smoother)


@pytest.mark.parametrize("name", list(MESHES))
@pytest.mark.parametrize("kind", CHAIN)
def test_decomposition_matches_set_definitions(name, kind):
    mesh = MESHES[name]()
    space = HierarchicalSpace(mesh, basis_of(kind))
    decomp = Decomposition(space, kind)
    L = mesh.nlevels - 1
    for l in range(mesh.nlevels):
        pairs, C = subspace_oracle(mesh, l, kind)
        assert decomp.generators(l) == pairs
        # embedding columns reproduce the subspace functions
        assert np.max(abs(finest_columns(space, decomp, l) - lift(mesh, C, l, L)), initial=0) < 1e-12


def test_kind_basis_mismatch():
    with pytest.raises(ValueError):
        Decomposition(HierarchicalSpace(gen_test1_mesh(2, 2, 2), "thb"), "hsupp")
    with pytest.raises(ValueError):
        Decomposition(HierarchicalSpace(gen_test1_mesh(2, 2, 2), "hb"), "tsupp")
    with pytest.raises(ValueError):
        Decomposition(HierarchicalSpace(gen_test1_mesh(2, 2, 2), "thb"), "bogus")


def test_single_level_embedding_is_identity():
    mesh = HierarchicalMesh.uniform((2, 2), (5, 5))
    for kind in CHAIN:
        space = HierarchicalSpace(mesh, basis_of(kind))
        E = Decomposition(space, kind).embedding(0).toarray()
        assert np.array_equal(E, np.eye(len(space.interior)))
        A = assemble_stiffness(space)
        assert abs(Decomposition(space, kind).restrict_stiffness(A, 0) - A).max() == 0


def test_tsupp_strictly_smaller_than_all():
    space = HierarchicalSpace(gen_test1_mesh(1, 2, 5), "thb")
    ts, al = Decomposition(space, "tsupp"), Decomposition(space, "all")
    # at level 1 every interior coarse hat of the 3x3 grid reaches the refined corner
    assert len(ts.sets[1]) == len(al.sets[1])
    for l in range(2, 5):
        assert len(ts.sets[l]) < len(al.sets[l])
    for l in range(5):
        assert len(ts.sets[l]) == len(subspace_oracle(space.mesh, l, "tsupp")[0])


@pytest.mark.parametrize("name", ["fig3", "test1", "test2", "test3"])
def test_nestedness_chain(name):
    mesh = MESHES[name]()
    cols = {}
    for kind in CHAIN:
        space = HierarchicalSpace(mesh, basis_of(kind))
        d = Decomposition(space, kind)
        cols[kind] = [finest_columns(space, d, l) for l in range(mesh.nlevels)]
    for small, big in zip(CHAIN[:-1], CHAIN[1:]):
        for l in range(mesh.nlevels):
            S, Bg = cols[small][l], cols[big][l]
            X, *_ = np.linalg.lstsq(Bg, S, rcond=None)
            assert np.max(abs(Bg @ X - S), initial=0) < 1e-10, (small, big, l)


@pytest.mark.parametrize("kind", CHAIN)
def test_union_has_full_row_rank(kind):
    space = HierarchicalSpace(gen_test3_mesh(4, 2, AdmissibilityClass("T", 2)), basis_of(kind))
    d = Decomposition(space, kind)
    E = sp.hstack([d.embedding(l) for l in range(d.nlevels)]).toarray()
    assert E.shape[0] <= 2000
    assert np.linalg.matrix_rank(E) == E.shape[0]


@pytest.mark.parametrize("name", ["fig3", "test1", "test3", "d3"])
@pytest.mark.parametrize("kind", CHAIN)
def test_restricted_stiffness_matches_direct_assembly(name, kind):
    mesh = MESHES[name]()
    space, A, d, _ = setup(mesh, kind)
    for l in range(mesh.nlevels):
        sub = HierarchicalSpace(truncated(mesh, l), basis_of(kind))
        Al = assemble_stiffness(sub)[d.sets[l]][:, d.sets[l]]
        Rl = d.restrict_stiffness(A, l)
        assert np.max(abs(Rl - Al).toarray(), initial=0) < 1e-10
        E = d.embedding(l)
        assert np.max(abs(E.T @ A @ E - Rl).toarray(), initial=0) < 1e-10
        if Rl.shape[0]:
            np.linalg.cholesky(Rl.toarray())


def test_two_level_1d_hand_stiffness():
    mesh = HierarchicalMesh.uniform((1,), (4,)).refine_raw({0: [0, 1]})
    space, A, d, _ = setup(mesh, "new")
    # fine hats at 1/8, 2/8, 3/8 with h = 1/8
    assert np.allclose(d.restrict_stiffness(A, 1).toarray(),
                       [[16, -8, 0], [-8, 16, -8], [0, -8, 16]])


def test_smoother_diagonal_matrix():
    D = np.array([2.0, 5.0, 0.5])
    r = np.array([1.0, -2.0, 3.0])
    for kind in ("jacobi", "sgs"):
        assert np.allclose(smoother_apply(sp.diags(D), r, kind), r / D)


def test_sgs_three_by_three():
    A = np.array([[4.0, -1, 0.5], [-1, 3, -1], [0.5, -1, 2]])
    D = np.diag(np.diag(A))
    Lo, Up = -np.tril(A, -1), -np.triu(A, 1)
    R = np.linalg.inv(D - Up) @ D @ np.linalg.inv(D - Lo)
    r = np.array([1.0, 2.0, -1.0])
    assert np.allclose(smoother_apply(A, r, "sgs"), R @ r, atol=1e-14)
    assert np.allclose(smoother_apply(A, r, "jacobi"), r / np.diag(A))


def test_smoothers_symmetric_and_equivalent():
    rng = np.random.default_rng(0)
    n = 30
    G = rng.standard_normal((n, n))
    A = G @ G.T + n * np.eye(n)
    r1, r2 = rng.standard_normal((2, n))
    for kind in ("jacobi", "sgs"):
        R = Smoother(A, kind)
        assert abs(r2 @ R(r1) - r1 @ R(r2)) < 1e-12
    Rs = Smoother(A, "sgs")(np.eye(n))
    Rj = Smoother(A, "jacobi")(np.eye(n))
    w = sla.eigh(np.linalg.inv(Rs), np.linalg.inv(Rj), eigvals_only=True)
    assert w.min() >= 0.25 and w.max() <= 4
    with pytest.raises(ValueError):
        Smoother(A, "ilu")


def test_one_level_jacobi_is_diagonal_scaling():
    space = HierarchicalSpace(HierarchicalMesh.uniform((2, 2), (5, 5)), "thb")
    A = assemble_stiffness(space)
    B = BPX(Decomposition(space, "tsupp"), A, "jacobi", coarse="smoother")
    r = np.random.default_rng(1).standard_normal(A.shape[0])
    assert np.allclose(B(r), r / A.diagonal())
    assert np.allclose(BPX(Decomposition(space, "tsupp"), A)(r), spla.spsolve(A.tocsc(), r))


@pytest.mark.parametrize("kind,smoother", [("tsupp", "sgs"), ("all", "jacobi"), ("mod", "sgs"),
                                           ("new", "jacobi"), ("hsupp", "sgs")])
def test_bpx_matches_explicit_operator(kind, smoother):
    mesh = gen_test3_mesh(3, 2, AdmissibilityClass("T", 2))
    _, A, d, B = setup(mesh, kind, smoother)
    ref = explicit_B(d, A, smoother)
    Bd = B(np.eye(A.shape[0]))
    assert np.max(abs(Bd - ref)) < 1e-10 * np.max(abs(ref))
    # symmetric positive definite
    assert np.max(abs(Bd - Bd.T)) < 1e-12 * np.max(abs(Bd))
    assert np.linalg.eigvalsh(0.5 * (Bd + Bd.T)).min() > 0


def test_two_level_1d_explicit_operator():
    mesh = HierarchicalMesh.uniform((1,), (4,)).refine_raw({0: [0, 1]})
    _, A, d, B = setup(mesh, "tsupp", "jacobi")
    r = np.random.default_rng(2).standard_normal(A.shape[0])
    assert np.allclose(B(r), explicit_B(d, A, "jacobi") @ r, atol=1e-14)


def test_bpx_linear_symmetric_positive():
    _, A, _, B = setup(gen_test1_mesh(2, 2, 4))
    rng = np.random.default_rng(3)
    r1, r2 = rng.standard_normal((2, A.shape[0]))
    a = 1.7
    assert np.max(abs(B(a * r1 + r2) - a * B(r1) - B(r2))) < 1e-12 * np.max(abs(B(r1)))
    assert abs(r2 @ B(r1) - r1 @ B(r2)) < 1e-12 * abs(r1 @ B(r1))
    assert r1 @ B(r1) > 0 and r2 @ B(r2) > 0


def test_workers_give_identical_results(monkeypatch):
    space, A, d, _ = setup(gen_test1_mesh(2, 2, 5))
    r = np.random.default_rng(4).standard_normal(A.shape[0])
    z1 = BPX(d, A, workers=1)(r)
    monkeypatch.setenv("THBBPX_THREADS", "4")
    B4 = BPX(d, A)
    assert B4.workers == 4
    assert np.array_equal(z1, B4(r))


def test_pcg_basics():
    n = 20
    res = pcg(sp.identity(n, format="csr"), np.arange(1.0, n + 1))
    assert res.iterations == 1 and res.converged
    rng = np.random.default_rng(5)
    G = rng.standard_normal((50, 50))
    A = G @ G.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    res = pcg(A, b, tol=1e-12)
    assert res.converged
    assert np.allclose(res.x, np.linalg.solve(A, b), rtol=1e-10)
    short = pcg(A, b, tol=1e-12, maxit=3)
    assert short.iterations == 3 and not short.converged and len(short.alphas) == 3


def test_pcg_iterations_grow_slowly():
    its = {}
    for L in (4, 6):
        space, A, _, B = setup(gen_test1_mesh(2, 2, L))
        b = np.random.default_rng(0).standard_normal(A.shape[0])
        its[L] = pcg(A, b, B, tol=1e-8).iterations
    assert its[6] - its[4] <= 2


def test_lanczos_with_exact_inverse():
    space = HierarchicalSpace(gen_test1_mesh(2, 2, 3), "thb")
    A = assemble_stiffness(space)
    est = estimate_spectrum(A, ExactSolver(A))
    assert abs(est.lambda_min - 1) < 1e-8 and abs(est.lambda_max - 1) < 1e-8


@pytest.mark.parametrize("kind,smoother,L", [("tsupp", "sgs", 4), ("all", "jacobi", 3), ("new", "sgs", 4)])
def test_lanczos_matches_dense(kind, smoother, L):
    _, A, _, B = setup(gen_test1_mesh(2, 2, L), kind, smoother)
    est = estimate_spectrum(A, B)
    lo, hi = dense_spectrum(A, B.dense())
    assert est.converged and est.lambda_min <= est.lambda_max
    assert abs(est.lambda_max - hi) <= 0.01 * hi
    assert abs(est.lambda_min - lo) <= 0.02 * lo


def test_spectral_estimate_scaling_invariance():
    _, A, _, B = setup(gen_test1_mesh(2, 2, 4))
    c = 37.5
    e1 = estimate_spectrum(A, B)
    e2 = estimate_spectrum(c * A, lambda r: B(r) / c)
    assert abs(e2.kappa / e1.kappa - 1) < 1e-10


def test_nonconvergence_is_flagged():
    _, A, _, B = setup(gen_test1_mesh(2, 2, 4))
    est = estimate_spectrum(A, B, maxit=3)
    assert not est.converged and est.iterations == 3


def test_kind_all_lambda_max_equals_levels():
    for L in (3, 6):
        _, A, _, B = setup(gen_test1_mesh(1, 2, L), "all")
        assert abs(estimate_spectrum(A, B).lambda_max - L) < 0.05 * L


def test_unpreconditioned_spectrum_paths_agree():
    space = HierarchicalSpace(gen_test1_mesh(2, 2, 4), "thb")
    A = assemble_stiffness(space)
    d = dense_spectrum(A)
    B = BPX(Decomposition(space, "tsupp"), A)
    it = unpreconditioned_spectrum(A, B, dense_limit=10)
    assert abs(it.lambda_max / d[1] - 1) < 1e-5
    assert abs(it.lambda_min / d[0] - 1) < 1e-5


def level_extremes(S):
    n = S.shape[0]
    if n <= 1500:
        w = np.linalg.eigvalsh(S.toarray())
        return w[0], w[-1]
    v0 = np.ones(n)
    lo = spla.eigsh(S, k=1, which="SA", return_eigenvectors=False, tol=1e-8, v0=v0)[0]
    hi = spla.eigsh(S, k=1, which="LA", return_eigenvectors=False, tol=1e-8, v0=v0)[0]
    return lo, hi


@pytest.fixture(scope="module", params=[1, 2, 3])
def level_operators(request):
    """Level stiffness and scaled mass matrices on an 8-level Test 1 mesh.

    Test 1 meshes are nested in L, so the levels 0..2 of this mesh are the
    levels of the 3-level mesh."""
    p = request.param
    space = HierarchicalSpace(gen_test1_mesh(p, 2, 8), "thb")
    o = assemble(space, kinds=("stiffness", "mass"))
    I = space.interior
    A, M = o["stiffness"][I][:, I], o["mass"][I][:, I]
    out = {}
    for kind in ("tsupp", "mod", "new"):
        d = Decomposition(space, kind)
        out[kind] = (d.restrict_stiffness(A), [Ml / d.h(l) ** 2 for l, Ml in enumerate(d.restrict_stiffness(M))])
    return p, out


def test_smoothing_property_drift(level_operators):
    # generalized eigenvalues of (D_l, h_l^-2 M_l), i.e. reciprocals of those
    # of D^-1/2 h^-2 M D^-1/2; interval ratio at L=3 versus L=8
    p, ops = level_operators
    for kind, (As, Ms) in ops.items():
        iv = []
        for Al, Ml in zip(As, Ms):
            Dm = sp.diags(1 / np.sqrt(Al.diagonal()))
            lo, hi = level_extremes((Dm @ Ml @ Dm).tocsr())
            iv.append((1 / hi, 1 / lo))
        iv = np.array(iv)
        ratio = lambda k: iv[:k, 1].max() / iv[:k, 0].min()
        drift = ratio(8) / ratio(3) - 1
        print(f"A1 p={p} {kind}: ratio L=3 {ratio(3):.4g}, L=8 {ratio(8):.4g}, drift {drift:.3f}")
        assert drift < 0.20, (p, kind, drift)


def test_inverse_inequality_bounded(level_operators):
    p, ops = level_operators
    As, Ms = ops["tsupp"]
    top = []
    for Al, Ml in zip(As, Ms):
        if Ml.shape[0] <= 1500:
            top.append(sla.eigh(Al.toarray(), Ml.toarray(), eigvals_only=True)[-1])
        else:
            top.append(spla.eigsh(Al, k=1, M=Ml.tocsc(), which="LA", return_eigenvectors=False, tol=1e-8)[0])
    top = np.array(top)
    assert top[-1] <= 1.05 * top[3:-1].max()
    if p == 1:
        # Fourier symbol bound for bilinear elements: 12 per direction
        assert top.max() <= 24 + 1e-8
