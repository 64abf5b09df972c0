"""Benchmark meshes and experiment drivers."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bpx import BPX, KINDS, Decomposition, estimate_spectrum, pcg, unpreconditioned_spectrum
from .bspline import TensorSpace
from .data import load_geometry
from .galerkin import GeometryMap, build_system
from .mesh import AdmissibilityClass, HierarchicalMesh
from .space import HierarchicalSpace


def _corner_block(shape, n):
    """Flat ids of the ``[0, n)^d`` corner block of a grid."""
    grid = np.meshgrid(*[np.arange(min(n, s)) for s in shape], indexing="ij")
    return np.sort(np.ravel_multi_index([g.ravel() for g in grid], shape))


def gen_test1_mesh(p, d, L):
    """``(2p+1)^d`` base grid; passing from level l to l+1 refines the corner
    block of ``p + 2^l`` level-l elements per direction.  ``L`` is the number
    of levels."""
    mesh = HierarchicalMesh(TensorSpace.uniform((p,) * d, (2 * p + 1,) * d))
    omega = [np.arange(mesh.base.num_elements)]
    for l in range(L - 1):
        block = _corner_block(mesh.grid_shape(l), p + 2 ** l)
        omega.append(mesh.children(l, block))
    return HierarchicalMesh(mesh.base, omega)


def corner_ninth(mesh, level):
    """Level elements inside ``(0, 1/3)^d`` for a base grid divisible by 3."""
    n = [s // 3 for s in mesh.grid_shape(level)]
    grid = np.meshgrid(*[np.arange(k) for k in n], indexing="ij")
    return np.sort(np.ravel_multi_index([g.ravel() for g in grid], mesh.grid_shape(level)))


def gen_test2_mesh(L, p=1, d=2):
    """``9^d`` base grid with ``Omega^l = (0,1/3)^d`` for every ``l >= 1``."""
    mesh = HierarchicalMesh(TensorSpace.uniform((p,) * d, (9,) * d))
    omega = [np.arange(mesh.base.num_elements)]
    for l in range(1, L):
        omega.append(corner_ninth(mesh, l))
    return HierarchicalMesh(mesh.base, omega)


def finest_marked_in_corner(mesh):
    """Active elements of the finest level inside ``(0, 1/3)^d``."""
    l = mesh.nlevels - 1
    act = mesh.active_elements[l]
    return {l: act[np.isin(act, corner_ninth(mesh, l))]}


def gen_test3_mesh(L, p, adm, d=2):
    """Test-2 marking followed by admissible closure at every step."""
    mesh = HierarchicalMesh(TensorSpace.uniform((p,) * d, (9,) * d))
    while mesh.nlevels < L:
        marked = finest_marked_in_corner(mesh)
        mesh = mesh.admissible_refine(marked, adm) if adm is not None else mesh.refine_raw(marked)
    return mesh


# ---------------------------------------------------------------------------
# experiment drivers

TESTS = ("test1", "test2", "test3", "test4", "test5", "custom")
CSV_HEADER = "level,NoPrec,Gauss-Seidel,Jacobi,lambda_min,lambda_max,dofs,iters"
LEVEL_CAPS = {1: 12, 2: 10, 3: 4}


class SpecError(ValueError):
    """Invalid run configuration; ``field`` names the offending option."""

    def __init__(self, field, message):
        super().__init__(f"--{field}: {message}")
        self.field = field


@dataclass
class RunSpec:
    test: str
    dim: int = 2
    degree: int = 2
    levels: int = 4
    decomp: str = "tsupp"
    smoother: str = "sgs"
    adm: Optional[str] = None
    basis: str = "thb"
    geometry: Optional[str] = None
    out: str = "results"
    seed: int = 0
    mesh: Optional[str] = None
    nel: Optional[int] = None
    allow_large: bool = False

    def validate(self):
        if self.test not in TESTS:
            raise SpecError("test", f"unknown test {self.test!r}")
        if self.dim not in (1, 2, 3):
            raise SpecError("dim", "must be 1, 2 or 3")
        if self.degree < 1:
            raise SpecError("degree", "must be at least 1")
        if self.levels < 1:
            raise SpecError("levels", "must be at least 1")
        if not self.allow_large and self.levels > LEVEL_CAPS[self.dim]:
            raise SpecError("levels", f"exceeds the cap {LEVEL_CAPS[self.dim]} for d={self.dim}")
        if self.decomp not in KINDS:
            raise SpecError("decomp", f"must be one of {', '.join(KINDS)}")
        if self.smoother not in ("sgs", "jacobi"):
            raise SpecError("smoother", "must be sgs or jacobi")
        if self.basis not in ("hb", "thb"):
            raise SpecError("basis", "must be hb or thb")
        if self.test not in ("test4",) and (self.decomp == "hsupp") != (self.basis == "hb"):
            raise SpecError("decomp", f"{self.decomp} is not available for {self.basis.upper()} splines")
        try:
            adm = self.admissibility()
        except ValueError as exc:
            raise SpecError("adm", str(exc)) from None
        if self.test in ("test3", "test4") and adm is None:
            raise SpecError("adm", f"{self.test} needs an admissibility class")
        if self.test in ("test2", "test3", "test4", "test5") and self.dim != 2:
            raise SpecError("dim", f"{self.test} is two-dimensional")
        if self.test == "test5" and self.degree < 2:
            raise SpecError("degree", "the residual estimator needs degree >= 2")
        if self.mesh is not None and self.test != "custom":
            raise SpecError("mesh", "only used by the custom test")
        return self

    def admissibility(self):
        if self.adm is None:
            return AdmissibilityClass("T", 2) if self.test == "test5" else None
        return AdmissibilityClass.parse(self.adm)

    def load_geometry(self):
        if self.geometry is None:
            if self.test == "test5":
                return load_geometry("lshape_c0.geo")
            return GeometryMap.identity(self.dim)
        path = Path(self.geometry)
        try:
            geom = GeometryMap.from_file(path) if path.exists() else load_geometry(self.geometry)
        except (OSError, ValueError) as exc:
            raise SpecError("geometry", str(exc)) from None
        if geom.dim != self.dim:
            raise SpecError("geometry", f"geometry is {geom.dim}-dimensional, expected {self.dim}")
        return geom


def _fmt(v):
    return f"{v:.5e}"


def level_row(space, geom, decomp, seed=0, level=None, f=None, smoother_kinds=("sgs", "jacobi")):
    """One CSV row: spectral data of BPX with both smoothers, the unpreconditioned
    condition number and PCG iterations (tolerance 1e-8) for the chosen smoother."""
    f = f if f is not None else (lambda x: np.ones(len(x)))
    system = build_system(space, geom, f)
    A = system.A
    d = Decomposition(space, decomp)
    est = {}
    B = {}
    for kind in smoother_kinds:
        B[kind] = BPX(d, A, kind)
        est[kind] = estimate_spectrum(A, B[kind], seed=seed)
    main = smoother_kinds[0]
    noprec = unpreconditioned_spectrum(A, precond=B[main], seed=seed)
    its = pcg(A, system.b, B[main], tol=1e-8, maxit=5000).iterations
    return {
        "level": space.nlevels if level is None else level,
        "NoPrec": noprec.kappa,
        "Gauss-Seidel": est["sgs"].kappa if "sgs" in est else float("nan"),
        "Jacobi": est["jacobi"].kappa if "jacobi" in est else float("nan"),
        "lambda_min": est[main].lambda_min,
        "lambda_max": est[main].lambda_max,
        "dofs": A.shape[0],
        "iters": its,
    }


def write_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            vals = [str(int(r["level"]))]
            vals += [_fmt(r[k]) for k in ("NoPrec", "Gauss-Seidel", "Jacobi", "lambda_min", "lambda_max")]
            vals += [str(int(r["dofs"])), str(int(r["iters"]))]
            fh.write(",".join(vals) + "\n")


def export_mesh(mesh, stem):
    Path(f"{stem}.txt").write_text(mesh.to_text())
    if mesh.dim == 2:
        Path(f"{stem}.svg").write_text(mesh.to_svg())


def _smoothers(spec):
    return ("sgs", "jacobi") if spec.smoother == "sgs" else ("jacobi", "sgs")


def _mesh_for(spec, L, adm):
    p, d = spec.degree, spec.dim
    if spec.test == "test1":
        return gen_test1_mesh(p, d, L)
    if spec.test == "test2":
        return gen_test2_mesh(L, p, d)
    return gen_test3_mesh(L, p, adm, d)


def _adm_tag(adm):
    return "none" if adm is None else f"{adm.kind}{adm.m}"


def run(spec, log=None):
    """Execute a run and return the list of written files."""
    spec.validate()
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    geom = spec.load_geometry()
    adm = spec.admissibility()
    smoothers = _smoothers(spec)
    written = []

    def emit(name, rows):
        path = out / name
        write_csv(path, rows)
        written.append(path)

    if spec.test == "custom":
        if spec.mesh is not None:
            mesh = HierarchicalMesh.from_text(Path(spec.mesh).read_text())
        else:
            nel = spec.nel or 2 * spec.degree + 1
            mesh = HierarchicalMesh(TensorSpace.uniform((spec.degree,) * spec.dim, (nel,) * spec.dim))
        space = HierarchicalSpace(mesh, spec.basis)
        emit(f"custom_d{spec.dim}_p{spec.degree}_{spec.decomp}.csv",
             [level_row(space, geom, spec.decomp, spec.seed, smoother_kinds=smoothers)])
        export_mesh(mesh, out / f"custom_d{spec.dim}_p{spec.degree}_mesh")
        return written

    if spec.test == "test5":
        from .adaptivity import AdaptiveConfig, adaptive_loop, lshape_problem, Problem
        prob = lshape_problem(spec.degree)
        if spec.geometry is not None:
            prob = Problem(prob.base, geom, prob.f)
        cfg = AdaptiveConfig(adm=adm if spec.adm != "none" else None, max_levels=spec.levels,
                             smoother=spec.smoother, decomposition=spec.decomp, seed=spec.seed)
        rows = []
        stem = f"test5_p{spec.degree}_{_adm_tag(cfg.adm)}"

        def record(step):
            other = BPX(Decomposition(step.space, cfg.decomposition), step.A, smoothers[1])
            kap = {smoothers[0]: step.bpx.kappa,
                   smoothers[1]: estimate_spectrum(step.A, other, seed=spec.seed).kappa}
            rows.append({"level": step.mesh.nlevels, "NoPrec": step.noprec.kappa,
                         "Gauss-Seidel": kap["sgs"], "Jacobi": kap["jacobi"],
                         "lambda_min": step.bpx.lambda_min, "lambda_max": step.bpx.lambda_max,
                         "dofs": step.dofs, "iters": step.iterations})
            if log:
                log(f"step {len(rows)}: levels={step.mesh.nlevels} dofs={step.dofs} "
                    f"kappa={step.bpx.kappa:.4g}")

        steps = adaptive_loop(cfg, prob, log=record)
        emit(stem + ".csv", rows)
        export_mesh(steps[-1].mesh, out / (stem + "_mesh"))
        return written

    if spec.test == "test4":
        m = adm.m
        for kind in ("H", "T"):
            a = AdmissibilityClass(kind, m)
            for basis, decomp in (("hb", "hsupp"), ("thb", "tsupp")):
                rows = []
                for L in range(1, spec.levels + 1):
                    mesh = gen_test3_mesh(L, spec.degree, a, spec.dim)
                    space = HierarchicalSpace(mesh, basis)
                    rows.append(level_row(space, geom, decomp, spec.seed, L, smoother_kinds=smoothers))
                    if log:
                        log(f"{kind}{m} {basis} L={L} kappa={rows[-1]['Gauss-Seidel']:.4g}")
                emit(f"test4_p{spec.degree}_{kind}{m}_{basis}_{decomp}.csv", rows)
            export_mesh(mesh, out / f"test4_p{spec.degree}_{kind}{m}_mesh")
        return written

    rows = []
    mesh = None
    for L in range(1, spec.levels + 1):
        mesh = _mesh_for(spec, L, adm)
        space = HierarchicalSpace(mesh, spec.basis)
        rows.append(level_row(space, geom, spec.decomp, spec.seed, L, smoother_kinds=smoothers))
        if log:
            log(f"L={L} dofs={rows[-1]['dofs']} lambda=({rows[-1]['lambda_min']:.4g}, "
                f"{rows[-1]['lambda_max']:.4g})")
    tag = f"_{_adm_tag(adm)}" if spec.test == "test3" else ""
    stem = f"{spec.test}_d{spec.dim}_p{spec.degree}_{spec.decomp}{tag}"
    emit(stem + ".csv", rows)
    export_mesh(mesh, out / (stem + "_mesh"))
    return written
