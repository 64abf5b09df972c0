"""Brute-force reference constructions shared by the tests."""
import numpy as np

from thbbpx.bspline import subdivision_matrix
from thbbpx.mesh import HierarchicalMesh


def dense_oracle(mesh, kind):
    """Finest-level coefficients of the HB/THB basis built from the set
    definitions with dense matrices; returns (matrix, levels, mothers)."""
    L = mesh.nlevels
    inside = []
    for l in range(L):
        sp_ = mesh.space(l)
        om = set(mesh.omega[l].tolist())
        inside.append(np.array([set(sp_.function_support(j).tolist()) <= om for j in range(sp_.size)]))
    levels, mothers = [], []
    C = np.zeros((mesh.space(0).size, 0))
    for l in range(L):
        sp_ = mesh.space(l)
        if l > 0:
            M = subdivision_matrix(mesh.space(l - 1), sp_).toarray()
            C = M @ C
            if kind == "thb":
                C[inside[l]] = 0.0
        # functions of level l present in the basis: supp in Omega^l
        new = np.nonzero(inside[l])[0]
        E = np.zeros((sp_.size, len(new)))
        E[new, np.arange(len(new))] = 1.0
        C = np.hstack([C, E])
        levels += [l] * len(new)
        mothers += list(new)
        # drop functions whose support lies in Omega^{l+1}
        nxt = np.zeros(sp_.size, bool)
        if l + 1 < L:
            refined = set(mesh.parents(l + 1, mesh.omega[l + 1]).tolist())
            nxt = np.array([set(sp_.function_support(j).tolist()) <= refined
                            for j in range(sp_.size)])
        keep = np.array([not (lv == l and nxt[m]) for lv, m in zip(levels, mothers)])
        C, levels, mothers = C[:, keep], list(np.array(levels)[keep]), list(np.array(mothers)[keep])
    return C, np.array(levels), np.array(mothers)


def truncated(mesh, l):
    """The intermediate mesh Q^l made of the first l+1 levels."""
    return HierarchicalMesh(mesh.base, mesh.omega[: l + 1])


def lift(mesh, C, frm, to):
    """Re-express level-``frm`` coefficients on level ``to``."""
    for k in range(frm, to):
        C = subdivision_matrix(mesh.space(k), mesh.space(k + 1)).toarray() @ C
    return C


def _interior(mesh, levels, mothers):
    out = []
    for lv, m in zip(levels, mothers):
        shape = mesh.space(lv).shape
        mi = np.unravel_index(m, shape)
        out.append(all(0 < a < n - 1 for a, n in zip(mi, shape)))
    return np.array(out, dtype=bool)


def subspace_oracle(mesh, l, kind):
    """Level-l subspace of a decomposition from the set definitions.

    Returns ``(pairs, C)``: the ``(level, mother)`` of each generator in the
    numbering of the intermediate space, and their level-l coefficients.
    Only interior functions are kept.
    """
    basis = "hb" if kind == "hsupp" else "thb"
    C, lev, mot = dense_oracle(truncated(mesh, l), basis)
    keep = _interior(mesh, lev, mot)
    C, lev, mot = C[:, keep], lev[keep], mot[keep]
    if l == 0 or kind == "all":
        sel = np.ones(len(lev), dtype=bool)
    elif kind == "new":
        sel = lev == l
    elif kind in ("tsupp", "hsupp"):
        sp_ = mesh.space(l)
        om = set(mesh.omega[l].tolist())
        touches = np.array([bool(om & set(sp_.function_support(j).tolist())) for j in range(sp_.size)])
        sel = np.array([np.any(touches[np.abs(C[:, i]) > 0]) for i in range(C.shape[1])])
    else:  # mod: functions of Q^l that are not functions of Q^{l-1}
        Cp, lp, mp = dense_oracle(truncated(mesh, l - 1), "thb")
        Cp = lift(mesh, Cp, l - 1, l)
        sel = np.array([not np.any(np.all(np.abs(Cp - C[:, [i]]) < 1e-13, axis=0))
                        for i in range(C.shape[1])])
    pairs = list(zip(lev[sel].tolist(), mot[sel].tolist()))
    return pairs, C[:, sel]

