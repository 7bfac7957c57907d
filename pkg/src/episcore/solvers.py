# Minimal and least-squares solvers for fundamental / essential matrices.
import numpy as np

from .geometry import (FundamentalMatrix, EssentialMatrix, canonicalize,
                       homogenize, project_essential)


class DegenerateSampleError(ValueError):
    pass


def hartley_normalize(p):
    """Similarity T mapping points to zero centroid and mean distance sqrt(2)."""
    p = np.asarray(p, dtype=float)
    centroid = p.mean(axis=0)
    d = np.sqrt(((p - centroid) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateSampleError("coincident points")
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return (p - centroid) * s, T


def _design_matrix(pA, pB):
    # Row i: pB_i^T F pA_i = 0 unrolled over the 9 entries of F (row-major).
    a = homogenize(pA)
    b = homogenize(pB)
    return np.einsum("ni,nj->nij", b, a).reshape(-1, 9)


def _rank2_project(F):
    u, s, vt = np.linalg.svd(F)
    return u @ np.diag([s[0], s[1], 0.0]) @ vt


def _det_pencil_cubic(F1, F2):
    """Coefficients c of det(F1 + x F2) = c0 + c1 x + c2 x^2 + c3 x^3."""
    xs = np.array([0.0, 1.0, -1.0, 2.0])
    ys = np.array([np.linalg.det(F1 + x * F2) for x in xs])
    V = np.vander(xs, 4, increasing=True)
    return np.linalg.solve(V, ys)


def solve_f7(pA, pB):
    """Seven-point solver: 1-3 fundamental matrices through the 7 correspondences."""
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    if pA.shape[0] != 7:
        raise DegenerateSampleError("seven-point solver needs exactly 7 correspondences")
    nA, TA = hartley_normalize(pA)
    nB, TB = hartley_normalize(pB)
    A = _design_matrix(nA, nB)
    _, s, vt = np.linalg.svd(A)
    if s[6] < 1e-10 * s[0]:
        # Rank below 7: the null space exceeds two dimensions.
        raise DegenerateSampleError("rank-deficient design matrix")
    F1 = vt[8].reshape(3, 3)
    F2 = vt[7].reshape(3, 3)
    c = _det_pencil_cubic(F1, F2)
    # Roots of the cubic in x for F = F1 + x F2; F2 alone covers the x->inf case.
    coeffs = c[::-1]
    lead = np.max(np.abs(coeffs))
    if lead < 1e-300:
        raise DegenerateSampleError("identically singular pencil")
    coeffs = np.trim_zeros(coeffs / lead, "f")
    solutions = []
    if coeffs.size <= 1:
        candidates = []
    else:
        candidates = [r.real for r in np.roots(coeffs)
                      if abs(r.imag) < 1e-9 * max(1.0, abs(r.real))]
    for x in candidates:
        F = F1 + x * F2
        F = TB.T @ F @ TA
        try:
            solutions.append(canonicalize(F))
        except ValueError:
            continue
    if abs(c[3]) < 1e-12 * max(1.0, lead):
        # Degree dropped: det(F2) ~ 0, so F2 itself is a solution of the pencil.
        F = TB.T @ F2 @ TA
        try:
            solutions.append(canonicalize(F))
        except ValueError:
            pass
    if not solutions:
        raise DegenerateSampleError("no real solution")
    return [FundamentalMatrix(F) for F in solutions[:3]]


def solve_f8(pA, pB):
    """Normalized eight-point solver with rank-2 projection (>= 8 correspondences)."""
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    if pA.shape[0] < 8:
        raise DegenerateSampleError("eight-point solver needs at least 8 correspondences")
    nA, TA = hartley_normalize(pA)
    nB, TB = hartley_normalize(pB)
    A = _design_matrix(nA, nB)
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0] and pA.shape[0] == 8:
        raise DegenerateSampleError("rank-deficient design matrix")
    F = _rank2_project(vt[8].reshape(3, 3))
    return [FundamentalMatrix(TB.T @ F @ TA)]


def solve_e8(pA, pB, kA, kB):
    """Eight-point essential solver in normalized camera coordinates."""
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    if pA.shape[0] < 8:
        raise DegenerateSampleError("eight-point solver needs at least 8 correspondences")
    xA = (homogenize(pA) @ kA.inverse.T)[:, :2]
    xB = (homogenize(pB) @ kB.inverse.T)[:, :2]
    nA, TA = hartley_normalize(xA)
    nB, TB = hartley_normalize(xB)
    A = _design_matrix(nA, nB)
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0] and pA.shape[0] == 8:
        raise DegenerateSampleError("rank-deficient design matrix")
    E = TB.T @ vt[8].reshape(3, 3) @ TA
    return [EssentialMatrix(project_essential(E))]


MINIMAL_SIZES = {"f7": 7, "f8": 8, "e8": 8}


def solve_minimal(pA, pB, solver, kA=None, kB=None):
    if solver == "f7":
        return solve_f7(pA, pB)
    if solver == "f8":
        return solve_f8(pA, pB)
    if solver == "e8":
        if kA is None or kB is None:
            raise ValueError("essential solver requires intrinsics")
        return solve_e8(pA, pB, kA, kB)
    raise ValueError(f"unknown solver {solver!r}")
