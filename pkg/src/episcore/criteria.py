# Epipolar-constraint error criteria and oracle hypothesis scoring.
import enum

import numpy as np

from .geometry import corrs_to_arrays, homogenize


class IndeterminateResidualError(ValueError):
    pass


class Criterion(enum.Enum):
    SAMPSON = "sampson"
    SED = "sed"
    EPIPOLAR = "epipolar"
    REPROJECTION = "reprojection"


class Aggregate(enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"
    TRUNCATED_MEAN = "truncated_mean"


def _lines(F, pA, pB):
    """Epipolar lines lB = F pA_h (in image B) and lA = F^T pB_h (in image A)."""
    pAh = homogenize(pA)
    pBh = homogenize(pB)
    lB = pAh @ F.T
    lA = pBh @ F
    algebraic = np.einsum("ij,ij->i", pBh, lB)
    return lA, lB, algebraic


def sampson_residuals(F, pA, pB):
    """Squared Sampson distance (pixels^2) per correspondence."""
    lA, lB, r = _lines(F, pA, pB)
    den = lB[:, 0] ** 2 + lB[:, 1] ** 2 + lA[:, 0] ** 2 + lA[:, 1] ** 2
    bad = den < 1e-300
    den = np.where(bad, 1.0, den)
    out = r ** 2 / den
    out[bad] = np.inf
    return out


def _point_line_dist(p, l):
    num = np.abs(l[:, 0] * p[:, 0] + l[:, 1] * p[:, 1] + l[:, 2])
    den = np.hypot(l[:, 0], l[:, 1])
    bad = den < 1e-300
    den = np.where(bad, 1.0, den)
    out = num / den
    out[bad] = np.inf
    return out


def sed_residuals(F, pA, pB):
    lA, lB, _ = _lines(F, pA, pB)
    return _point_line_dist(pB, lB) + _point_line_dist(pA, lA)


def epipolar_residuals(F, pA, pB):
    """One-sided distance of pB to its epipolar line in image B."""
    _, lB, _ = _lines(F, pA, pB)
    return _point_line_dist(pB, lB)


def _reprojection_one(F, pa, pb):
    """Exact minimal point correction subject to the epipolar constraint.

    Single-variable pencil parameterization: corrected epipolar lines rotate
    about the epipoles; the stationarity condition is a degree-6 polynomial
    whose real roots are candidate minima.
    """
    # Translate both points to the origin.
    Ta = np.array([[1.0, 0.0, -pa[0]], [0.0, 1.0, -pa[1]], [0.0, 0.0, 1.0]])
    Tb = np.array([[1.0, 0.0, -pb[0]], [0.0, 1.0, -pb[1]], [0.0, 0.0, 1.0]])
    Fs = np.linalg.inv(Tb).T @ F @ np.linalg.inv(Ta)
    # Epipoles: Fs eA = 0, Fs^T eB = 0, scaled to unit (x, y) part.
    _, _, vt = np.linalg.svd(Fs)
    eA = vt[2]
    u, _, _ = np.linalg.svd(Fs)
    eB = u[:, 2]
    na = np.hypot(eA[0], eA[1])
    nb = np.hypot(eB[0], eB[1])
    if na < 1e-300 or nb < 1e-300:
        raise IndeterminateResidualError("point coincides with an epipole")
    eA = eA / na
    eB = eB / nb
    Ra = np.array([[eA[0], eA[1], 0.0], [-eA[1], eA[0], 0.0], [0.0, 0.0, 1.0]])
    Rb = np.array([[eB[0], eB[1], 0.0], [-eB[1], eB[0], 0.0], [0.0, 0.0, 1.0]])
    Fs = Rb @ Fs @ Ra.T
    f1, f2 = eA[2], eB[2]
    a, b, c, d = Fs[1, 1], Fs[1, 2], Fs[2, 1], Fs[2, 2]

    # g(t) = t((at+b)^2 + f2^2 (ct+d)^2)^2 - (ad-bc)(1 + f1^2 t^2)^2 (at+b)(ct+d)
    p1 = np.polynomial.polynomial.polymul(np.array([b, a]), np.array([b, a]))
    p2 = np.polynomial.polynomial.polymul(np.array([d, c]), np.array([d, c])) * f2 ** 2
    q = np.polynomial.polynomial.polyadd(p1, p2)
    g = np.polynomial.polynomial.polymul(np.array([0.0, 1.0]),
                                         np.polynomial.polynomial.polymul(q, q))
    r = np.polynomial.polynomial.polymul(np.array([1.0, 0.0, f1 ** 2]),
                                         np.array([1.0, 0.0, f1 ** 2]))
    r = np.polynomial.polynomial.polymul(r, np.polynomial.polynomial.polymul(
        np.array([b, a]), np.array([d, c]))) * (a * d - b * c)
    g = np.polynomial.polynomial.polysub(g, r)

    def cost(t):
        return t ** 2 / (1.0 + f1 ** 2 * t ** 2) + \
            (c * t + d) ** 2 / ((a * t + b) ** 2 + f2 ** 2 * (c * t + d) ** 2)

    best = 1.0 / f1 ** 2 + c ** 2 / (a ** 2 + f2 ** 2 * c ** 2) if abs(f1) > 1e-300 else np.inf
    coeffs = np.trim_zeros(g[::-1], "f")
    if coeffs.size > 1:
        for t in np.roots(coeffs):
            if abs(t.imag) < 1e-8 * max(1.0, abs(t.real)):
                v = cost(t.real)
                if v < best:
                    best = v
    if not np.isfinite(best):
        raise IndeterminateResidualError("no finite correction found")
    return float(np.sqrt(max(best, 0.0)))


def reprojection_residuals(F, pA, pB):
    return np.array([_reprojection_one(F, pA[i], pB[i]) for i in range(pA.shape[0])])


_RESIDUAL_FNS = {
    Criterion.SAMPSON: sampson_residuals,
    Criterion.SED: sed_residuals,
    Criterion.EPIPOLAR: epipolar_residuals,
    Criterion.REPROJECTION: reprojection_residuals,
}


def residual(f, c, criterion):
    """Residual of one correspondence; pixels^2 for SAMPSON, pixels otherwise."""
    pA, pB = corrs_to_arrays([c] if not isinstance(c, (list, tuple)) else c)
    F = f.m if hasattr(f, "m") else np.asarray(f, dtype=float)
    out = _RESIDUAL_FNS[criterion](F, pA, pB)
    val = float(out[0])
    if not np.isfinite(val):
        raise IndeterminateResidualError("degenerate epipolar line")
    return val


def residuals(f, corrs, criterion):
    pA, pB = corrs_to_arrays(corrs)
    F = f.m if hasattr(f, "m") else np.asarray(f, dtype=float)
    return _RESIDUAL_FNS[criterion](F, pA, pB)


def oracle_score(f, dense, criterion, aggregate=Aggregate.TRUNCATED_MEAN, cap=10.0):
    """Aggregate residual of a hypothesis over ground-truth correspondences (lower is better)."""
    pA, pB = corrs_to_arrays(dense)
    if pA.shape[0] == 0:
        raise ValueError("empty dense correspondence set")
    r = residuals(f, (pA, pB), criterion)
    r = r[np.isfinite(r)]
    if r.size == 0:
        raise IndeterminateResidualError("all residuals indeterminate")
    if aggregate is Aggregate.MEAN:
        value = float(np.mean(r))
    elif aggregate is Aggregate.MEDIAN:
        value = float(np.median(r))
    else:
        value = float(np.mean(np.minimum(r, cap)))
    return value
