# Hypothesis pool generation, classical scoring, refinement, degeneracy checks.
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .criteria import sampson_residuals
from .geometry import (FundamentalMatrix, EssentialMatrix, canonicalize,
                       essential_to_fundamental, homogenize)
from .solvers import MINIMAL_SIZES, DegenerateSampleError, solve_minimal, solve_f8, \
    hartley_normalize

DEFAULT_THRESHOLD_PX = 1.0


class PoolGenerationError(RuntimeError):
    pass


@dataclass
class HypothesisPool:
    model_kind: str                  # "f" or "e"
    hypotheses: list                 # list of 3x3 arrays (canonicalized)
    provenance: list                 # per-hypothesis minimal-sample index lists
    seed: int

    def __len__(self):
        return len(self.hypotheses)

    def to_json(self, pair_id):
        return {"pair_id": pair_id, "model_kind": self.model_kind, "seed": int(self.seed),
                "hypotheses": [[float(x) for x in h.ravel()] for h in self.hypotheses],
                "provenance": [[int(i) for i in p] for p in self.provenance]}

    @classmethod
    def from_json(cls, d):
        return cls(model_kind=d["model_kind"],
                   hypotheses=[np.array(h, dtype=float).reshape(3, 3)
                               for h in d["hypotheses"]],
                   provenance=[list(p) for p in d["provenance"]],
                   seed=int(d["seed"]))


@dataclass
class ScoreRecord:
    hypothesis_index: int
    value: float
    method: str


def generate_pool(pA, pB, n, solver="f7", seed=0, kA=None, kB=None, pair_id=0):
    """Draw uniform minimal samples until exactly n hypotheses are collected."""
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    m = MINIMAL_SIZES[solver]
    if pA.shape[0] < m:
        raise PoolGenerationError(f"need at least {m} correspondences for {solver}")
    gen = rngmod.stream(seed, "pool", pair_id)
    hypotheses, provenance = [], []
    attempts = 0
    while len(hypotheses) < n:
        attempts += 1
        if attempts > 100 * n:
            raise PoolGenerationError(f"could not reach {n} hypotheses in {attempts} attempts")
        idx = gen.choice(pA.shape[0], size=m, replace=False)
        try:
            sols = solve_minimal(pA[idx], pB[idx], solver, kA, kB)
        except DegenerateSampleError:
            continue
        for s in sols:
            if len(hypotheses) < n:
                hypotheses.append(s.m)
                provenance.append(list(int(i) for i in idx))
    kind = "e" if solver == "e8" else "f"
    return HypothesisPool(model_kind=kind, hypotheses=hypotheses,
                          provenance=provenance, seed=int(seed))


def _f_matrix_for_scoring(hypothesis, kA=None, kB=None, model_kind="f"):
    m = hypothesis.m if hasattr(hypothesis, "m") else np.asarray(hypothesis, dtype=float)
    if model_kind == "e":
        return essential_to_fundamental(EssentialMatrix(m), kA, kB).m
    return canonicalize(m)


MARGINALIZATION_MAX_PX = 10.0


def msac_value(res_sq, threshold):
    # fsum: correctly rounded, so the score is exactly order-invariant.
    import math
    return math.fsum(np.maximum(0.0, 1.0 - res_sq / threshold ** 2))


def score(hypothesis, pA, pB, method="ransac", threshold=DEFAULT_THRESHOLD_PX,
          kA=None, kB=None, model_kind="f"):
    """Classical hypothesis score (higher is better), thresholds in pixels."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    if pA.shape[0] == 0:
        return 0.0
    F = _f_matrix_for_scoring(hypothesis, kA, kB, model_kind)
    res_sq = sampson_residuals(F, pA, pB)
    if method == "ransac":
        return float(np.sum(res_sq < threshold ** 2))
    if method == "msac":
        return msac_value(res_sq, threshold)
    if method == "marginalized":
        # Threshold-marginalized approximation: mean truncated-quadratic score
        # over a log-spaced threshold grid. The upper end is pinned at a fixed
        # noise scale, which is what makes the score insensitive to the
        # reference threshold.
        grid = np.geomspace(threshold / 4.0,
                            max(threshold * 4.0, MARGINALIZATION_MAX_PX), 8)
        return float(np.mean([msac_value(res_sq, t) for t in grid]))
    raise ValueError(f"unknown scoring method {method!r}")


def inlier_mask(hypothesis, pA, pB, threshold, kA=None, kB=None, model_kind="f"):
    F = _f_matrix_for_scoring(hypothesis, kA, kB, model_kind)
    return sampson_residuals(F, np.asarray(pA, float), np.asarray(pB, float)) < threshold ** 2


def _sampson_cost(F, pA, pB):
    return float(np.sum(sampson_residuals(F, pA, pB)))


def _lm_refine_f(F0, pA, pB, max_iters=50, rel_tol=1e-10):
    """Levenberg-Marquardt on the 9 matrix entries, re-projected to rank 2 each step."""
    from .solvers import _rank2_project

    def residual_vec(F):
        return np.sqrt(np.maximum(sampson_residuals(F, pA, pB), 0.0))

    F = canonicalize(_rank2_project(F0))
    cost = _sampson_cost(F, pA, pB)
    lam = 1e-3
    h = 1e-7
    for _ in range(max_iters):
        r = residual_vec(F)
        J = np.zeros((r.size, 9))
        for k in range(9):
            dF = F.copy().ravel()
            dF[k] += h
            J[:, k] = (residual_vec(dF.reshape(3, 3)) - r) / h
        g = J.T @ r
        H = J.T @ J
        accepted = False
        for _ in range(10):
            try:
                step = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            Fn = canonicalize(_rank2_project((F.ravel() + step).reshape(3, 3)))
            cn = _sampson_cost(Fn, pA, pB)
            if cn < cost:
                rel = (cost - cn) / max(cost, 1e-300)
                F, cost = Fn, cn
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                if rel < rel_tol:
                    return F
                break
            lam *= 10.0
        if not accepted:
            return F
    return F


def refine(hypothesis, pA, pB, threshold=DEFAULT_THRESHOLD_PX, kA=None, kB=None,
           model_kind="f"):
    """LSQ + LM refinement on the inlier set; never returns a worse-scoring model.

    Returns (refined hypothesis matrix, refined flag).
    """
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    F_in = _f_matrix_for_scoring(hypothesis, kA, kB, model_kind)
    mask = sampson_residuals(F_in, pA, pB) < threshold ** 2
    if int(mask.sum()) < 8:
        return F_in, False
    iA, iB = pA[mask], pB[mask]
    try:
        F_ls = solve_f8(iA, iB)[0].m
    except DegenerateSampleError:
        return F_in, False
    start = F_ls if _sampson_cost(F_ls, iA, iB) < _sampson_cost(F_in, iA, iB) else F_in
    F_lm = _lm_refine_f(start, iA, iB)
    res_in = sampson_residuals(F_in, iA, iB)
    res_lm = sampson_residuals(F_lm, iA, iB)
    if msac_value(res_lm, threshold) >= msac_value(res_in, threshold):
        if model_kind == "e":
            from .geometry import fundamental_to_essential
            return fundamental_to_essential(FundamentalMatrix(F_lm), kA, kB).m, True
        return F_lm, True
    return F_in, False


def _homography_dlt(pA, pB):
    nA, TA = hartley_normalize(pA)
    nB, TB = hartley_normalize(pB)
    a = homogenize(nA)
    rows = []
    for i in range(pA.shape[0]):
        x, y = nB[i]
        rows.append(np.concatenate([np.zeros(3), -a[i], y * a[i]]))
        rows.append(np.concatenate([a[i], np.zeros(3), -x * a[i]]))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    H = vt[8].reshape(3, 3)
    return np.linalg.inv(TB) @ H @ TA


def _homography_sym_err(H, pA, pB):
    a = homogenize(pA)
    b = homogenize(pB)
    Ha = a @ H.T
    Hinvb = b @ np.linalg.inv(H).T
    wa = np.where(np.abs(Ha[:, 2]) < 1e-300, np.inf, Ha[:, 2])
    wb = np.where(np.abs(Hinvb[:, 2]) < 1e-300, np.inf, Hinvb[:, 2])
    fwd = np.hypot(Ha[:, 0] / wa - pB[:, 0], Ha[:, 1] / wa - pB[:, 1])
    bwd = np.hypot(Hinvb[:, 0] / wb - pA[:, 0], Hinvb[:, 1] / wb - pA[:, 1])
    return fwd + bwd


def degeneracy_check(hypothesis, pA, pB, threshold=DEFAULT_THRESHOLD_PX,
                     kA=None, kB=None, model_kind="f", seed=0):
    """Flag hypotheses whose inliers are explained by a single homography.

    Returns (sound: bool, low_support: bool).
    """
    pA = np.asarray(pA, dtype=float)
    pB = np.asarray(pB, dtype=float)
    mask = inlier_mask(hypothesis, pA, pB, threshold, kA, kB, model_kind)
    iA, iB = pA[mask], pB[mask]
    n = iA.shape[0]
    if n < 4:
        return True, True
    gen = rngmod.stream(seed, "degeneracy")
    best_frac = 0.0
    for _ in range(20):
        idx = gen.choice(n, size=4, replace=False)
        try:
            H = _homography_dlt(iA[idx], iB[idx])
        except (DegenerateSampleError, np.linalg.LinAlgError):
            continue
        if abs(np.linalg.det(H)) < 1e-12:
            continue
        err = _homography_sym_err(H, iA, iB)
        frac = float(np.mean(err < threshold))
        best_frac = max(best_frac, frac)
    return best_frac < 0.8, False


def select_best(pool, records):
    """Argmax of score value; ties broken by lowest hypothesis index."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    if len(records) < len(pool):
        raise ValueError("score records do not cover the pool")
    best_idx, best_val = None, -np.inf
    for r in sorted(records, key=lambda r: r.hypothesis_index):
        if r.value > best_val:
            best_idx, best_val = r.hypothesis_index, r.value
    return best_idx
