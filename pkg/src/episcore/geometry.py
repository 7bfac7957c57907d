# Two-view epipolar geometry: model composition, conversion, decomposition,
# pose errors, epipolar lines, and resolution rescaling.
import numpy as np
from dataclasses import dataclass, field

ZERO_BASELINE_TOL = 1e-12


class GeometryError(ValueError):
    pass


class ZeroBaselineError(GeometryError):
    pass


class UndecidableCheiralityError(GeometryError):
    pass


def canonicalize(m):
    """Normalize a 3x3 model matrix: unit Frobenius norm, largest-|entry| positive."""
    m = np.asarray(m, dtype=float)
    n = np.linalg.norm(m)
    if n < 1e-300 or not np.isfinite(n):
        raise GeometryError("cannot canonicalize a (near-)zero or non-finite matrix")
    m = m / n
    idx = np.unravel_index(np.argmax(np.abs(m)), m.shape)
    if m[idx] < 0:
        m = -m
    return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self):
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"])


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(R @ R.T - np.eye(3)) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def baseline(self):
        return float(np.linalg.norm(self.translation))

    def to_json(self):
        return {"R": [float(x) for x in self.rotation.ravel()],
                "t": [float(x) for x in self.translation]}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["R"], dtype=float).reshape(3, 3),
                   np.array(d["t"], dtype=float))


@dataclass(frozen=True)
class FundamentalMatrix:
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", canonicalize(self.m))

    def check_rank2(self, tol=1e-7):
        s = np.linalg.svd(self.m, compute_uv=False)
        return s[2] < tol * s[0]

    def to_json(self):
        return [float(x) for x in self.m.ravel()]

    @classmethod
    def from_json(cls, v):
        return cls(np.array(v, dtype=float).reshape(3, 3))


@dataclass(frozen=True)
class EssentialMatrix:
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", canonicalize(self.m))

    def check_manifold(self, tol=1e-6):
        s = np.linalg.svd(self.m, compute_uv=False)
        return (abs(s[0] - s[1]) < tol * s[0]) and (s[2] < tol * s[0])

    def to_json(self):
        return [float(x) for x in self.m.ravel()]

    @classmethod
    def from_json(cls, v):
        return cls(np.array(v, dtype=float).reshape(3, 3))


@dataclass(frozen=True)
class Correspondence:
    pA: np.ndarray
    pB: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pA, dtype=float).reshape(2)
        b = np.asarray(self.pB, dtype=float).reshape(2)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise GeometryError("correspondence coordinates must be finite")
        object.__setattr__(self, "pA", a)
        object.__setattr__(self, "pB", b)


def corrs_to_arrays(corrs):
    """(N,2), (N,2) float arrays from a correspondence list (or a pair of arrays)."""
    if isinstance(corrs, tuple):
        pA, pB = corrs
        return np.asarray(pA, dtype=float), np.asarray(pB, dtype=float)
    pA = np.array([c.pA for c in corrs], dtype=float).reshape(-1, 2)
    pB = np.array([c.pB for c in corrs], dtype=float).reshape(-1, 2)
    return pA, pB


@dataclass(frozen=True)
class PoseError:
    rot_deg: float
    trans_deg: float = 0.0
    trans_undefined: bool = False

    def __post_init__(self):
        if not (0.0 <= self.rot_deg <= 180.0):
            raise GeometryError("rot_deg out of [0, 180]")
        if not self.trans_undefined and not (0.0 <= self.trans_deg <= 180.0):
            raise GeometryError("trans_deg out of [0, 180]")

    @property
    def max_deg(self):
        if self.trans_undefined:
            return 180.0
        return max(self.rot_deg, self.trans_deg)


def homogenize(p):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return np.array([p[0], p[1], 1.0])
    return np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)


def skew(t):
    return np.array([[0.0, -t[2], t[1]],
                     [t[2], 0.0, -t[0]],
                     [-t[1], t[0], 0.0]])


def compose_fundamental(kA, kB, pose):
    """F = kB^-T [t]x R kA^-1 for the pose mapping camera-A coordinates into camera B."""
    if pose.baseline < ZERO_BASELINE_TOL:
        raise ZeroBaselineError("fundamental matrix undefined for zero baseline")
    f = kB.inverse.T @ skew(pose.translation) @ pose.rotation @ kA.inverse
    return FundamentalMatrix(f)


def project_essential(m):
    """Closest essential matrix: singular values replaced by (s, s, 0), s = mean of top two."""
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=float))
    sbar = 0.5 * (s[0] + s[1])
    return u @ np.diag([sbar, sbar, 0.0]) @ vt


def fundamental_to_essential(f, kA, kB):
    e = kB.matrix.T @ f.m @ kA.matrix
    return EssentialMatrix(project_essential(e))


def essential_to_fundamental(e, kA, kB):
    f = kB.inverse.T @ e.m @ kA.inverse
    return FundamentalMatrix(f)


def _depths_for_pose(R, t, xA, xB):
    """Per-correspondence depths (zA, zB) for normalized rays xA, xB (N,3)."""
    RxA = xA @ R.T
    cross = np.cross(xB, RxA)
    denom = np.einsum("ij,ij->i", cross, cross)
    denom = np.where(denom < 1e-300, 1.0, denom)
    zA = np.einsum("ij,ij->i", np.cross(t[None, :], xB), cross) / denom
    zB = zA * RxA[:, 2] + t[2]
    return zA, zB


def decompose_essential(e, corrs, kA, kB):
    """Pick the (R, t) candidate with the most triangulated points in front of both cameras."""
    pA, pB = corrs_to_arrays(corrs)
    if pA.shape[0] < 1:
        raise GeometryError("at least one correspondence required for cheirality")
    u, s, vt = np.linalg.svd(e.m)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = u @ w @ vt
    R2 = u @ w.T @ vt
    t0 = u[:, 2]

    xA = homogenize(pA) @ kA.inverse.T
    xB = homogenize(pB) @ kB.inverse.T
    best, best_count = None, -1
    for R in (R1, R2):
        for t in (t0, -t0):
            zA, zB = _depths_for_pose(R, t, xA, xB)
            count = int(np.sum((zA > 0) & (zB > 0)))
            if count > best_count:
                best, best_count = (R, t), count
    if best_count == 0:
        raise UndecidableCheiralityError("no candidate places any point in front of both cameras")
    R, t = best
    return RelativePose(R, t / np.linalg.norm(t))


def rotation_angle_deg(Ra, Rb):
    # atan2 form of arccos((trace - 1)/2): identical in exact arithmetic but
    # keeps precision near 0 and 180 degrees.
    dR = Ra.T @ Rb
    c = np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)
    v = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]]) / 2.0
    s = np.linalg.norm(v)
    if c < 0.0:
        # Near 180 degrees the skew part loses accuracy; fall back to arccos.
        return float(np.degrees(np.arccos(c)))
    return float(np.degrees(np.arctan2(s, c)))


def direction_angle_deg(a, b, sign_agnostic=False):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = float(np.dot(a, b))
    if sign_agnostic and c < 0:
        b = -b
        c = -c
    s = float(np.linalg.norm(np.cross(a, b)))
    return float(np.degrees(np.arctan2(s, np.clip(c, -1.0, 1.0))))


def pose_error(est, gt, sign_agnostic=False):
    rot = rotation_angle_deg(est.rotation, gt.rotation)
    if est.baseline < ZERO_BASELINE_TOL or gt.baseline < ZERO_BASELINE_TOL:
        return PoseError(rot_deg=rot, trans_deg=0.0, trans_undefined=True)
    trans = direction_angle_deg(est.translation, gt.translation, sign_agnostic=sign_agnostic)
    return PoseError(rot_deg=rot, trans_deg=trans)


def epipolar_line(f, pA):
    """Line l = F p̄A in image B, normalized so a^2 + b^2 = 1. None when pA is the epipole."""
    m = f.m if isinstance(f, (FundamentalMatrix, EssentialMatrix)) else np.asarray(f, dtype=float)
    l = m @ homogenize(np.asarray(pA, dtype=float))
    n = np.hypot(l[0], l[1])
    if n < 1e-12 * max(np.linalg.norm(l), 1.0):
        return None
    return l / n


def rescale_fundamental(f, sA, sB):
    """Conjugate F so that coordinates scaled by sA (image A) and sB (image B) stay on-constraint."""
    if sA <= 0 or sB <= 0:
        raise GeometryError("scale factors must be positive")
    dA = np.diag([1.0 / sA, 1.0 / sA, 1.0])
    dB = np.diag([1.0 / sB, 1.0 / sB, 1.0])
    return FundamentalMatrix(dB.T @ f.m @ dA)


def pose_error_of_hypothesis(m, gt_pose, corrs, kA, kB, model_kind="f"):
    """Decompose a hypothesis matrix and compare against the ground-truth pose.

    Returns PoseError; undecidable cheirality maps to a fully-wrong (180, 180) error.
    """
    try:
        if model_kind == "f":
            e = fundamental_to_essential(FundamentalMatrix(m), kA, kB)
        else:
            e = EssentialMatrix(m)
        est = decompose_essential(e, corrs, kA, kB)
    except GeometryError:
        return PoseError(rot_deg=180.0, trans_deg=180.0)
    return pose_error(est, gt_pose)
