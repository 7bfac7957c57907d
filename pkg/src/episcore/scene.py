# Synthetic multi-plane scenes: generation, rendering, correspondence sampling,
# dense ground-truth correspondences. The stand-in for real datasets.
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .geometry import CameraIntrinsics, RelativePose, homogenize

DEPTH_CONSISTENCY = 0.01   # relative depth tolerance for co-visibility
MIN_DEPTH = 0.1


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Plane:
    center: np.ndarray       # (3,) meters, camera-A frame
    normal: np.ndarray       # (3,) unit
    u: np.ndarray            # (3,) in-plane axis
    v: np.ndarray            # (3,) in-plane axis
    half_u: float
    half_v: float
    texture_seed: int

    def to_json(self):
        return {"center": self.center.tolist(), "normal": self.normal.tolist(),
                "u": self.u.tolist(), "v": self.v.tolist(),
                "half_u": self.half_u, "half_v": self.half_v,
                "texture_seed": int(self.texture_seed)}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["center"]), np.array(d["normal"]), np.array(d["u"]),
                   np.array(d["v"]), d["half_u"], d["half_v"], d["texture_seed"])


@dataclass(frozen=True)
class PairSpec:
    noise_px: float = 1.0
    outlier_rate: float = 0.3
    n_corrs: int = 200
    overlap_band: tuple = (0.10, 0.40)

    def __post_init__(self):
        if not (0.0 <= self.outlier_rate < 1.0):
            raise ValueError("outlier_rate must be in [0, 1)")


@dataclass
class SyntheticScene:
    planes: list
    kA: CameraIntrinsics
    kB: CameraIntrinsics
    gt_pose: RelativePose
    overlap: float
    image_size: int = 64

    def to_json(self):
        return {"planes": [p.to_json() for p in self.planes],
                "kA": self.kA.to_json(), "kB": self.kB.to_json(),
                "pose": self.gt_pose.to_json(),
                "overlap": self.overlap, "image_size": self.image_size}

    @classmethod
    def from_json(cls, d):
        return cls(planes=[Plane.from_json(p) for p in d["planes"]],
                   kA=CameraIntrinsics.from_json(d["kA"]),
                   kB=CameraIntrinsics.from_json(d["kB"]),
                   gt_pose=RelativePose.from_json(d["pose"]),
                   overlap=d["overlap"], image_size=d["image_size"])


def _identity_pose():
    return RelativePose(np.eye(3), np.zeros(3))


def raycast(scene, pixels, pose=None, k=None):
    """Cast rays through pixels of a view; camera A is the world frame.

    pose maps world (camera A) coordinates into the view's camera frame;
    None means camera A itself. Returns (depth, plane_id, points_world);
    misses have depth = inf and plane_id = -1.
    """
    if k is None:
        k = scene.kA
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if pose is None:
        R, t = np.eye(3), np.zeros(3)
    else:
        R, t = pose.rotation, pose.translation
    center = -R.T @ t
    dirs = homogenize(pixels) @ k.inverse.T @ R  # world-frame ray directions
    n = pixels.shape[0]
    depth = np.full(n, np.inf)
    plane_id = np.full(n, -1, dtype=int)
    points = np.zeros((n, 3))
    for pid, pl in enumerate(scene.planes):
        dn = dirs @ pl.normal
        dn = np.where(np.abs(dn) < 1e-300, 1e-300, dn)
        s = ((pl.center - center) @ pl.normal) / dn
        q = center[None, :] + s[:, None] * dirs
        rel = q - pl.center[None, :]
        inside = (np.abs(rel @ pl.u) <= pl.half_u) & (np.abs(rel @ pl.v) <= pl.half_v)
        z = (q @ R.T[:, 2]) + t[2]
        hit = inside & (z > MIN_DEPTH) & (z < depth)
        depth[hit] = z[hit]
        plane_id[hit] = pid
        points[hit] = q[hit]
    return depth, plane_id, points


def project(points, pose, k):
    """Project world points into a view; returns (pixels (N,2), depth (N,))."""
    pc = points @ pose.rotation.T + pose.translation[None, :]
    z = pc[:, 2]
    zsafe = np.where(np.abs(z) < 1e-300, 1e-300, z)
    px = np.stack([k.fx * pc[:, 0] / zsafe + k.cx,
                   k.fy * pc[:, 1] / zsafe + k.cy], axis=1)
    return px, z


def covisibility(scene, pixels_a):
    """Per-pixel co-visibility of A-view pixels in B (occlusion-aware).

    Returns (mask, points_world, pixels_b).
    """
    S = scene.image_size
    depth_a, pid_a, pts = raycast(scene, pixels_a)
    visible_a = pid_a >= 0
    px_b, z_b = project(pts, scene.gt_pose, scene.kB)
    in_b = (z_b > MIN_DEPTH) & (px_b[:, 0] >= 0) & (px_b[:, 0] <= S - 1) \
        & (px_b[:, 1] >= 0) & (px_b[:, 1] <= S - 1)
    mask = visible_a & in_b
    if np.any(mask):
        depth_b, pid_b, _ = raycast(scene, px_b[mask], scene.gt_pose, scene.kB)
        consistent = np.abs(depth_b - z_b[mask]) <= DEPTH_CONSISTENCY * np.maximum(z_b[mask], 1e-9)
        sub = np.zeros(mask.sum(), dtype=bool)
        sub[consistent] = True
        mask2 = mask.copy()
        mask2[mask] = sub
        mask = mask2
    return mask, pts, px_b


def overlap_score(scene, grid=32):
    """Fraction of a grid of A-visible points that are co-visible in B."""
    S = scene.image_size
    xs = np.linspace(0, S - 1, grid)
    gx, gy = np.meshgrid(xs, xs)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    depth_a, pid_a, _ = raycast(scene, pix)
    visible = pid_a >= 0
    if not np.any(visible):
        return 0.0
    mask, _, _ = covisibility(scene, pix)
    return float(mask.sum() / visible.sum())


def _random_rotation(gen, max_angle_deg):
    axis = gen.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(gen.uniform(0.0, max_angle_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _sample_planes(gen, k, image_size, n_planes):
    planes = []
    S = image_size
    for _ in range(n_planes):
        px = gen.uniform(0.15 * S, 0.85 * S, size=2)
        z = gen.uniform(3.0, 8.0)
        center = z * (k.inverse @ np.array([px[0], px[1], 1.0]))
        toward = -center / np.linalg.norm(center)
        normal = _random_rotation(gen, 40.0) @ toward
        u = np.cross(normal, np.array([0.0, 0.0, 1.0]))
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(normal, np.array([0.0, 1.0, 0.0]))
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        half = gen.uniform(0.6, 2.0, size=2) * (z / 4.0)
        planes.append(Plane(center=center, normal=normal, u=u, v=v,
                            half_u=float(half[0]), half_v=float(half[1]),
                            texture_seed=int(gen.integers(0, 2 ** 31))))
    return planes


def generate_scene(spec, seed, image_size=64, planes_range=(3, 8), max_attempts=1000):
    """Multi-plane scene with camera B placed to hit the requested overlap band."""
    gen = rngmod.stream(seed, "scene")
    f = float(gen.uniform(0.9, 1.3)) * image_size
    c = (image_size - 1) / 2.0
    k = CameraIntrinsics(fx=f, fy=f, cx=c, cy=c)
    lo, hi = spec.overlap_band
    for _ in range(max_attempts):
        n_planes = int(gen.integers(planes_range[0], planes_range[1] + 1))
        planes = _sample_planes(gen, k, image_size, n_planes)
        R = _random_rotation(gen, 45.0)
        tdir = gen.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        t = tdir * gen.uniform(0.5, 2.5)
        scene = SyntheticScene(planes=planes, kA=k, kB=k,
                               gt_pose=RelativePose(R, t),
                               overlap=0.0, image_size=image_size)
        ov = overlap_score(scene)
        if lo <= ov <= hi:
            scene.overlap = ov
            return scene
    raise SceneGenerationError(f"no scene in overlap band {spec.overlap_band} "
                               f"after {max_attempts} attempts")


def _value_noise(coords_u, coords_v, scale, texture_seed, octave, lattice=17):
    gen = rngmod.stream(texture_seed, "texture", octave)
    table = gen.random((lattice, lattice))
    x = np.mod(coords_u * scale, lattice)
    y = np.mod(coords_v * scale, lattice)
    x0 = np.floor(x).astype(int) % lattice
    y0 = np.floor(y).astype(int) % lattice
    x1 = (x0 + 1) % lattice
    y1 = (y0 + 1) % lattice
    fx = x - np.floor(x)
    fy = y - np.floor(y)
    v00, v01 = table[y0, x0], table[y0, x1]
    v10, v11 = table[y1, x0], table[y1, x1]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


def _texture(rel_u, rel_v, texture_seed):
    """Procedural 3-channel value-noise texture over plane-local coordinates."""
    out = np.zeros(rel_u.shape + (3,))
    for ch in range(3):
        val = np.zeros_like(rel_u)
        amp, total = 1.0, 0.0
        for octave in range(3):
            val += amp * _value_noise(rel_u, rel_v, 2.0 * (2 ** octave),
                                      texture_seed, octave * 3 + ch)
            total += amp
            amp *= 0.5
        out[..., ch] = val / total
    return out


def render(scene, view="a"):
    """Render one view into an (S, S, 3) float image in [0, 1]; background is 0."""
    S = scene.image_size
    gx, gy = np.meshgrid(np.arange(S, dtype=float), np.arange(S, dtype=float))
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if view == "a":
        depth, pid, pts = raycast(scene, pix)
    else:
        depth, pid, pts = raycast(scene, pix, scene.gt_pose, scene.kB)
    img = np.zeros((S * S, 3))
    for i, pl in enumerate(scene.planes):
        sel = pid == i
        if not np.any(sel):
            continue
        rel = pts[sel] - pl.center[None, :]
        img[sel] = _texture(rel @ pl.u, rel @ pl.v, pl.texture_seed)
    return img.reshape(S, S, 3)


def sample_correspondences(scene, spec, seed, pair_id=0):
    """Noisy inlier + uniform outlier correspondences with ground-truth mask.

    Returns (pA (N,2), pB (N,2), inlier_mask (N,)).
    """
    gen = rngmod.stream(seed, "corrs", pair_id)
    S = scene.image_size
    n = spec.n_corrs
    pa_list, pb_list = [], []
    for _ in range(200):
        if sum(len(x) for x in pa_list) >= n:
            break
        cand = gen.uniform(0, S - 1, size=(4 * n, 2))
        mask, pts, px_b = covisibility(scene, cand)
        pa_list.append(cand[mask])
        pb_list.append(px_b[mask])
    pa = np.concatenate(pa_list, axis=0)
    pb = np.concatenate(pb_list, axis=0)
    if pa.shape[0] < n:
        raise SceneGenerationError("scene has too little co-visible surface")
    pa, pb = pa[:n], pb[:n]
    if spec.noise_px > 0:
        pa = pa + gen.normal(0.0, spec.noise_px, size=pa.shape)
        pb = pb + gen.normal(0.0, spec.noise_px, size=pb.shape)
    inliers = np.ones(n, dtype=bool)
    n_out = int(round(spec.outlier_rate * n))
    if n_out > 0:
        out_idx = gen.choice(n, size=n_out, replace=False)
        pb[out_idx] = gen.uniform(0, S - 1, size=(n_out, 2))
        inliers[out_idx] = False
    return pa, pb, inliers


def dense_gt(scene, grid_step=2.0):
    """Noiseless dense correspondences from the ground-truth geometry."""
    S = scene.image_size
    xs = np.arange(0, S - 1 + 1e-9, grid_step)
    gx, gy = np.meshgrid(xs, xs)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mask, pts, px_b = covisibility(scene, pix)
    if not np.any(mask):
        raise SceneGenerationError("no co-visible surface for dense correspondences")
    return pix[mask], px_b[mask]
