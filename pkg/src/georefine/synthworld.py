"""Ground-truth factory: parametric scenes, Lambertian rendering, exact flow,
and seeded corruption models for every input the pipeline consumes.

Textures are smooth (soft checker plus a low-amplitude plane-wave octave,
both functions of the 3D surface point) so that point-sampled renders stay
bilinear-consistent across views; a uniform-texture scene exists only as a
degenerate negative control.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .geometry import CameraIntrinsics, DepthMap, ImageGrid, SE3Pose, project, backproject

# Light points straight down so the three walls (normals in the xz plane)
# receive identical shading and the wall junctions stay intensity-continuous.
LIGHT_DIR = np.array([0.0, -1.0, 0.0])
AMBIENT = 0.55
# Saturation applied to the unit-RMS corruption field, tuned so that with
# amplitude 0.175 the corrupted standard-scene depth sits at AbsRel 0.14+-0.01.
CORRUPTION_SATURATION = 1.65


@dataclass(frozen=True)
class Texture:
    """Smooth procedural 3D texture: base + soft checker + one noise octave."""

    base: float = 0.5
    checker_amp: float = 0.24
    checker_wavelength: float = 1.1
    noise_amp: float = 0.03
    noise_wavelength: float = 0.5
    seed: int = 0

    def eval(self, points):
        p = np.asarray(points, dtype=float)
        rng = np.random.default_rng(self.seed)
        k1 = 2 * np.pi / self.checker_wavelength
        ph = rng.uniform(0, 2 * np.pi, size=3)
        val = self.base + self.checker_amp * (
            np.sin(k1 * p[..., 0] + ph[0]) * np.sin(k1 * p[..., 2] + ph[1]) * np.cos(0.5 * k1 * p[..., 1] + ph[2])
        )
        k2 = 2 * np.pi / self.noise_wavelength
        for _ in range(3):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            phase = rng.uniform(0, 2 * np.pi)
            val = val + (self.noise_amp / 3.0) * np.sin(k2 * (p @ d) + phase)
        return np.clip(val, 0.0, 1.0)


@dataclass(frozen=True)
class ScenePrimitive:
    """One renderable primitive: finite textured plane, sphere, or axis box."""

    kind: str                                  # textured_plane | sphere | box
    origin: np.ndarray                         # plane center / sphere center / box center
    extent: np.ndarray                         # plane half-extents (2,) / radius (1,) / box half-extents (3,)
    axis_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    axis_v: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "extent", np.atleast_1d(np.asarray(self.extent, dtype=float)))
        object.__setattr__(self, "axis_u", np.asarray(self.axis_u, dtype=float))
        object.__setattr__(self, "axis_v", np.asarray(self.axis_v, dtype=float))
        if np.any(self.extent <= 0):
            raise ValueError("primitive extents must be positive")

    @property
    def normal(self):
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)


def _intersect_plane(prim, origins, dirs):
    n = prim.normal
    denom = dirs @ n
    offs = (prim.origin - origins) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(denom) > 1e-12, offs / np.where(denom == 0, 1.0, denom), np.inf)
    pts = origins + np.where(np.isfinite(s), s, 0.0)[..., None] * dirs
    rel = pts - prim.origin
    a = rel @ prim.axis_u / np.dot(prim.axis_u, prim.axis_u)
    b = rel @ prim.axis_v / np.dot(prim.axis_v, prim.axis_v)
    hit = (s > 1e-9) & (np.abs(a) <= prim.extent[0]) & (np.abs(b) <= prim.extent[1])
    s = np.where(hit, s, np.inf)
    normals = np.broadcast_to(n, pts.shape)
    return s, normals


def _intersect_sphere(prim, origins, dirs):
    r = prim.extent[0]
    oc = origins - prim.origin
    a = np.sum(dirs * dirs, axis=-1)
    b = 2 * np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - r * r
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s1 = (-b - sq) / (2 * a)
    s2 = (-b + sq) / (2 * a)
    s = np.where(s1 > 1e-9, s1, s2)
    hit = ok & (s > 1e-9)
    s = np.where(hit, s, np.inf)
    pts = origins + np.where(hit, s, 0.0)[..., None] * dirs
    normals = (pts - prim.origin) / r
    return s, normals


def _box_faces(prim):
    hx, hy, hz = prim.extent
    c = prim.origin
    ex, ey, ez = np.eye(3)
    faces = []
    for axis, (u, v, h) in enumerate([(ey * hy, ez * hz, hx), (ex * hx, ez * hz, hy), (ex * hx, ey * hy, hz)]):
        n = np.eye(3)[axis] * h
        for sign in (+1, -1):
            faces.append(
                ScenePrimitive("textured_plane", c + sign * n, np.array([1.0, 1.0]),
                               axis_u=u, axis_v=v * sign, texture=prim.texture)
            )
    return faces


def _intersect(prim, origins, dirs):
    if prim.kind == "textured_plane":
        return _intersect_plane(prim, origins, dirs)
    if prim.kind == "sphere":
        return _intersect_sphere(prim, origins, dirs)
    if prim.kind == "box":
        best_s = None
        best_n = None
        for face in _box_faces(prim):
            s, n = _intersect_plane(face, origins, dirs)
            if best_s is None:
                best_s, best_n = s, np.array(np.broadcast_to(n, origins.shape), dtype=float)
            else:
                closer = s < best_s
                best_n = np.where(closer[..., None], n, best_n)
                best_s = np.where(closer, s, best_s)
        return best_s, best_n
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def raycast(scene, origins, dirs):
    """Nearest-hit query. Returns (param s, points, normals, prim index, hit mask).

    `s` is the ray parameter: with camera-frame directions K^-1 [u,v,1] rotated
    into the world, it equals the camera-z depth of the hit.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    best_s = np.full(dirs.shape[:-1], np.inf)
    best_n = np.zeros(dirs.shape)
    best_idx = np.full(dirs.shape[:-1], -1, dtype=int)
    for i, prim in enumerate(scene):
        s, n = _intersect(prim, origins, dirs)
        closer = s < best_s
        best_s = np.where(closer, s, best_s)
        best_n = np.where(closer[..., None], n, best_n)
        best_idx = np.where(closer, i, best_idx)
    hit = np.isfinite(best_s)
    pts = origins + np.where(hit, best_s, 0.0)[..., None] * dirs
    return np.where(hit, best_s, np.inf), pts, best_n, best_idx, hit


def _shade(scene, pts, normals, idx, dirs):
    # two-sided Lambert with a fixed ambient floor
    L = -LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    ndotl = np.abs(normals @ L)
    lambert = AMBIENT + (1 - AMBIENT) * ndotl
    tex = np.zeros(pts.shape[:-1])
    for i, prim in enumerate(scene):
        sel = idx == i
        if np.any(sel):
            tex[sel] = prim.texture.eval(pts[sel])
    return np.clip(tex * lambert, 0.0, 1.0)


def camera_rays(pose: SE3Pose, K: CameraIntrinsics, pixels=None):
    """World-space origins and directions for pixel centers (or given pixels)."""
    if pixels is None:
        rays_cam = K.inv_k_rays()
    else:
        pixels = np.asarray(pixels, dtype=float)
        rays_cam = np.stack(
            [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones(pixels.shape[:-1])],
            axis=-1,
        )
    R = pose.rotation_matrix()
    dirs = rays_cam @ R  # R^T applied to each ray
    origins = np.broadcast_to(pose.center(), dirs.shape)
    return origins, dirs


def render(scene, pose: SE3Pose, K: CameraIntrinsics):
    """Render (ImageGrid, DepthMap); missed pixels are invalid."""
    origins, dirs = camera_rays(pose, K)
    s, pts, normals, idx, hit = raycast(scene, origins, dirs)
    intensity = np.where(hit, _shade(scene, pts, normals, idx, dirs), 0.0)
    depth = np.where(hit, s, 1.0)
    return ImageGrid(intensity), DepthMap(depth, hit)


def render_at_pixels(scene, pose, K, pixels):
    """Oracle query at arbitrary (possibly subpixel) positions.

    Returns dict with depth, intensity, world points, primitive index, hit mask.
    """
    origins, dirs = camera_rays(pose, K, pixels)
    s, pts, normals, idx, hit = raycast(scene, origins, dirs)
    intensity = np.where(hit, _shade(scene, pts, normals, idx, dirs), 0.0)
    return {
        "depth": np.where(hit, s, 0.0),
        "intensity": intensity,
        "points": pts,
        "prim": idx,
        "hit": hit,
    }


@dataclass(frozen=True)
class FlowPair:
    """Forward/backward dense flow between two frames with validity masks."""

    forward: np.ndarray
    backward: np.ndarray
    valid_forward: np.ndarray
    valid_backward: np.ndarray


def _one_way_flow(D_a: DepthMap, T_ab: SE3Pose, K: CameraIntrinsics):
    H, W = D_a.values.shape
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    pix = np.stack([u, v], axis=-1)
    pts = backproject(K, pix, np.where(D_a.valid, D_a.values, 1.0))
    moved = T_ab.transform(pts)
    z = moved[..., 2]
    ok = D_a.valid & (z > 1e-9)
    zs = np.where(ok, z, 1.0)
    proj = np.stack([K.fx * moved[..., 0] / zs + K.cx, K.fy * moved[..., 1] / zs + K.cy], axis=-1)
    flow = np.where(ok[..., None], proj - pix, 0.0)
    inb = ok & (proj[..., 0] >= 0) & (proj[..., 0] <= W - 1) & (proj[..., 1] >= 0) & (proj[..., 1] <= H - 1)
    return flow, inb


def _sample_flow(flow, valid, pix):
    """Bilinear flow lookup that tolerates masked corners (weighted renormalize)."""
    H, W = valid.shape
    u = np.clip(pix[..., 0], 0.0, W - 1.0)
    v = np.clip(pix[..., 1], 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    a, b = u - u0, v - v0
    out = np.zeros(pix.shape[:-1] + (2,))
    wsum = np.zeros(pix.shape[:-1])
    for du, dv, w in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        m = valid[v0 + dv, u0 + du]
        ww = np.where(m, w, 0.0)
        out += ww[..., None] * flow[v0 + dv, u0 + du]
        wsum += ww
    ok = wsum > 1e-12
    out = np.where(ok[..., None], out / np.where(ok, wsum, 1.0)[..., None], 0.0)
    return out, ok


def ground_truth_flow(scene, pose_a: SE3Pose, pose_b: SE3Pose, K: CameraIntrinsics,
                      round_trip_tol=0.01) -> FlowPair:
    """Exact optical flow a->b and b->a from rendered depth and true poses.

    Pixels whose forward/backward round trip exceeds `round_trip_tol` pixels
    (occlusions, out-of-view targets) are marked invalid.
    """
    _, D_a = render(scene, pose_a, K)
    _, D_b = render(scene, pose_b, K)
    T_ab = pose_b.compose(pose_a.inverse())
    fwd, ok_f = _one_way_flow(D_a, T_ab, K)
    bwd, ok_b = _one_way_flow(D_b, T_ab.inverse(), K)

    H, W = D_a.values.shape
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    pix = np.stack([u, v], axis=-1)

    back_at_fwd, ok_s = _sample_flow(bwd, ok_b, pix + fwd)
    err_f = np.linalg.norm(fwd + back_at_fwd, axis=-1)
    valid_f = ok_f & ok_s & (err_f < round_trip_tol)

    fwd_at_bwd, ok_s2 = _sample_flow(fwd, ok_f, pix + bwd)
    err_b = np.linalg.norm(bwd + fwd_at_bwd, axis=-1)
    valid_b = ok_b & ok_s2 & (err_b < round_trip_tol)
    return FlowPair(forward=fwd, backward=bwd, valid_forward=valid_f, valid_backward=valid_b)


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path recipe; all paths are deterministic given the fields."""

    kind: str                 # orbit | line | pure_rotation | static
    num_frames: int = 10
    speed: float = 0.12       # m/frame for line, rad/frame for orbit/rotation
    radius: float = 1.0
    look_at: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.25]))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=float))
        if self.num_frames < 2:
            raise ValueError("need at least two frames")


def _look_at(center, target, roll_axis=np.array([0.0, 1.0, 0.0])):
    z = np.asarray(target, dtype=float) - center
    z = z / np.linalg.norm(z)
    x = np.cross(roll_axis, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return SE3Pose.from_rt(R, -R @ center)


def trajectory_poses(spec: TrajectorySpec):
    """Camera-from-world poses for the given path."""
    poses = []
    n = spec.num_frames
    if spec.kind == "orbit":
        theta0 = -spec.speed * (n - 1) / 2.0
        for k in range(n):
            th = theta0 + k * spec.speed
            c = np.array([spec.radius * np.sin(th), 0.0, -spec.radius * np.cos(th)])
            poses.append(_look_at(c, spec.look_at))
    elif spec.kind == "line":
        d = np.array([1.0, 0.0, 0.0])
        start = np.array([-spec.speed * (n - 1) / 2.0, 0.0, -1.0])
        for k in range(n):
            poses.append(_look_at(start + k * spec.speed * d, spec.look_at))
    elif spec.kind == "pure_rotation":
        c = np.array([0.0, 0.0, -1.0])
        for k in range(n):
            th = (k - (n - 1) / 2.0) * spec.speed
            target = c + np.array([np.sin(th), 0.0, np.cos(th)])
            poses.append(_look_at(c, target))
    elif spec.kind == "static":
        pose = _look_at(np.array([0.0, 0.0, -1.0]), spec.look_at)
        poses = [pose] * n
    else:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")
    return poses


@dataclass(frozen=True)
class NoiseModel:
    """Corruption applied to pipeline inputs; deterministic under the seed."""

    depth_amplitude: float = 0.175
    depth_wavelength: float = 24.0   # pixels
    flow_sigma: float = 0.0          # pixels, additive Gaussian
    pose_sigma_t: float = 0.0        # meters
    pose_sigma_r: float = 0.0        # radians
    seed: int = 0

    def __post_init__(self):
        if self.depth_amplitude < 0 or self.flow_sigma < 0:
            raise ValueError("noise amplitudes must be nonnegative")

    def exact(self) -> "NoiseModel":
        return replace(self, depth_amplitude=0.0, flow_sigma=0.0, pose_sigma_t=0.0, pose_sigma_r=0.0)


def _band_limited_field(shape, wavelength, rng):
    """Unit-RMS smooth random field from a handful of plane waves."""
    H, W = shape
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    f = np.zeros(shape)
    for _ in range(6):
        wl = wavelength * rng.uniform(0.7, 1.4)
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / wl
        f += rng.normal() * np.sin(k * (u * np.cos(ang) + v * np.sin(ang)) + phase)
    rms = np.sqrt(np.mean(f**2))
    return f / max(rms, 1e-12)


def corrupt_depth(D: DepthMap, noise: NoiseModel, frame_id: int = 0) -> DepthMap:
    """Multiplicative smooth-field corruption D * (1 + a * f), f in [-1, 1]."""
    if noise.depth_amplitude == 0:
        return D.copy()
    rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 7001, frame_id]))
    g = _band_limited_field(D.values.shape, noise.depth_wavelength, rng)
    f = np.clip(CORRUPTION_SATURATION * g, -1.0, 1.0)
    values = np.clip(D.values * (1.0 + noise.depth_amplitude * f), 1e-3, 1e3)
    return DepthMap(np.where(D.valid, values, D.values), D.valid.copy())


def corrupt_flow(pair: FlowPair, noise: NoiseModel, frame_id: int = 0) -> FlowPair:
    if noise.flow_sigma == 0:
        return pair
    rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 7002, frame_id]))
    fwd = pair.forward + rng.normal(0, noise.flow_sigma, pair.forward.shape)
    bwd = pair.backward + rng.normal(0, noise.flow_sigma, pair.backward.shape)
    return FlowPair(fwd, bwd, pair.valid_forward.copy(), pair.valid_backward.copy())


def jitter_pose(pose: SE3Pose, noise: NoiseModel, frame_id: int = 0) -> SE3Pose:
    if noise.pose_sigma_t == 0 and noise.pose_sigma_r == 0:
        return pose
    rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 7003, frame_id]))
    xi = np.concatenate([
        rng.normal(0, noise.pose_sigma_t, 3) if noise.pose_sigma_t else np.zeros(3),
        rng.normal(0, noise.pose_sigma_r, 3) if noise.pose_sigma_r else np.zeros(3),
    ])
    return SE3Pose.exp(xi).compose(pose)


def standard_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=32.0, cy=32.0, width=64, height=64)


def standard_scene(texture_seed: int = 11):
    """Three textured walls of a 2x2x2 m box plus an occluding sphere."""
    tex = Texture(seed=texture_seed)
    ey = np.array([0.0, 1.0, 0.0])
    walls = [
        # back wall z = +1, faces the cameras
        ScenePrimitive("textured_plane", np.array([0.0, 0.0, 1.0]), np.array([1.0, 1.0]),
                       axis_u=np.array([1.0, 0.0, 0.0]), axis_v=ey, texture=tex),
        # left wall x = -1
        ScenePrimitive("textured_plane", np.array([-1.0, 0.0, 0.0]), np.array([1.0, 1.0]),
                       axis_u=np.array([0.0, 0.0, 1.0]), axis_v=ey, texture=tex),
        # right wall x = +1
        ScenePrimitive("textured_plane", np.array([1.0, 0.0, 0.0]), np.array([1.0, 1.0]),
                       axis_u=np.array([0.0, 0.0, 1.0]), axis_v=ey, texture=tex),
    ]
    sphere = ScenePrimitive("sphere", np.array([0.1, 0.0, 0.45]), np.array([0.32]), texture=tex)
    return walls + [sphere]

SPHERE_PRIM_INDEX = 3  # index of the sphere within standard_scene()


def uniform_scene():
    """Textureless negative control: same geometry, constant albedo."""
    flat = Texture(checker_amp=0.0, noise_amp=0.0)
    return [replace(p, texture=flat) for p in standard_scene()]


FIXTURES = {
    "standard": lambda frames: (standard_scene(), TrajectorySpec("orbit", num_frames=frames, speed=0.12)),
    "pure_rotation": lambda frames: (standard_scene(), TrajectorySpec("pure_rotation", num_frames=frames, speed=0.1)),
    "static": lambda frames: (standard_scene(), TrajectorySpec("static", num_frames=frames)),
}


@dataclass
class Dataset:
    """In-memory view of a generated dataset directory."""

    K: CameraIntrinsics
    images: list
    depths_gt: list
    depths_init: list
    flows: list                 # FlowPair for (i, i+1), length n-1
    poses_gt: list
    poses_jitter: list
    timestamps: list
    meta: dict


def generate_dataset(scene, traj: TrajectorySpec, noise: NoiseModel, out_dir,
                     K: CameraIntrinsics | None = None, fixture_name: str = "custom") -> Path:
    """Render and write a full dataset; returns the manifest path."""
    K = K or standard_intrinsics()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = trajectory_poses(traj)
    n = len(poses)

    images, depths = [], []
    for i, pose in enumerate(poses):
        img, depth = render(scene, pose, K)
        images.append(img)
        depths.append(depth)
        fileio.write_ppm(out / f"image_{i:04d}.ppm", img.values)
        fileio.write_depth_pfm(out / f"depth_gt_{i:04d}.pfm", depth)
        fileio.write_depth_pfm(out / f"depth_init_{i:04d}.pfm", corrupt_depth(depth, noise, i))

    rows = []
    for i in range(n):
        fwd_name = bwd_name = ""
        if i < n - 1:
            pair = corrupt_flow(ground_truth_flow(scene, poses[i], poses[i + 1], K), noise, i)
            fwd_name, bwd_name = f"flow_fwd_{i:04d}.flo", f"flow_bwd_{i:04d}.flo"
            fileio.write_flo(out / fwd_name, pair.forward, pair.valid_forward)
            fileio.write_flo(out / bwd_name, pair.backward, pair.valid_backward)
        rows.append(f"{i},image_{i:04d}.ppm,depth_gt_{i:04d}.pfm,depth_init_{i:04d}.pfm,{fwd_name},{bwd_name}")

    stamps = [float(i) for i in range(n)]
    fileio.write_tum_trajectory(out / "traj_gt.txt", list(zip(stamps, poses)))
    fileio.write_tum_trajectory(
        out / "traj_jitter.txt", [(stamps[i], jitter_pose(poses[i], noise, i)) for i in range(n)]
    )
    (out / "intrinsics.txt").write_text(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n")
    meta = [
        f"fixture={fixture_name}",
        f"kind={traj.kind}",
        f"num_frames={n}",
        f"seed={noise.seed}",
        f"depth_amplitude={noise.depth_amplitude}",
        f"depth_wavelength={noise.depth_wavelength}",
        f"flow_sigma={noise.flow_sigma}",
    ]
    (out / "dataset_meta.cfg").write_text("\n".join(meta) + "\n")
    manifest = out / "manifest.csv"
    fileio.write_csv(manifest, "frame_id,image,depth_gt,depth_init,flow_fwd,flow_bwd", rows)
    return manifest


def load_dataset(data_dir) -> Dataset:
    data = Path(data_dir)
    fx, fy, cx, cy, w, h = (data / "intrinsics.txt").read_text().split()
    K = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    meta = {}
    for line in (data / "dataset_meta.cfg").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v

    images, depths_gt, depths_init, flows = [], [], [], []
    rows = (data / "manifest.csv").read_text().splitlines()[1:]
    for row in rows:
        fid, img, dgt, dinit, fwd, bwd = row.split(",")
        rgb = fileio.read_ppm(data / img)
        images.append(ImageGrid(rgb.mean(axis=2)))
        depths_gt.append(fileio.read_depth_pfm(data / dgt))
        depths_init.append(fileio.read_depth_pfm(data / dinit))
        if fwd:
            f, vf = fileio.read_flo(data / fwd)
            b, vb = fileio.read_flo(data / bwd)
            flows.append(FlowPair(f, b, vf, vb))
    traj_gt = fileio.read_tum_trajectory(data / "traj_gt.txt")
    traj_j = fileio.read_tum_trajectory(data / "traj_jitter.txt")
    return Dataset(
        K=K,
        images=images,
        depths_gt=depths_gt,
        depths_init=depths_init,
        flows=flows,
        poses_gt=[p for _, p in traj_gt],
        poses_jitter=[p for _, p in traj_j],
        timestamps=[t for t, _ in traj_gt],
        meta=meta,
    )
