"""Camera model, rigid transforms, and differentiable warping.

Conventions used across the package:
  * pixel coordinates (u, v): u = column, v = row, integer coordinates at
    pixel centers; arrays are indexed [v, u]
  * poses are camera-from-world: X_cam = R @ X_world + t
  * relative transforms are always target -> source
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric input (bad intrinsics, non-positive depth, ...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    def inv_k_rays(self):
        """Unit-z rays K^-1 [u,v,1] for every pixel, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        rays = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=float)],
            axis=-1,
        )
        return rays


def _quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0:
        raise GeometryError("zero quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps compose/inverse round-trips stable
    if q[0] < 0:
        q = -q
    return q


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R):
    # Shepperd's method, numerically stable for all rotations
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return _quat_normalize(q)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform stored as unit quaternion (w,x,y,z) + translation (m).

    Renormalized after every composition so drift stays bounded.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @staticmethod
    def identity():
        return SE3Pose()

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return SE3Pose(_matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R, t):
        return SE3Pose(_matrix_to_quat(R), t)

    @staticmethod
    def exp(xi):
        """Exponential map of a twist (tx, ty, tz, wx, wy, wz)."""
        xi = np.asarray(xi, dtype=float)
        rho, phi = xi[:3], xi[3:]
        theta = np.linalg.norm(phi)
        K = np.array([[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]])
        if theta < 1e-12:
            R = np.eye(3) + K
            V = np.eye(3) + 0.5 * K
        else:
            s, c = np.sin(theta), np.cos(theta)
            R = np.eye(3) + (s / theta) * K + ((1 - c) / theta**2) * (K @ K)
            V = np.eye(3) + ((1 - c) / theta**2) * K + ((theta - s) / theta**3) * (K @ K)
        return SE3Pose.from_rt(R, V @ rho)

    def rotation_matrix(self):
        return _quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self o other: apply `other` first, then `self`."""
        q = _quat_normalize(_quat_mul(self.q, other.q))
        t = self.rotation_matrix() @ other.t + self.t
        return SE3Pose(q, t)

    def inverse(self) -> "SE3Pose":
        R = self.rotation_matrix()
        qinv = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return SE3Pose(qinv, -(R.T @ self.t))

    def transform(self, points):
        """Apply to (3,) or (..., 3) points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation_matrix().T + self.t

    def center(self):
        """Camera center in world coordinates (for camera-from-world poses)."""
        return -(self.rotation_matrix().T @ self.t)


def relative_pose(pose_i: SE3Pose, pose_j: SE3Pose) -> SE3Pose:
    """Transform mapping camera-i coordinates to camera-j coordinates.

    Both inputs are camera-from-world; result is pose_j o pose_i^-1.
    """
    return pose_j.compose(pose_i.inverse())


@dataclass
class DepthMap:
    """H x W metric depths with a validity mask; valid entries finite and > 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise GeometryError("depth/mask shape mismatch")
        v = self.values[self.valid]
        if v.size and (not np.all(np.isfinite(v)) or np.any(v <= 0)):
            raise GeometryError("valid depths must be finite and positive")

    @staticmethod
    def full(values):
        values = np.asarray(values, dtype=float)
        return DepthMap(values, np.ones(values.shape, dtype=bool))

    def copy(self):
        return DepthMap(self.values.copy(), self.valid.copy())


@dataclass
class ImageGrid:
    """Intensity image in [0, 1]; (H, W) grayscale or (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (2, 3):
            raise GeometryError("image must be HxW or HxWxC")
        if self.values.min(initial=0.0) < -1e-12 or self.values.max(initial=0.0) > 1 + 1e-12:
            raise GeometryError("intensities must lie in [0, 1]")

    @property
    def channels(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    def channel_stack(self):
        """View as (H, W, C) regardless of storage."""
        v = self.values
        return v[..., None] if v.ndim == 2 else v


@dataclass
class WarpResult:
    """Synthesized view of a source image in the target frame.

    jacobian holds d(sampled intensity)/d(target depth) per pixel (and channel),
    zero wherever the warp is invalid.
    """

    image: np.ndarray          # (H, W, C)
    valid: np.ndarray          # (H, W)
    jacobian: np.ndarray       # (H, W, C), 1/meter
    pixel_u: np.ndarray        # projected source-pixel coordinates
    pixel_v: np.ndarray
    du_ddepth: np.ndarray      # d(projected pixel)/d(target depth)
    dv_ddepth: np.ndarray
    src_z: np.ndarray          # depth of the warped point in the source camera


def project(K: CameraIntrinsics, X):
    """Pinhole projection of camera-frame points (..., 3) -> (..., 2)."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    if np.any(z <= 0):
        raise GeometryError("point behind camera")
    return np.stack([K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy], axis=-1)


def backproject(K: CameraIntrinsics, pixel, depth):
    """Inverse of project: pixel (..., 2) + depth (...) -> camera point (..., 3)."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise GeometryError("depth must be positive")
    x = (pixel[..., 0] - K.cx) / K.fx * depth
    y = (pixel[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def bilinear_sample(grid, u, v, valid_mask=None):
    """Bilinear sample with strict footprint validity.

    A sample is valid only if its full 2x2 footprint is in bounds and (when a
    mask is given) every corner is valid; no border clamping. Returns
    (value, dval_du, dval_dv, ok). grid may be (H, W) or (H, W, C).
    """
    grid = np.asarray(grid, dtype=float)
    squeeze = grid.ndim == 2
    g = grid[..., None] if squeeze else grid
    H, W = g.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)

    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    ok = (u0 >= 0) & (u0 + 1 <= W - 1) & (v0 >= 0) & (v0 + 1 <= H - 1)
    u0c = np.clip(u0, 0, W - 2)
    v0c = np.clip(v0, 0, H - 2)
    a = u - u0c  # x fraction
    b = v - v0c  # y fraction

    g00 = g[v0c, u0c]
    g10 = g[v0c, u0c + 1]
    g01 = g[v0c + 1, u0c]
    g11 = g[v0c + 1, u0c + 1]
    aa = a[..., None]
    bb = b[..., None]
    val = (1 - aa) * (1 - bb) * g00 + aa * (1 - bb) * g10 + (1 - aa) * bb * g01 + aa * bb * g11
    dval_du = (1 - bb) * (g10 - g00) + bb * (g11 - g01)
    dval_dv = (1 - aa) * (g01 - g00) + aa * (g11 - g10)

    if valid_mask is not None:
        m = np.asarray(valid_mask, dtype=bool)
        ok = ok & m[v0c, u0c] & m[v0c, u0c + 1] & m[v0c + 1, u0c] & m[v0c + 1, u0c + 1]

    if squeeze:
        val, dval_du, dval_dv = val[..., 0], dval_du[..., 0], dval_dv[..., 0]
    return val, dval_du, dval_dv, ok


def _projected_pixels(D: DepthMap, T: SE3Pose, K: CameraIntrinsics):
    """Project every valid target pixel through depth D and transform T.

    Returns (u', v', du'/dD, dv'/dD, z_src, valid). The normalized coordinates
    are evaluated as (r + t/D) ratios so that with t = 0 the projected pixel is
    bitwise independent of depth, and the depth jacobian is exactly zero there
    (closed form fx (rx tz - tx rz) / z^2).
    """
    H, W = D.values.shape
    if (W, H) != (K.width, K.height):
        raise GeometryError("depth resolution does not match intrinsics")
    R = T.rotation_matrix()
    rays = K.inv_k_rays()                       # (H, W, 3)
    r = rays @ R.T                              # rotated rays
    d = D.values
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = np.where(D.valid, 1.0 / np.where(D.valid, d, 1.0), 0.0)
    tx, ty, tz = T.t
    xh = r[..., 0] + tx * inv_d
    yh = r[..., 1] + ty * inv_d
    zh = r[..., 2] + tz * inv_d
    valid = D.valid & (zh > 0)
    zh_safe = np.where(valid, zh, 1.0)
    u = K.fx * (xh / zh_safe) + K.cx
    v = K.fy * (yh / zh_safe) + K.cy
    z_src = d * zh                              # depth of the warped point in the source camera
    z2 = np.where(valid, z_src**2, 1.0)
    du_dd = K.fx * (r[..., 0] * tz - tx * r[..., 2]) / z2
    dv_dd = K.fy * (r[..., 1] * tz - ty * r[..., 2]) / z2
    return u, v, du_dd, dv_dd, z_src, valid


def warp_source_to_target(I_j: ImageGrid, D_i: DepthMap, T: SE3Pose, K: CameraIntrinsics) -> WarpResult:
    """Synthesize the source image in the target view (T is target -> source).

    For each valid target pixel: backproject with D_i, transform by T, project,
    and bilinearly sample I_j. Pixels whose transformed point has non-positive
    source depth or whose bilinear footprint leaves the image are invalid.
    """
    src = I_j.channel_stack()
    if src.shape[:2] != D_i.values.shape:
        raise GeometryError("image resolution does not match depth")
    u, v, du_dd, dv_dd, z_src, valid = _projected_pixels(D_i, T, K)
    val, dval_du, dval_dv, ok = bilinear_sample(src, u, v)
    valid = valid & ok
    m = valid[..., None]
    image = np.where(m, val, 0.0)
    jac = np.where(m, dval_du * du_dd[..., None] + dval_dv * dv_dd[..., None], 0.0)
    return WarpResult(
        image=image,
        valid=valid,
        jacobian=jac,
        pixel_u=u,
        pixel_v=v,
        du_ddepth=du_dd,
        dv_ddepth=dv_dd,
        src_z=z_src,
    )


@dataclass
class ConsistencyRatio:
    """Per-pixel ratio of sampled source depth to predicted source depth."""

    ratio: np.ndarray          # (H, W)
    valid: np.ndarray          # (H, W)
    dratio_ddepth: np.ndarray  # d ratio / d D_i, zero at invalid pixels


def consistency_ratio(D_i: DepthMap, D_j: DepthMap, T: SE3Pose, K: CameraIntrinsics) -> ConsistencyRatio:
    """Compare target depth against the source depth map it projects into.

    For a valid target pixel p with transformed source-frame depth z_hat and
    bilinearly sampled source depth d_hat (footprint must be fully valid), the
    ratio r = d_hat / z_hat is 1 wherever the two maps describe the same
    surface. The derivative accounts for both the moving sample position and
    the z_hat denominator; source depth values are treated as constants.
    """
    if D_i.values.shape != D_j.values.shape:
        raise GeometryError("depth resolution mismatch")
    u, v, du_dd, dv_dd, z_hat, valid = _projected_pixels(D_i, T, K)
    d_hat, dd_du, dd_dv, ok = bilinear_sample(D_j.values, u, v, D_j.valid)
    valid = valid & ok
    z_safe = np.where(valid, z_hat, 1.0)
    ratio = np.where(valid, d_hat / z_safe, 0.0)
    R = T.rotation_matrix()
    rz = (K.inv_k_rays() @ R.T)[..., 2]
    dd_hat_dd = dd_du * du_dd + dd_dv * dv_dd
    dratio = np.where(valid, (dd_hat_dd * z_safe - d_hat * rz) / z_safe**2, 0.0)
    return ConsistencyRatio(ratio=ratio, valid=valid, dratio_ddepth=dratio)
