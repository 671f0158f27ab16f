"""Flow-guided tracking front-end.

Desk-scale stand-in for a hybrid SLAM front-end: dense flow replaces learned
matching, 7x7 intensity patches replace binary descriptors, and a single
Gauss-Newton refinement per frame replaces the local-map optimization. The
tracker is a sequential consumer of frames; everything it publishes (poses,
map points, observations) is an immutable snapshot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, SE3Pose, backproject, bilinear_sample, project
from .losses import MapPointObservation

log = logging.getLogger("georefine.tracking")

PATCH = 7
HUBER_DELTA = 1.0          # pixels
INLIER_PX = 1.0
MIN_INLIERS = 6
MIN_TRIANGULATION_DEG = 0.5
SCALE_ALIGN_STEPS = 5


class TrackingError(ValueError):
    pass


@dataclass
class FlowField:
    """Forward/backward dense flow grids (pixels) with validity masks."""

    forward: np.ndarray
    backward: np.ndarray
    valid_forward: np.ndarray
    valid_backward: np.ndarray


@dataclass
class Feature:
    """A tracked point: subpixel position plus a 7x7 intensity patch."""

    pixel: np.ndarray
    descriptor: np.ndarray
    track_id: int = -1

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class Match:
    feature_prev: Feature
    pixel_curr: np.ndarray
    descriptor_residual: float


@dataclass
class MapPoint:
    position: np.ndarray
    observation_count: int
    mean_reprojection_error: float
    track_id: int = -1


@dataclass
class ScaleEstimate:
    s: float
    residual_rms: float
    num_points: int


@dataclass
class TrackedFrame:
    pose: SE3Pose
    inlier_count: int
    status: str  # ok | lost


def extract_patch(image_values, pixel):
    """Bilinear 7x7 patch centered at a subpixel position, or None at borders."""
    h = PATCH // 2
    u, v = pixel
    us, vs = np.meshgrid(np.arange(-h, h + 1, dtype=float) + u, np.arange(-h, h + 1, dtype=float) + v)
    val, _, _, ok = bilinear_sample(image_values, us, vs)
    if not np.all(ok):
        return None
    return val


def seed_grid_features(image_values, stride=4, occupied=None, min_dist=2.0):
    """Integer-grid features in regions not already covered by tracked points."""
    H, W = image_values.shape[:2]
    h = PATCH // 2
    feats = []
    occ = np.asarray(occupied, dtype=float).reshape(-1, 2) if occupied is not None and len(occupied) else None
    for v in range(h + 1, H - h - 1, stride):
        for u in range(h + 1, W - h - 1, stride):
            if occ is not None and np.min(np.hypot(occ[:, 0] - u, occ[:, 1] - v)) < min_dist:
                continue
            patch = extract_patch(image_values, (float(u), float(v)))
            if patch is not None:
                feats.append(Feature(np.array([float(u), float(v)]), patch))
    return feats


def flow_match(features_prev, flow: FlowField, image_curr, radius=1.0, fb_threshold=1.0,
               candidates=()):
    """Locate each previous feature in the current frame by adding the flow.

    Candidate features within `radius` of the predicted position are ranked by
    SSD patch residual (smallest wins); with no candidate, a new feature is
    created at the predicted position with the descriptor copied over. Matches
    failing the forward-backward round trip ||F_fwd(p) + F_bwd(p + F_fwd(p))||
    > fb_threshold are discarded.
    """
    matches = []
    if not features_prev:
        return matches
    cand_pix = np.array([c.pixel for c in candidates]) if candidates else None
    for feat in features_prev:
        f_fwd, _, _, ok_f = bilinear_sample(flow.forward, feat.pixel[0], feat.pixel[1], flow.valid_forward)
        if not ok_f:
            continue
        predicted = feat.pixel + f_fwd
        f_bwd, _, _, ok_b = bilinear_sample(flow.backward, predicted[0], predicted[1], flow.valid_backward)
        if not ok_b or np.hypot(*(f_fwd + f_bwd)) > fb_threshold:
            continue

        target = None
        if cand_pix is not None:
            dist = np.hypot(cand_pix[:, 0] - predicted[0], cand_pix[:, 1] - predicted[1])
            near = np.where(dist <= radius)[0]
            if near.size:
                best, best_res = None, np.inf
                for idx in near:
                    res = float(np.sum((candidates[idx].descriptor - feat.descriptor) ** 2))
                    if res < best_res:
                        best, best_res = candidates[idx], res
                target = best
        if target is not None:
            matches.append(Match(feat, target.pixel.copy(), best_res))
        else:
            patch = extract_patch(image_curr, predicted)
            if patch is None:
                continue
            residual = float(np.sum((patch - feat.descriptor) ** 2))
            matches.append(Match(feat, predicted.copy(), residual))
    return matches


def subsample_matches(matches, n_total_features):
    """Keep the ceil(0.1 * N_t) matches with smallest descriptor residual."""
    if n_total_features < 1:
        raise TrackingError("need at least one feature")
    n_keep = int(np.ceil(0.1 * n_total_features))
    ordered = sorted(
        matches,
        key=lambda m: (m.descriptor_residual, m.feature_prev.pixel[1], m.feature_prev.pixel[0]),
    )
    return ordered[:n_keep]


def _huber_rho(norms):
    out = np.where(norms <= HUBER_DELTA, 0.5 * norms**2, HUBER_DELTA * (norms - 0.5 * HUBER_DELTA))
    return out.sum()


def estimate_pose_gn(matches, depth_prev: DepthMap, K: CameraIntrinsics,
                     init: SE3Pose | None = None, pose_prev: SE3Pose | None = None,
                     max_iters=50) -> TrackedFrame:
    """Gauss-Newton pose from 2D-3D correspondences with Huber weights.

    Previous-frame points are backprojected along each feature's subpixel ray
    using the depth at the nearest pixel; the left-multiplied twist increment
    is iterated with step halving until the increment norm drops below 1e-10.
    Status is 'lost' when fewer than 6 matches survive the 1 px inlier gate.
    """
    pose_prev = pose_prev or SE3Pose.identity()
    H, W = depth_prev.values.shape
    pts, obs = [], []
    for m in matches:
        u = int(np.floor(m.feature_prev.pixel[0] + 0.5))
        v = int(np.floor(m.feature_prev.pixel[1] + 0.5))
        if 0 <= u < W and 0 <= v < H and depth_prev.valid[v, u]:
            pts.append(backproject(K, m.feature_prev.pixel, depth_prev.values[v, u]))
            obs.append(m.pixel_curr)
    if len(pts) < MIN_INLIERS:
        return TrackedFrame(pose_prev, 0, "lost")
    X = np.array(pts)
    q = np.array(obs)
    T = init or SE3Pose.identity()

    def residuals(pose):
        Y = pose.transform(X)
        ok = Y[:, 2] > 1e-9
        r = np.zeros((len(X), 2))
        if np.any(ok):
            r[ok] = project(K, Y[ok]) - q[ok]
        r[~ok] = 1e6
        return r, Y, ok

    r, Y, ok = residuals(T)
    cost = _huber_rho(np.linalg.norm(r, axis=1))
    for _ in range(max_iters):
        norms = np.linalg.norm(r, axis=1)
        w = np.where(norms <= HUBER_DELTA, 1.0, HUBER_DELTA / np.maximum(norms, 1e-12))
        w = np.where(ok, w, 0.0)
        Hmat = np.zeros((6, 6))
        b = np.zeros(6)
        x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
        zs = np.maximum(z, 1e-9)
        J = np.zeros((len(X), 2, 6))
        J[:, 0, 0] = K.fx / zs
        J[:, 0, 2] = -K.fx * x / zs**2
        J[:, 1, 1] = K.fy / zs
        J[:, 1, 2] = -K.fy * y / zs**2
        # rotational part: dY/dphi = -[Y]x
        J[:, 0, 3] = -K.fx * x * y / zs**2
        J[:, 0, 4] = K.fx * (1 + x**2 / zs**2)
        J[:, 0, 5] = -K.fx * y / zs
        J[:, 1, 3] = -K.fy * (1 + y**2 / zs**2)
        J[:, 1, 4] = K.fy * x * y / zs**2
        J[:, 1, 5] = K.fy * x / zs
        Hmat = np.einsum("nik,n,nij->kj", J, w, J)
        b = np.einsum("nik,n,ni->k", J, w, r)
        try:
            delta = np.linalg.solve(Hmat + 1e-12 * np.eye(6), -b)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        # step halving keeps the robust objective non-increasing
        alpha, accepted = 1.0, False
        for _ in range(12):
            T_new = SE3Pose.exp(alpha * delta).compose(T)
            r_new, Y_new, ok_new = residuals(T_new)
            cost_new = _huber_rho(np.linalg.norm(r_new, axis=1))
            if cost_new <= cost:
                T, r, Y, ok, cost = T_new, r_new, Y_new, ok_new, cost_new
                accepted = True
                break
            alpha *= 0.5
        if not accepted or np.linalg.norm(alpha * delta) < 1e-10:
            break

    inliers = int(np.sum(np.linalg.norm(r, axis=1) < INLIER_PX))
    status = "ok" if inliers >= MIN_INLIERS else "lost"
    return TrackedFrame(T.compose(pose_prev), inliers, status)


def _ray(pose: SE3Pose, K, pixel):
    d_cam = np.array([(pixel[0] - K.cx) / K.fx, (pixel[1] - K.cy) / K.fy, 1.0])
    return pose.center(), pose.rotation_matrix().T @ d_cam


def triangulate_midpoint(rays):
    """Average of pairwise closest-point midpoints; None when all pairs are
    near-parallel (angle below 0.5 degrees)."""
    mids = []
    for i in range(len(rays)):
        o1, d1 = rays[i]
        for j in range(i + 1, len(rays)):
            o2, d2 = rays[j]
            n1, n2 = d1 / np.linalg.norm(d1), d2 / np.linalg.norm(d2)
            cosang = np.clip(abs(np.dot(n1, n2)), -1.0, 1.0)
            if np.degrees(np.arccos(cosang)) < MIN_TRIANGULATION_DEG:
                continue
            # closest points: solve [d1.d1 -d1.d2; d1.d2 -d2.d2] [s;t] = [(o2-o1).d1; (o2-o1).d2]
            a, b, c = np.dot(d1, d1), np.dot(d1, d2), np.dot(d2, d2)
            w = o2 - o1
            denom = a * c - b * b
            if denom < 1e-15:
                continue
            s = (np.dot(w, d1) * c - np.dot(w, d2) * b) / denom
            t = (np.dot(w, d1) * b - np.dot(w, d2) * a) / denom
            mids.append(0.5 * (o1 + s * d1 + o2 + t * d2))
    if not mids:
        return None
    return np.mean(mids, axis=0)


def triangulate_and_filter(observations, poses, K, min_obs=5, max_err=1.0):
    """Midpoint-triangulate candidates and apply the observation-count and
    reprojection-error gates.

    observations: dict track_id -> list of (frame_index, pixel); poses: dict
    frame_index -> camera-from-world pose. Candidates observed in fewer than
    `min_obs` frames or with mean reprojection error above `max_err` pixels
    are discarded, as are candidates with only near-parallel rays.
    """
    points = []
    for tid, obs in observations.items():
        usable = [(fi, np.asarray(px, float)) for fi, px in obs if fi in poses]
        if len(usable) < 2:
            continue
        rays = [_ray(poses[fi], K, px) for fi, px in usable]
        X = triangulate_midpoint(rays)
        if X is None:
            continue
        errs = []
        behind = False
        for fi, px in usable:
            Y = poses[fi].transform(X)
            if Y[2] <= 1e-9:
                behind = True
                break
            errs.append(np.linalg.norm(project(K, Y) - px))
        if behind:
            continue
        mean_err = float(np.mean(errs))
        if len(usable) >= min_obs and mean_err <= max_err:
            points.append(MapPoint(X, len(usable), mean_err, track_id=tid))
    return points


def estimate_scale(cnn_depths, slam_depths) -> ScaleEstimate:
    """Closed-form least squares s = sum(d dhat) / sum(dhat^2) (model vs SLAM)."""
    d = np.asarray(cnn_depths, dtype=float)
    dh = np.asarray(slam_depths, dtype=float)
    if d.shape != dh.shape or d.size < 1:
        raise TrackingError("scale estimation needs matched nonempty depth lists")
    denom = float(np.sum(dh * dh))
    if denom <= 0:
        raise TrackingError("degenerate scale: sum of squared SLAM depths is zero")
    s = float(np.sum(d * dh)) / denom
    rms = float(np.sqrt(np.mean((d - s * dh) ** 2)))
    return ScaleEstimate(s=s, residual_rms=rms, num_points=d.size)


def apply_scale(map_points, poses, s):
    """Scale map positions and pose translations; rotations are untouched."""
    if s <= 0:
        raise TrackingError("scale must be positive")
    scaled_pts = [replace(p, position=p.position * s) for p in map_points]
    scaled_poses = {k: SE3Pose(p.q, p.t * s) for k, p in poses.items()}
    return scaled_pts, scaled_poses


@dataclass
class TrackerConfig:
    radius: float = 1.0
    fb_threshold: float = 1.0
    n_f_ratio: float = 0.1
    grid_stride: int = 4
    min_obs: int = 5
    max_err: float = 1.0
    mode: str = "monocular"           # monocular | prgbd
    bootstrap: str = "gt_anchor"      # gt_anchor | init_depth
    inject_failure_at: int = -1
    seed: int = 0


class Tracker:
    """Sequential front-end over a dataset's frames.

    Monocular mode bootstraps from an arbitrarily scaled anchor depth, then
    tracks against its own triangulated map and aligns scale to the depth
    model for the first five keyframes after map initialization. pRGBD mode
    reads the refined depth map of the previous frame (falling back to the
    initial depth model) and never aligns scale.
    """

    def __init__(self, K: CameraIntrinsics, config: TrackerConfig,
                 refined_depth_provider=None):
        self.K = K
        self.cfg = config
        self.refined_depth_provider = refined_depth_provider or (lambda fid: None)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 411]))
        self._anchor_scale = float(rng.uniform(0.5, 2.0)) if config.mode == "monocular" else 1.0
        self.poses: dict[int, SE3Pose] = {}
        self.frame_status: dict[int, str] = {}
        self.tracks: dict[int, list] = {}      # track_id -> [(frame_id, pixel)]
        self.map_points: dict[int, MapPoint] = {}
        self._features: list[Feature] = []
        self._next_track = 0
        self._prev_frame = None
        self._prev_rel = SE3Pose.identity()
        self._needs_bootstrap = True
        self._align_steps_left = 0
        self.lost_frames = 0

    # -- internal helpers -------------------------------------------------

    def _new_track(self, frame_id, feature):
        feature.track_id = self._next_track
        self.tracks[self._next_track] = [(frame_id, feature.pixel.copy())]
        self._next_track += 1

    def _seed(self, frame_id, image_values):
        occupied = [f.pixel for f in self._features]
        for feat in seed_grid_features(image_values, self.cfg.grid_stride, occupied):
            self._new_track(frame_id, feat)
            self._features.append(feat)

    def _sparse_map_depth(self, frame_id):
        """Map-point depths splatted at their observed pixels in `frame_id`."""
        H, W = self.K.height, self.K.width
        values = np.ones((H, W))
        valid = np.zeros((H, W), dtype=bool)
        pose = self.poses.get(frame_id)
        if pose is None:
            return DepthMap(values, valid)
        for tid, mp in self.map_points.items():
            obs = next((px for fid, px in self.tracks.get(tid, []) if fid == frame_id), None)
            if obs is None:
                continue
            z = pose.transform(mp.position)[2]
            if z <= 0:
                continue
            u, v = int(np.floor(obs[0] + 0.5)), int(np.floor(obs[1] + 0.5))
            if 0 <= u < W and 0 <= v < H:
                values[v, u] = z
                valid[v, u] = True
        return DepthMap(values, valid)

    def _depth_for_pose(self, prev_id, init_depth_prev, gt_depth_prev):
        if self.cfg.mode == "prgbd":
            refined = self.refined_depth_provider(prev_id)
            return refined if refined is not None else init_depth_prev
        if self.map_points:
            return self._sparse_map_depth(prev_id)
        # monocular bootstrap: anchor depth at an arbitrary seeded scale
        base = gt_depth_prev if (self.cfg.bootstrap == "gt_anchor" and gt_depth_prev is not None) else init_depth_prev
        return DepthMap(base.values * self._anchor_scale, base.valid.copy())

    def _retriangulate(self):
        obs = {tid: o for tid, o in self.tracks.items() if len(o) >= 2}
        pts = triangulate_and_filter(obs, self.poses, self.K, min_obs=2, max_err=self.cfg.max_err)
        self.map_points = {p.track_id: p for p in pts}

    def _align_scale(self, frame_id, model_depth: DepthMap):
        pose = self.poses[frame_id]
        d, dh = [], []
        for tid, mp in self.map_points.items():
            px = next((p for fid, p in self.tracks[tid] if fid == frame_id), None)
            if px is None:
                continue
            z = pose.transform(mp.position)[2]
            val, _, _, ok = bilinear_sample(model_depth.values, px[0], px[1], model_depth.valid)
            if z > 0 and ok:
                d.append(float(val))
                dh.append(z)
        if len(d) < 3:
            return
        est = estimate_scale(d, dh)
        pts, poses = apply_scale(list(self.map_points.values()), self.poses, est.s)
        self.map_points = {p.track_id: p for p in pts}
        self.poses = poses
        self._prev_rel = SE3Pose(self._prev_rel.q, self._prev_rel.t * est.s)
        log.info("frame %d: scale aligned by s=%.6f (rms %.2e, %d points)", frame_id, est.s, est.residual_rms, est.num_points)

    # -- public API --------------------------------------------------------

    def filtered_map_points(self):
        obs = {tid: o for tid, o in self.tracks.items() if len(o) >= 2}
        return triangulate_and_filter(obs, self.poses, self.K,
                                      min_obs=self.cfg.min_obs, max_err=self.cfg.max_err)

    def observations_for_frame(self, frame_id):
        """Filtered map-point observations of one frame, for supervision."""
        pose = self.poses.get(frame_id)
        if pose is None:
            return []
        out = []
        for mp in self.filtered_map_points():
            px = next((p for fid, p in self.tracks[mp.track_id] if fid == frame_id), None)
            if px is None:
                continue
            z = pose.transform(mp.position)[2]
            if z > 0:
                out.append(MapPointObservation((float(px[0]), float(px[1])), float(z)))
        return out

    def step(self, frame_id, image, flow_pair, init_depth, gt_depth=None) -> TrackedFrame:
        """Track one frame. flow_pair carries flow (prev -> curr, curr -> prev)."""
        img = image.values if hasattr(image, "values") else np.asarray(image)
        inject = frame_id == self.cfg.inject_failure_at
        if inject:
            log.warning("frame %d: injected tracking failure", frame_id)
            self.lost_frames += 1
            self.frame_status[frame_id] = "lost"
            self._features = []
            self._needs_bootstrap = True
            self._prev_frame = None
            return TrackedFrame(self.poses.get(max(self.poses, default=0), SE3Pose.identity()), 0, "lost")

        if self._prev_frame is None:
            # session anchor: identity at start, last known pose after recovery
            anchor = self.poses[max(self.poses)] if self.poses else SE3Pose.identity()
            self.poses[frame_id] = anchor
            self.frame_status[frame_id] = "ok"
            self._features = []
            self._seed(frame_id, img)
            self._prev_frame = (frame_id, init_depth, gt_depth)
            self._needs_bootstrap = not self.map_points
            return TrackedFrame(anchor, len(self._features), "ok")

        prev_id, init_prev, gt_prev = self._prev_frame
        matches = flow_match(self._features, flow_pair, img,
                             radius=self.cfg.radius, fb_threshold=self.cfg.fb_threshold)
        depth_prev = self._depth_for_pose(prev_id, init_prev, gt_prev)
        was_bootstrap = self._needs_bootstrap and self.cfg.mode == "monocular" and not self.map_points

        n_total = len(matches)
        kept = subsample_matches(matches, max(n_total, 1)) if matches else []
        tracked = estimate_pose_gn(kept, depth_prev, self.K,
                                   init=self._prev_rel, pose_prev=self.poses[prev_id])
        if tracked.status == "lost":
            log.warning("frame %d: tracking lost (%d inliers)", frame_id, tracked.inlier_count)
            self.lost_frames += 1
            self.frame_status[frame_id] = "lost"
            self._features = []
            self._needs_bootstrap = True
            self._prev_frame = None
            return tracked

        self.poses[frame_id] = tracked.pose
        self.frame_status[frame_id] = "ok"
        self._prev_rel = tracked.pose.compose(self.poses[prev_id].inverse())

        matched_feats = []
        for m in matches:
            self.tracks[m.feature_prev.track_id].append((frame_id, m.pixel_curr.copy()))
            m.feature_prev.pixel = m.pixel_curr.copy()
            patch = extract_patch(img, m.pixel_curr)
            if patch is not None:
                m.feature_prev.descriptor = patch
            matched_feats.append(m.feature_prev)
        self._features = matched_feats
        self._seed(frame_id, img)
        self._retriangulate()
        if was_bootstrap and self.map_points:
            self._align_steps_left = SCALE_ALIGN_STEPS
            self._needs_bootstrap = False
        if self.cfg.mode == "monocular" and self._align_steps_left > 0 and self.map_points:
            model_depth = self.refined_depth_provider(frame_id) or init_depth
            self._align_scale(frame_id, model_depth)
            self._align_steps_left -= 1
        self._prev_frame = (frame_id, init_depth, gt_depth)
        return TrackedFrame(self.poses[frame_id], tracked.inlier_count, "ok")

    def export_map_csv(self):
        rows = []
        for i, p in enumerate(self.filtered_map_points()):
            x, y, z = p.position
            rows.append(f"{i},{x:.9f},{y:.9f},{z:.9f},{p.observation_count},{p.mean_reprojection_error:.9f}")
        return "id,x,y,z,obs_count,reproj_err", rows
