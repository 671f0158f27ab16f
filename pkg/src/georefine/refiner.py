"""Online depth refinement loop.

Bounded keyframe/per-frame queues feed snippet construction; each target owns
a log-depth grid updated by ADAM under the total self-supervised loss. A step
that fails to decrease the total loss by a minimum relative margin is rolled
back bit-exactly and stops the round, so published depths never carry a loss
above their starting point. Poses and map observations are resolved through
live lookups at refinement time because the tracker may rescale its world
while records sit in the queue.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageGrid,
    SE3Pose,
    backproject,
    consistency_ratio,
)
from .losses import LossWeights, SnippetFrameSet, SnippetInputs, SourceFrame, total_loss

log = logging.getLogger("georefine.refiner")

LOG_DEPTH_MIN = np.log(1e-3)
LOG_DEPTH_MAX = np.log(1e3)


class QueueOrderError(ValueError):
    pass


@dataclass
class KeyframeRecord:
    """Time-synchronized bundle entering the refinement queues."""

    frame_id: int
    timestamp: float
    image: ImageGrid
    pose: SE3Pose
    map_obs: list
    depth_grid_ref: str


class DataQueue:
    """Bounded FIFO with strictly increasing timestamps, oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[KeyframeRecord] = []

    def __len__(self):
        return len(self.entries)

    def push(self, rec: KeyframeRecord):
        if self.entries and rec.timestamp <= self.entries[-1].timestamp:
            raise QueueOrderError(
                f"timestamp {rec.timestamp} not after {self.entries[-1].timestamp}"
            )
        self.entries.append(rec)
        evicted = None
        if len(self.entries) > self.capacity:
            evicted = self.entries.pop(0)
        return evicted

    def clear(self):
        self.entries = []

    def frame_ids(self):
        return [r.frame_id for r in self.entries]


@dataclass
class RefinementConfig:
    k_star: int = 3                    # refinement steps per keyframe
    k: int = 1                         # refinement steps per frame
    t_kf: float = 0.05                 # keyframe translation gate (m); negative disables
    t_frame: float = 0.01              # per-frame translation gate (m)
    lr: float = 0.06
    weights: LossWeights = field(default_factory=LossWeights)
    snippet_offsets: tuple = (-9, -6, -3, 1)
    queue_kf: int = 11
    queue_frame: int = 2
    keyframes_only: bool = False
    min_rel_decrease: float = 0.05     # step guard: required relative loss drop

    def __post_init__(self):
        if self.k_star < 1 or self.k < 0 or self.lr <= 0:
            raise ValueError("invalid refinement config")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(shape):
        return AdamState(np.zeros(shape), np.zeros(shape), 0)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t)


class LogDepthGrid:
    """Optimized per-keyframe parameterization: H x W log depths + validity."""

    def __init__(self, depth: DepthMap):
        self.log_values = np.where(depth.valid, np.log(np.where(depth.valid, depth.values, 1.0)), 0.0)
        self.valid = depth.valid.copy()
        self.clamp()

    def clamp(self):
        np.clip(self.log_values, LOG_DEPTH_MIN, LOG_DEPTH_MAX, out=self.log_values)

    def to_depth_map(self) -> DepthMap:
        return DepthMap(np.exp(self.log_values), self.valid.copy())


def select_keyframe(pose_rel: SE3Pose, gate: float) -> bool:
    """True iff the relative translation magnitude exceeds the gate.

    A negative gate force-disables the check (always true), used to study the
    pure-rotation degeneracy; pure rotations always fail any nonnegative gate.
    """
    return float(np.linalg.norm(pose_rel.t)) > gate


def adam_step(grid: LogDepthGrid, grad: np.ndarray, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected ADAM update in log-depth, then range clamp.

    Non-finite gradient entries are zeroed (counted, warned) rather than
    poisoning the moments.
    """
    g = np.asarray(grad, dtype=float)
    bad = ~np.isfinite(g)
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("adam_step: zeroed %d non-finite gradient entries", n_bad)
        g = np.where(bad, 0.0, g)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    grid.log_values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    grid.clamp()
    return n_bad


def build_snippet(queue_kf: DataQueue, queue_frame: DataQueue, target_id: int,
                  offsets=(-9, -6, -3, 1), per_frame: bool = False):
    """Source ids for one refinement target, or None when < 2 are usable.

    Keyframe mode: offsets are keyframe indices relative to the target's queue
    position, clamped to the queue contents with nearest-older substitution
    (a missing +1 is dropped). Per-frame mode: the 3 most recent keyframes
    plus the other consecutive frame in the per-frame queue.
    """
    if per_frame:
        ids = [r.frame_id for r in queue_frame.entries if r.frame_id != target_id]
        kf_ids = [r.frame_id for r in queue_kf.entries if r.frame_id != target_id]
        ids.extend(kf_ids[-3:])
        sources = sorted(set(ids))
    else:
        kf_ids = queue_kf.frame_ids()
        if target_id not in kf_ids:
            return None
        pos = kf_ids.index(target_id)
        chosen = set()
        for off in offsets:
            want = pos + off
            if off > 0:
                if want < len(kf_ids):
                    chosen.add(kf_ids[want])
                continue
            if pos == 0:
                # no older keyframe exists: mirror the offset forward
                want = min(pos - off, len(kf_ids) - 1)
            else:
                # nearest-older substitution, down to the oldest buffered keyframe
                want = max(want, 0)
                if want == pos:
                    want = pos - 1
            if 0 <= want < len(kf_ids) and want != pos:
                chosen.add(kf_ids[want])
        chosen.discard(target_id)
        sources = sorted(chosen)
    if len(sources) < 2:
        return None
    return SnippetFrameSet(target_id=target_id, source_ids=tuple(sources))


def forward_warp_depth(depth: DepthMap, T_src_to_tgt: SE3Pose, K: CameraIntrinsics,
                       fill_holes: bool = True):
    """Z-buffer splat of a depth map into another view.

    Returns (DepthMap, covered mask): covered marks pixels hit by the splat;
    holes are optionally filled from the nearest covered pixel but stay
    outside `covered`.
    """
    H, W = depth.values.shape
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    pts = backproject(K, np.stack([u, v], axis=-1), np.where(depth.valid, depth.values, 1.0))
    moved = T_src_to_tgt.transform(pts)
    z = moved[..., 2]
    ok = depth.valid & (z > 1e-9)
    zs = np.where(ok, z, 1.0)
    pu = np.rint(K.fx * moved[..., 0] / zs + K.cx).astype(int)
    pv = np.rint(K.fy * moved[..., 1] / zs + K.cy).astype(int)
    ok &= (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    out = np.full((H, W), np.inf)
    flat = out.ravel()
    idx = (pv[ok] * W + pu[ok]).ravel()
    np.minimum.at(flat, idx, z[ok].ravel())
    covered = np.isfinite(out)
    values = np.where(covered, out, 1.0)
    valid = covered.copy()
    if fill_holes and covered.any() and not covered.all():
        _, (iv, iu) = ndimage.distance_transform_edt(~covered, return_indices=True)
        values = values[iv, iu]
        valid[:] = True
    return DepthMap(values, valid), covered


class OnlineRefiner:
    """Consumes tracked frames, refines per-keyframe (and per-frame) depth grids.

    pose_lookup(frame_id) and obs_lookup(frame_id) resolve the tracker's
    current pose/map observations; initial_depth_lookup(frame_id) yields the
    depth model's starting prediction for a frame.
    """

    def __init__(self, K: CameraIntrinsics, config: RefinementConfig,
                 pose_lookup, initial_depth_lookup, obs_lookup=None):
        self.K = K
        self.cfg = config
        self.pose_lookup = pose_lookup
        self.initial_depth_lookup = initial_depth_lookup
        self.obs_lookup = obs_lookup or (lambda fid: [])
        self.queue_kf = DataQueue(config.queue_kf)
        self.queue_frame = DataQueue(config.queue_frame)
        self.grids: dict[int, LogDepthGrid] = {}
        self.adam: dict[int, AdamState] = {}
        self.images: dict[int, ImageGrid] = {}
        self.published: dict[int, DepthMap] = {}
        self.published_keyframes: list[int] = []
        self.loss_rows: list[str] = []
        self.refined_steps = 0
        self._last_kf_id: int | None = None
        self._last_frame_pose: SE3Pose | None = None
        self._pending_kf: list[int] = []

    # -- source/grid plumbing ---------------------------------------------

    def _current_depth(self, frame_id) -> DepthMap | None:
        if frame_id in self.grids:
            return self.grids[frame_id].to_depth_map()
        if frame_id in self.published:
            return self.published[frame_id]
        try:
            return self.initial_depth_lookup(frame_id)
        except KeyError:
            return None

    def _materialize_sources(self, snippet: SnippetFrameSet, target_pose: SE3Pose):
        sources = []
        for sid in snippet.source_ids:
            pose_s = self.pose_lookup(sid)
            img = self.images.get(sid)
            if pose_s is None or img is None:
                continue
            T = pose_s.compose(target_pose.inverse())
            sources.append(SourceFrame(sid, img, self._current_depth(sid), T))
        return sources

    def _log_step(self, frame_id, step, bd):
        self.loss_rows.append(
            f"{frame_id},{step},{bd.l_p:.9f},{bd.l_s:.9f},{bd.l_m:.9f},{bd.l_c:.9f},{bd.total:.9f}"
        )

    def _refine_target(self, frame_id, steps, per_frame=False) -> list:
        """Guarded ADAM loop on the target's grid; returns the loss trace."""
        grid = self.grids[frame_id]
        state = self.adam.setdefault(frame_id, AdamState.zeros(grid.log_values.shape))
        target_pose = self.pose_lookup(frame_id)
        snippet = build_snippet(self.queue_kf, self.queue_frame, frame_id,
                                self.cfg.snippet_offsets, per_frame=per_frame)
        if target_pose is None or snippet is None:
            log.info("frame %d: snippet unavailable, refinement skipped", frame_id)
            return []
        sources = self._materialize_sources(snippet, target_pose)
        if len(sources) < 2:
            log.info("frame %d: fewer than two usable sources, skipped", frame_id)
            return []
        map_obs = self.obs_lookup(frame_id)

        trace = []
        prev_total = None
        snapshot = None
        for step in range(steps + 1):
            inp = SnippetInputs(self.images[frame_id], grid.to_depth_map(), sources, map_obs, self.K)
            bd, grad = total_loss(inp, self.cfg.weights)
            if prev_total is not None and bd.total > prev_total * (1.0 - self.cfg.min_rel_decrease):
                grid.log_values, self.adam[frame_id] = snapshot
                log.info("frame %d step %d: loss %.3e did not improve on %.3e, rolled back",
                         frame_id, step, bd.total, prev_total)
                break
            trace.append(bd)
            self._log_step(frame_id, step, bd)
            if step == steps:
                break
            snapshot = (grid.log_values.copy(), self.adam[frame_id].copy())
            adam_step(grid, grad, self.adam[frame_id], self.cfg.lr)
            self.refined_steps += 1
            prev_total = bd.total
        return trace

    def _publish(self, frame_id, keyframe: bool, covered=None):
        depth = self.grids[frame_id].to_depth_map()
        if covered is not None:
            depth = DepthMap(depth.values, depth.valid & covered)
        self.published[frame_id] = depth
        if keyframe and frame_id not in self.published_keyframes:
            self.published_keyframes.append(frame_id)

    # -- Alg. 1 event handlers ----------------------------------------------

    def handle_slam_failure(self):
        """Clear both queues and drop optimizer state for in-queue grids;
        published depths are untouched and keyframe refinement pauses."""
        for rec in self.queue_kf.entries + self.queue_frame.entries:
            self.grids.pop(rec.frame_id, None)
            self.adam.pop(rec.frame_id, None)
        self.queue_kf.clear()
        self.queue_frame.clear()
        self._last_kf_id = None
        self._last_frame_pose = None
        self._pending_kf = []
        log.warning("SLAM failure: queues cleared, published depths retained")

    def on_tracked_frame(self, frame_id, timestamp, image: ImageGrid, status: str):
        """Feed one tracked frame through gating, queues, and refinement."""
        if status != "ok":
            self.handle_slam_failure()
            return
        pose = self.pose_lookup(frame_id)
        if pose is None:
            return
        self.images[frame_id] = image

        rec = KeyframeRecord(frame_id, timestamp, image, pose,
                             self.obs_lookup(frame_id), f"grid_{frame_id}")
        is_first_kf = self._last_kf_id is None
        if is_first_kf:
            accept_kf = True
        else:
            last_pose = self.pose_lookup(self._last_kf_id)
            accept_kf = last_pose is not None and select_keyframe(
                pose.compose(last_pose.inverse()), self.cfg.t_kf)

        self.queue_frame.push(rec)
        if accept_kf:
            prev_kf = self._last_kf_id
            evicted = self.queue_kf.push(rec)
            if frame_id not in self.grids:
                self.grids[frame_id] = LogDepthGrid(self.initial_depth_lookup(frame_id))
            # the freshly accepted keyframe is the "+1" source of the previous
            # one: that previous keyframe (plus any still-pending older ones)
            # gets its refinement round now
            if prev_kf is not None and prev_kf in self.grids:
                self._pending_kf.append(prev_kf)
            if evicted is not None and evicted.frame_id in self._pending_kf:
                # ran out of queue before a snippet materialized: save as-is
                self._pending_kf.remove(evicted.frame_id)
                self._publish(evicted.frame_id, keyframe=True)
            self._run_pending_keyframes()
            self._last_kf_id = frame_id
        elif not self.cfg.keyframes_only and self.cfg.k > 0:
            gate_ok = self._last_frame_pose is not None and select_keyframe(
                pose.compose(self._last_frame_pose.inverse()), self.cfg.t_frame)
            if gate_ok:
                self._init_frame_grid(frame_id, pose)
                self._refine_target(frame_id, self.cfg.k, per_frame=True)
                self._publish(frame_id, keyframe=False, covered=self._frame_covered)
                self.grids.pop(frame_id, None)
                self.adam.pop(frame_id, None)
        self._last_frame_pose = pose

    def _model_prediction(self, frame_id, pose):
        """The accumulated model's prediction for a keyframe.

        The most recent published keyframe's depth is transferred into this
        view through the consistency ratio (the initial depth supplies the
        correspondence), falling back to the initial prediction at uncovered
        or implausible (occluded) pixels. Returns (DepthMap or None, source id).
        """
        init = self.initial_depth_lookup(frame_id)
        prev = next((k for k in reversed(self.published_keyframes) if k != frame_id), None)
        if prev is None:
            return None, None
        prev_pose = self.pose_lookup(prev)
        prev_depth = self._current_depth(prev)
        if prev_pose is None or prev_depth is None:
            return None, None
        T = prev_pose.compose(pose.inverse())
        cr = consistency_ratio(init, prev_depth, T, self.K)
        ok = cr.valid & (np.abs(1.0 - cr.ratio) < 0.4)
        values = np.where(ok, init.values * np.where(ok, cr.ratio, 1.0), init.values)
        return DepthMap(np.clip(values, 1e-3, 1e3), init.valid.copy()), prev

    def _init_frame_grid(self, frame_id, pose):
        """Warm-start a per-frame grid by warping the nearest keyframe's depth."""
        self._frame_covered = None
        nearest = None
        for kid in reversed(self.queue_kf.frame_ids()):
            if kid in self.grids or kid in self.published:
                nearest = kid
                break
        if nearest is not None:
            src_depth = self._current_depth(nearest)
            pose_s = self.pose_lookup(nearest)
            if src_depth is not None and pose_s is not None:
                T = pose.compose(pose_s.inverse())
                warped, covered = forward_warp_depth(src_depth, T, self.K)
                if covered.any():
                    init = self.initial_depth_lookup(frame_id)
                    vals = np.where(covered, warped.values, init.values)
                    self.grids[frame_id] = LogDepthGrid(DepthMap(vals, covered | init.valid))
                    self._frame_covered = covered | init.valid
                    return
        self.grids[frame_id] = LogDepthGrid(self.initial_depth_lookup(frame_id))

    def _run_pending_keyframes(self):
        """Refine pending keyframes oldest-first; keep the skipped ones pending."""
        in_queue = set(self.queue_kf.frame_ids())
        still = []
        for kid in self._pending_kf:
            if kid not in in_queue or kid not in self.grids:
                continue
            if self._refine_target(kid, self.cfg.k_star):
                self._publish(kid, keyframe=True)
            else:
                still.append(kid)
        self._pending_kf = still

    def flush(self):
        """End of input: refine and publish the newest keyframe (no +1 exists)
        plus anything still pending."""
        if self._last_kf_id is not None and self._last_kf_id in self.grids:
            self._pending_kf.append(self._last_kf_id)
        self._run_pending_keyframes()
        for kid in self._pending_kf:
            if kid in self.grids:
                self._publish(kid, keyframe=True)
        self._pending_kf = []
