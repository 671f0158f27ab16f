"""Self-supervised refinement losses and their gradients.

Four terms over a target frame and a snippet of source frames: photometric
(SSIM + l1 against warped sources), edge-aware smoothness of mean-normalized
inverse depth, sparse map-point supervision, and an occlusion-aware per-pixel
minimum of depth-consistency ratios. Every term returns its gradient with
respect to the target's log-depth grid; gradients are exactly zero at invalid
pixels. Source depths are treated as constants (stop-gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageGrid,
    SE3Pose,
    consistency_ratio,
    warp_source_to_target,
)

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
PE_ALPHA = 0.85


class LossError(ValueError):
    """No usable pixels / sources for a loss that requires them."""


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1e-4
    lambda_m: float = 5e-2
    lambda_c: float = 1e-1

    def __post_init__(self):
        if min(self.lambda_s, self.lambda_m, self.lambda_c) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class SnippetFrameSet:
    """Ordered source frame ids for one refinement target."""

    target_id: int
    source_ids: tuple

    def __post_init__(self):
        ids = tuple(self.source_ids)
        if not ids:
            raise ValueError("snippet needs at least one source")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate source ids")
        if self.target_id in ids:
            raise ValueError("target cannot be its own source")
        object.__setattr__(self, "source_ids", ids)


@dataclass(frozen=True)
class MapPointObservation:
    """One sparse supervision sample: pixel plus SLAM-triangulated depth."""

    pixel: tuple
    slam_depth: float

    def __post_init__(self):
        if self.slam_depth <= 0:
            raise ValueError("slam depth must be positive")


@dataclass
class LossBreakdown:
    l_p: float
    l_s: float
    l_m: float
    l_c: float
    total: float
    counts: dict = field(default_factory=dict)


@dataclass
class SourceFrame:
    """Materialized snippet source: image, depth (constant), relative pose."""

    frame_id: int
    image: ImageGrid
    depth: DepthMap | None
    pose_rel: SE3Pose  # target -> source


@dataclass
class SnippetInputs:
    """Everything total_loss needs for one target frame."""

    target_image: ImageGrid
    target_depth: DepthMap
    sources: list
    map_obs: list
    K: CameraIntrinsics


def box3(x):
    """3x3 box mean with zero padding (self-adjoint, so backward = forward)."""
    x = np.asarray(x, dtype=float)
    p = np.zeros((x.shape[0] + 2, x.shape[1] + 2) + x.shape[2:])
    p[1:-1, 1:-1] = x
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
        + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    ) / 9.0


def _ssim_terms(x, y):
    mu_x, mu_y = box3(x), box3(y)
    beta_y, beta_xy = box3(y * y), box3(x * y)
    sx = box3(x * x) - mu_x**2
    sy = beta_y - mu_y**2
    sxy = beta_xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = sx + sy + SSIM_C2
    return {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": (a1 * a2) / (b1 * b2)}


def ssim(a, b):
    """Per-pixel SSIM map in [-1, 1]; 3x3 box statistics, C1=1e-4, C2=9e-4.

    Accepts (H, W) or (H, W, C) arrays (or ImageGrids); multi-channel inputs
    return per-channel maps.
    """
    x = a.values if isinstance(a, ImageGrid) else np.asarray(a, dtype=float)
    y = b.values if isinstance(b, ImageGrid) else np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise LossError("ssim inputs must share a shape")
    return _ssim_terms(x, y)["s"]


def _ssim_backward(x, y, terms, g):
    """d(sum g*S)/dy for per-pixel weights g, via the self-adjoint box filter."""
    denom = terms["b1"] * terms["b2"]
    s = terms["s"]
    dS_dmu = 2 * terms["mu_x"] * (terms["a2"] - terms["a1"]) / denom \
        - 2 * terms["mu_y"] * s * (terms["b2"] - terms["b1"]) / denom
    dS_dbeta_y = -s / terms["b2"]
    dS_dbeta_xy = 2 * terms["a1"] / denom
    return box3(g * dS_dmu) + 2 * y * box3(g * dS_dbeta_y) + x * box3(g * dS_dbeta_xy)


def photometric_error(I_i, I_warp, valid):
    """Per-pixel pe = alpha/2 (1 - SSIM) + (1 - alpha) l1, channel-averaged.

    Returns (pe map, backward) where backward(g) yields d(sum g*pe)/dI_warp
    per channel. Raises LossError when the valid mask is empty.
    """
    x = (I_i.channel_stack() if isinstance(I_i, ImageGrid) else np.atleast_3d(np.asarray(I_i, float)))
    y = (I_warp.channel_stack() if isinstance(I_warp, ImageGrid) else np.atleast_3d(np.asarray(I_warp, float)))
    if x.shape != y.shape:
        raise LossError("photometric inputs must share a shape")
    if not np.any(valid):
        raise LossError("no valid pixels for photometric error")
    C = x.shape[2]
    terms = _ssim_terms(x, y)
    pe = (PE_ALPHA / 2 * (1 - terms["s"]) + (1 - PE_ALPHA) * np.abs(x - y)).mean(axis=2)

    def backward(g):
        gc = g[..., None] / C
        d_l1 = gc * (1 - PE_ALPHA) * np.sign(y - x)
        d_ssim = -(PE_ALPHA / 2) * _ssim_backward(x, y, terms, gc)
        return d_l1 + d_ssim

    return pe, backward


def loss_photometric(target_image: ImageGrid, target_depth: DepthMap, sources, K):
    """Sum over sources of the mean photometric error against the warped view.

    Sources with no valid overlap are skipped (and reported in skipped ids);
    raises LossError when every source is unusable. Gradient flows through the
    warp jacobian into the target log-depth.
    """
    grad = np.zeros(target_depth.values.shape)
    value = 0.0
    total_count = 0
    skipped = []
    tgt = target_image.channel_stack()
    for src in sources:
        warp = warp_source_to_target(src.image, target_depth, src.pose_rel, K)
        m = warp.valid
        n = int(m.sum())
        if n == 0:
            skipped.append(src.frame_id)
            continue
        # invalid warp pixels take the target's intensity so that SSIM windows
        # straddling them see no spurious mismatch; they are excluded from the
        # mean and carry zero depth jacobian either way
        filled = np.where(m[..., None], warp.image, tgt)
        pe, backward = photometric_error(target_image, ImageGrid(filled), m)
        value += float(pe[m].mean())
        d_iwarp = backward(np.where(m, 1.0 / n, 0.0))
        grad += (d_iwarp * warp.jacobian).sum(axis=2) * target_depth.values
        total_count += n
    if total_count == 0:
        raise LossError("photometric loss has no usable source frame")
    grad[~target_depth.valid] = 0.0
    return value, grad, total_count, skipped


def loss_smoothness(D: DepthMap, I: ImageGrid):
    """Edge-aware smoothness of mean-normalized inverse depth, forward diffs.

    x- and y-direction terms are averaged over their own valid difference
    sites and summed. The gradient includes the coupling through the mean
    normalizer, which makes the loss exactly invariant to global rescaling.
    """
    if not np.any(D.valid):
        raise LossError("smoothness needs at least one valid pixel")
    img = I.channel_stack() if isinstance(I, ImageGrid) else np.atleast_3d(np.asarray(I, float))
    d = np.where(D.valid, 1.0 / np.where(D.valid, D.values, 1.0), 0.0)
    n_valid = int(D.valid.sum())
    m = d[D.valid].mean()
    dstar = d / m

    gx = np.abs(np.diff(img, axis=1)).mean(axis=2)
    gy = np.abs(np.diff(img, axis=0)).mean(axis=2)
    wx = np.exp(-gx)
    wy = np.exp(-gy)
    sx_valid = D.valid[:, :-1] & D.valid[:, 1:]
    sy_valid = D.valid[:-1, :] & D.valid[1:, :]
    dx = dstar[:, 1:] - dstar[:, :-1]
    dy = dstar[1:, :] - dstar[:-1, :]
    nx, ny = int(sx_valid.sum()), int(sy_valid.sum())
    value = 0.0
    A = np.zeros_like(d)  # dL/d dstar
    if nx:
        value += float((np.abs(dx) * wx)[sx_valid].mean())
        cx = np.where(sx_valid, np.sign(dx) * wx / nx, 0.0)
        A[:, 1:] += cx
        A[:, :-1] -= cx
    if ny:
        value += float((np.abs(dy) * wy)[sy_valid].mean())
        cy = np.where(sy_valid, np.sign(dy) * wy / ny, 0.0)
        A[1:, :] += cy
        A[:-1, :] -= cy

    coupling = float((A * dstar)[D.valid].sum()) / n_valid
    dL_dd = np.where(D.valid, (A - coupling) / m, 0.0)
    grad = -d * dL_dd  # d(1/D)/d(log D) = -1/D
    return value, grad, nx + ny


def loss_mappoint(D: DepthMap, observations):
    """Mean absolute difference to SLAM depths at nearest-pixel positions.

    Zero observations is not an error (sparse frames occur): returns 0 with
    count 0. Observations landing on invalid pixels are dropped.
    """
    H, W = D.values.shape
    grad = np.zeros((H, W))
    used = []
    for obs in observations:
        u = int(np.floor(obs.pixel[0] + 0.5))
        v = int(np.floor(obs.pixel[1] + 0.5))
        if 0 <= u < W and 0 <= v < H and D.valid[v, u]:
            used.append((v, u, obs.slam_depth))
    if not used:
        return 0.0, grad, 0
    n = len(used)
    value = 0.0
    for v, u, sd in used:
        diff = D.values[v, u] - sd
        value += abs(diff)
        grad[v, u] += np.sign(diff) * D.values[v, u] / n
    return value / n, grad, n


def loss_consistency(target_depth: DepthMap, sources, K):
    """Occlusion-aware consistency: per-pixel minimum of |1 - ratio| over sources.

    Pixels invalid in a given source are excluded from that source's candidacy;
    ties go to the lowest source index. Pixels with no candidate at all
    contribute nothing (count 0 when that holds everywhere).
    """
    H, W = target_depth.values.shape
    usable = [s for s in sources if s.depth is not None]
    if not usable:
        return 0.0, np.zeros((H, W)), 0
    cost = np.full((len(usable), H, W), np.inf)
    dcost = np.zeros((len(usable), H, W))
    for i, src in enumerate(usable):
        cr = consistency_ratio(target_depth, src.depth, src.pose_rel, K)
        c = np.abs(1.0 - cr.ratio)
        # d|1-r|/d logD = -sign(1-r) * dr/dD * D
        dc = -np.sign(1.0 - cr.ratio) * cr.dratio_ddepth * target_depth.values
        cost[i] = np.where(cr.valid, c, np.inf)
        dcost[i] = np.where(cr.valid, dc, 0.0)
    best = np.argmin(cost, axis=0)
    c_min = np.take_along_axis(cost, best[None], axis=0)[0]
    has_candidate = np.isfinite(c_min)
    n = int(has_candidate.sum())
    if n == 0:
        return 0.0, np.zeros((H, W)), 0
    value = float(c_min[has_candidate].mean())
    g_min = np.take_along_axis(dcost, best[None], axis=0)[0]
    grad = np.where(has_candidate, g_min / n, 0.0)
    grad[~target_depth.valid] = 0.0
    return value, grad, n


def total_loss(inp: SnippetInputs, weights: LossWeights):
    """Weighted sum of the four terms plus the matching log-depth gradient."""
    l_p, g_p, n_p, skipped = loss_photometric(inp.target_image, inp.target_depth, inp.sources, inp.K)
    l_s, g_s, n_s = loss_smoothness(inp.target_depth, inp.target_image)
    l_m, g_m, n_m = loss_mappoint(inp.target_depth, inp.map_obs)
    l_c, g_c, n_c = loss_consistency(inp.target_depth, inp.sources, inp.K)
    total = l_p + weights.lambda_s * l_s + weights.lambda_m * l_m + weights.lambda_c * l_c
    grad = g_p + weights.lambda_s * g_s + weights.lambda_m * g_m + weights.lambda_c * g_c
    breakdown = LossBreakdown(
        l_p=l_p, l_s=l_s, l_m=l_m, l_c=l_c, total=total,
        counts={"l_p": n_p, "l_s": n_s, "l_m": n_m, "l_c": n_c, "skipped_sources": skipped},
    )
    return breakdown, grad
