"""File formats shared across the pipeline.

PFM (little-endian, scale -1.0) for depth, PPM (P6, maxval 255) for images,
"FLO1" binary for flow fields, TUM text for trajectories. Invalid depth pixels
are stored as 0; invalid flow pixels as 1e9 sentinels.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import DepthMap, SE3Pose

FLOW_INVALID = 1e9


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a single-channel map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        # PFM stores rows bottom-to-top
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


def write_depth_pfm(path, depth: DepthMap):
    write_pfm(path, np.where(depth.valid, depth.values, 0.0))


def read_depth_pfm(path) -> DepthMap:
    values = read_pfm(path)
    valid = values > 0
    return DepthMap(np.where(valid, values, 1.0), valid)


def write_ppm(path, image: np.ndarray):
    """image in [0,1], (H, W) or (H, W, 3); grayscale is replicated to RGB."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a P6 PPM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_flo(path, flow: np.ndarray, valid: np.ndarray | None = None):
    """Flow (H, W, 2) as magic 'FLO1' + i32 width,height + f32 pairs."""
    flow = np.asarray(flow, dtype=np.float32)
    h, w = flow.shape[:2]
    if valid is not None:
        flow = np.where(np.asarray(valid, bool)[..., None], flow, np.float32(FLOW_INVALID))
    with open(path, "wb") as f:
        f.write(b"FLO1")
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path):
    """Returns (flow (H, W, 2) float64, valid (H, W) bool)."""
    with open(path, "rb") as f:
        if f.read(4) != b"FLO1":
            raise ValueError(f"{path}: bad flow magic")
        w, h = struct.unpack("<ii", f.read(8))
        data = np.frombuffer(f.read(w * h * 8), dtype="<f4").reshape(h, w, 2)
    flow = data.astype(np.float64)
    valid = np.all(np.abs(flow) < FLOW_INVALID / 2, axis=-1)
    return np.where(valid[..., None], flow, 0.0), valid


def write_tum_trajectory(path, stamped_poses):
    """Lines 'timestamp tx ty tz qx qy qz qw' (camera-to-world convention)."""
    lines = []
    for ts, pose in stamped_poses:
        inv = pose.inverse()  # camera-from-world -> camera-to-world
        w, x, y, z = inv.q
        tx, ty, tz = inv.t
        lines.append(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum_trajectory(path):
    """Returns list of (timestamp, camera-from-world SE3Pose)."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        cam_to_world = SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
        out.append((ts, cam_to_world.inverse()))
    return out


def write_csv(path, header: str, rows):
    lines = [header]
    lines.extend(rows)
    Path(path).write_text("\n".join(lines) + "\n")
