"""Deterministic synthetic driving scenes: camera image, LiDAR sweep, ground truth."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from . import _kernels
from .lidarproj import CameraModel, PointCloud, load_camera, load_pointcloud, save_camera, \
    save_pointcloud
from .numcore import Tensor
from .toydet import SceneGT

RANGE_NOISE = 0.02
# range noise is truncated here so every return stays within this many sigma
NOISE_CLIP = 3.0
MAX_ATTEMPTS = 1000


def default_camera() -> CameraModel:
    return CameraModel.forward_facing(width=128, height=64, fx=64.0, height_m=1.6, pitch=0.12)


@dataclass
class SceneSpec:
    seed: int = 0
    n_boxes: tuple[int, int] = (1, 4)
    width: tuple[float, float] = (1.6, 2.2)
    length: tuple[float, float] = (3.6, 4.8)
    height: tuple[float, float] = (1.4, 1.9)
    x_place: tuple[float, float] = (5.0, 24.0)
    y_place: tuple[float, float] = (-11.0, 11.0)
    n_azimuth: int = 360
    n_elevation: int = 16
    elevation: tuple[float, float] = (-0.42, 0.06)
    lidar_height: float = 1.8
    max_range: float = 60.0
    dropout: float = 0.05
    camera: CameraModel = field(default_factory=default_camera)
    min_visible_px: int = 4


@dataclass
class Scene:
    image: Tensor
    pc: PointCloud
    gt: SceneGT
    cam: CameraModel
    boxes3d: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.image, self.pc, self.gt, self.cam))


def box_row(cx, cy, w, l, h, yaw) -> np.ndarray:
    """(cx, cy, z0, w, l, h, yaw) with the box standing on the ground."""
    return np.array([cx, cy, 0.0, w, l, h, yaw])


def raycast_box(origin, direction, box) -> float | None:
    """Distance along a unit ray to a yaw-rotated box, or None on a miss."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-12:
        raise ValueError("ray direction must be unit length")
    t = _kernels.slab(origin, d, box)
    return None if math.isinf(t) else t


def box_corners(box: np.ndarray) -> np.ndarray:
    cx, cy, z0, w, l, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for dl in (-0.5, 0.5):
        for dw in (-0.5, 0.5):
            for z in (z0, z0 + h):
                lx, ly = dl * l, dw * w
                out.append((cx + c * lx - s * ly, cy + s * lx + c * ly, z))
    return np.array(out)


def ray_grid(spec: SceneSpec) -> np.ndarray:
    az = np.arange(spec.n_azimuth) * (2.0 * math.pi / spec.n_azimuth)
    el = np.linspace(spec.elevation[0], spec.elevation[1], spec.n_elevation)
    A, E = np.meshgrid(az, el, indexing="ij")
    ce = np.cos(E)
    return np.stack([ce * np.cos(A), ce * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def silhouette_mask(box: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pixels (integer centers) inside the convex hull of the projected corners."""
    pc = cam.to_camera(box_corners(box))
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if (pc[:, 2] <= 0.1).any():
        return mask
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                   cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    try:
        hull = ConvexHull(uv)
    except Exception:
        return mask
    rr, cc = np.mgrid[0:cam.height, 0:cam.width]
    pts = np.stack([cc.reshape(-1), rr.reshape(-1)], axis=1).astype(np.float64)
    eq = hull.equations
    inside = (pts @ eq[:, :2].T + eq[:, 2] <= 1e-9).all(axis=1)
    return inside.reshape(cam.height, cam.width)


def background(cam: CameraModel) -> np.ndarray:
    rows = np.linspace(0.0, 1.0, cam.height)[:, None]
    sky = np.array([0.55, 0.7, 0.9])[:, None, None] * (1.0 - 0.3 * rows)[None]
    img = np.broadcast_to(sky, (3, cam.height, cam.width)).copy()
    # ground below the horizon: gray that brightens toward the camera
    horizon = horizon_row(cam)
    r = np.arange(cam.height)
    below = r > horizon
    shade = 0.25 + 0.25 * np.clip((r - horizon) / max(1.0, cam.height - horizon), 0, 1)
    img[:, below, :] = shade[below][None, :, None]
    return img


def horizon_row(cam: CameraModel) -> float:
    far = cam.to_camera(np.array([[1e6, 0.0, 0.0]]))[0]
    return cam.fy * far[1] / far[2] + cam.cy


def render(boxes: np.ndarray, albedo: np.ndarray, cam: CameraModel):
    """Painter's-order flat shading; returns image [3,H,W] and per-box visible counts."""
    img = background(cam)
    owner = np.full((cam.height, cam.width), -1)
    dist = np.hypot(boxes[:, 0], boxes[:, 1]) if len(boxes) else np.zeros(0)
    for b in np.argsort(-dist, kind="stable"):
        m = silhouette_mask(boxes[b], cam)
        img[:, m] = albedo[b][:, None]
        owner[m] = b
    visible = np.array([(owner == b).sum() for b in range(len(boxes))], dtype=np.int64)
    return img, visible


def _overlaps(box, others, margin=0.3) -> bool:
    r = 0.5 * math.hypot(box[3], box[4])
    for o in others:
        if math.hypot(box[0] - o[0], box[1] - o[1]) < r + 0.5 * math.hypot(o[3], o[4]) + margin:
            return True
    return False


def in_view(box: np.ndarray, cam: CameraModel) -> bool:
    c = cam.to_camera(np.array([[box[0], box[1], box[2] + 0.5 * box[5]]]))[0]
    if c[2] <= 0.1:
        return False
    u = cam.fx * c[0] / c[2] + cam.cx
    v = cam.fy * c[1] / c[2] + cam.cy
    return 0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1


def sample_boxes(spec: SceneSpec, rng: np.random.Generator):
    n_target = int(rng.integers(spec.n_boxes[0], spec.n_boxes[1] + 1))
    boxes: list[np.ndarray] = []
    albedo: list[np.ndarray] = []
    attempts = 0
    while len(boxes) < n_target and attempts < MAX_ATTEMPTS:
        attempts += 1
        cand = box_row(rng.uniform(*spec.x_place), rng.uniform(*spec.y_place),
                       rng.uniform(*spec.width), rng.uniform(*spec.length),
                       rng.uniform(*spec.height), rng.uniform(0.0, math.pi))
        col = rng.uniform(0.05, 1.0, 3)
        col[rng.integers(3)] = rng.uniform(0.8, 1.0)
        if _overlaps(cand, boxes) or not in_view(cand, spec.camera):
            continue
        trial = np.array(boxes + [cand])
        _, vis = render(trial, np.array(albedo + [col]), spec.camera)
        if (vis < spec.min_visible_px).any():
            continue
        boxes.append(cand)
        albedo.append(col)
    arr = np.array(boxes).reshape(-1, 7)
    return arr, np.array(albedo).reshape(-1, 3), len(boxes) < n_target, attempts


def simulate_lidar(boxes: np.ndarray, spec: SceneSpec, rng: np.random.Generator):
    dirs = ray_grid(spec)
    origin = np.array([0.0, 0.0, spec.lidar_height])
    origins = np.broadcast_to(origin, dirs.shape).copy()
    t, hit = _kernels.raycast(origins, dirs, np.ascontiguousarray(boxes, dtype=np.float64),
                              0.0, True, spec.max_range)
    noise = np.clip(rng.normal(0.0, RANGE_NOISE, t.shape), -NOISE_CLIP * RANGE_NOISE,
                    NOISE_CLIP * RANGE_NOISE)
    keep = np.isfinite(t) & (rng.uniform(size=t.shape) >= spec.dropout)
    reflect = rng.uniform(0.4, 0.9, max(1, len(boxes)))
    ground_int = rng.uniform(0.05, 0.2, t.shape)
    tn = t[keep] + noise[keep]
    pts = origin + tn[:, None] * dirs[keep]
    inten = np.where(hit[keep] >= 0, reflect[np.maximum(hit[keep], 0)], ground_int[keep])
    return PointCloud(np.column_stack([pts, inten])), hit[keep], tn


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    boxes, albedo, short, attempts = sample_boxes(spec, rng)
    pc, _, _ = simulate_lidar(boxes, spec, rng)
    img, vis = render(boxes, albedo, spec.camera)
    gt = SceneGT(boxes[:, [0, 1, 3, 4, 6]] if len(boxes) else np.zeros((0, 5)))
    meta = {"seed": spec.seed, "placement_failed": bool(short), "attempts": attempts,
            "visible_px": vis.tolist()}
    return Scene(Tensor._wrap(img), pc, gt, spec.camera, boxes, meta)


# --------------------------------------------------------------------------
# persistence: image.ppm, cloud.qfpc, cam.txt, gt.csv


def save_ppm(path, image: np.ndarray) -> None:
    rgb = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h = (int(v) for v in fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(3 * w * h), dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_scene(directory, scene: Scene) -> None:
    os.makedirs(directory, exist_ok=True)
    save_ppm(os.path.join(directory, "image.ppm"), scene.image.data)
    save_pointcloud(os.path.join(directory, "cloud.qfpc"), scene.pc)
    save_camera(os.path.join(directory, "cam.txt"), scene.cam)
    with open(os.path.join(directory, "gt.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for row in scene.gt.boxes:
            wr.writerow([repr(float(v)) for v in row])


def load_scene(directory) -> Scene:
    image = load_ppm(os.path.join(directory, "image.ppm"))
    pc = load_pointcloud(os.path.join(directory, "cloud.qfpc"))
    cam = load_camera(os.path.join(directory, "cam.txt"))
    with open(os.path.join(directory, "gt.csv")) as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    return Scene(Tensor._wrap(image), pc, SceneGT(np.array(rows).reshape(-1, 5)), cam)
