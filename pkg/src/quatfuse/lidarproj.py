"""Point clouds to BEV grids and perspective depth maps."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numcore import ConfigError, Tensor

MIN_CAMERA_Z = 0.1


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must be N x 4, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class VoxelSpec:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    z_range: tuple[float, float] = (-5.0, 3.0)
    voxel: tuple[float, float, float] = (0.23, 0.23, 8.0)

    def __post_init__(self):
        for name, (lo, hi) in zip("xyz", (self.x_range, self.y_range, self.z_range)):
            if not hi > lo:
                raise ConfigError(f"VoxelSpec: {name} range max must exceed min, got {(lo, hi)}")
        if min(self.voxel) <= 0:
            raise ConfigError(f"VoxelSpec: voxel extents must be positive, got {self.voxel}")

    @staticmethod
    def _bins(lo: float, hi: float, d: float) -> int:
        # round first so that 51.2/1.6 does not become 33 bins through float noise
        return max(1, math.ceil(round((hi - lo) / d, 9)))

    @property
    def bins(self) -> tuple[int, int, int]:
        return (self._bins(*self.x_range, self.voxel[0]),
                self._bins(*self.y_range, self.voxel[1]),
                self._bins(*self.z_range, self.voxel[2]))

    @property
    def n_channels(self) -> int:
        return self.bins[2] + 2

    def cell_center(self, ix, iy):
        x = self.x_range[0] + (np.asarray(ix) + 0.5) * self.voxel[0]
        y = self.y_range[0] + (np.asarray(iy) + 0.5) * self.voxel[1]
        return x, y


@dataclass
class BEVMap:
    """Plan-view grid [C, bins_x, bins_y].

    Channels are per-z-slice occupancy counts (one slice by default), then
    max z, then mean intensity. Empty cells hold zeros.
    """

    grid: Tensor
    n_slices: int = 1

    @property
    def occupancy(self) -> np.ndarray:
        return self.grid.data[:self.n_slices].sum(axis=0)

    @property
    def max_z(self) -> np.ndarray:
        return self.grid.data[self.n_slices]

    @property
    def mean_intensity(self) -> np.ndarray:
        return self.grid.data[self.n_slices + 1]


def in_range_mask(pc: PointCloud, spec: VoxelSpec) -> np.ndarray:
    p = pc.points
    m = np.ones(len(pc), dtype=bool)
    for a, (lo, hi) in enumerate((spec.x_range, spec.y_range, spec.z_range)):
        m &= (p[:, a] >= lo) & (p[:, a] <= hi)
    return m


def voxel_indices(pc: PointCloud, spec: VoxelSpec):
    """(ix, iy, iz, mask) for in-range points; max-boundary points clamp inward."""
    m = in_range_mask(pc, spec)
    p = pc.points[m]
    idx = []
    for a, (lo, _hi) in enumerate((spec.x_range, spec.y_range, spec.z_range)):
        i = np.floor((p[:, a] - lo) / spec.voxel[a]).astype(np.int64)
        idx.append(np.clip(i, 0, spec.bins[a] - 1))
    return idx[0], idx[1], idx[2], m


def voxelize_bev(pc: PointCloud, spec: VoxelSpec) -> BEVMap:
    bx, by, bz = spec.bins
    ix, iy, iz, m = voxel_indices(pc, spec)
    p = pc.points[m]
    n_cells = bx * by
    cell = ix * by + iy
    count, maxz, isum = _kernels.bev_scatter(cell, p[:, 2].copy(), p[:, 3].copy(), n_cells)
    mean_int = np.where(count > 0, isum / np.maximum(count, 1.0), 0.0)
    if bz == 1:
        occ = count.reshape(1, bx, by)
    else:
        occ = np.zeros((bz, n_cells))
        np.add.at(occ, (iz, cell), 1.0)
        occ = occ.reshape(bz, bx, by)
    grid = np.concatenate([occ, maxz.reshape(1, bx, by), mean_int.reshape(1, bx, by)])
    return BEVMap(Tensor._wrap(grid), n_slices=bz)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_ego_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.T_ego_to_cam = np.asarray(self.T_ego_to_cam, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"camera focal lengths must be positive, got {(self.fx, self.fy)}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"camera size must be positive, got {(self.width, self.height)}")
        T = self.T_ego_to_cam
        if T.shape != (4, 4):
            raise ConfigError(f"extrinsic must be 4x4, got {T.shape}")
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigError("extrinsic rotation is not a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        T = self.T_ego_to_cam
        return xyz @ T[:3, :3].T + T[:3, 3]

    def to_ego(self, cam_xyz: np.ndarray) -> np.ndarray:
        T = self.T_ego_to_cam
        return (cam_xyz - T[:3, 3]) @ T[:3, :3]

    @classmethod
    def forward_facing(cls, width: int, height: int, fx: float, height_m: float,
                       fy: float | None = None, pitch: float = 0.0) -> CameraModel:
        """Camera at (0, 0, height_m) looking along ego +x; optional downward pitch."""
        # ego (x fwd, y left, z up) -> camera (x right, y down, z fwd)
        base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        c, s = math.cos(pitch), math.sin(pitch)
        tilt = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        R = tilt @ base
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ np.array([0.0, 0.0, height_m])
        return cls(fx=fx, fy=fx if fy is None else fy, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, T_ego_to_cam=T)


@dataclass
class DepthMap:
    depth: Tensor
    max_depth: float = math.inf


def pixel_coords(pc_xyz: np.ndarray, cam: CameraModel, out_h: int, out_w: int):
    """Rounded (row, col), camera depth and a validity mask for each point."""
    pc = cam.to_camera(pc_xyz)
    z = pc[:, 2]
    front = z > MIN_CAMERA_Z
    zs = np.where(front, z, 1.0)
    u = (cam.fx * pc[:, 0] / zs + cam.cx) * (out_w / cam.width)
    v = (cam.fy * pc[:, 1] / zs + cam.cy) * (out_h / cam.height)
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    ok = front & (col >= 0) & (col < out_w) & (row >= 0) & (row < out_h)
    return row.astype(np.int64), col.astype(np.int64), z, ok


def project_depth(pc: PointCloud, cam: CameraModel, out_h: int, out_w: int,
                  max_depth: float = math.inf) -> DepthMap:
    row, col, z, ok = pixel_coords(pc.xyz, cam, out_h, out_w)
    ok &= z <= max_depth
    raster = _kernels.zbuffer(row[ok], col[ok], z[ok].copy(), out_h, out_w)
    return DepthMap(Tensor._wrap(raster.reshape(1, out_h, out_w)), max_depth=max_depth)


def backproject(row: float, col: float, depth: float, cam: CameraModel,
                out_h: int, out_w: int) -> np.ndarray:
    u = col * cam.width / out_w
    v = row * cam.height / out_h
    pc = np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])
    return cam.to_ego(pc[None])[0]


def zero_lidar(spec: VoxelSpec, cams, depth_hw: tuple[int, int] | None = None):
    """All-zero BEV grid and depth maps: the missing-LiDAR inputs."""
    bx, by, _ = spec.bins
    bev = BEVMap(Tensor._wrap(np.zeros((spec.n_channels, bx, by))), n_slices=spec.bins[2])
    maps = []
    for cam in cams:
        h, w = depth_hw if depth_hw is not None else (cam.height, cam.width)
        maps.append(DepthMap(Tensor._wrap(np.zeros((1, h, w)))))
    return bev, maps


# --------------------------------------------------------------------------
# file formats

_PC_MAGIC = b"QFPC"


def save_pointcloud(path, pc: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(_PC_MAGIC)
        fh.write(struct.pack("<I", len(pc)))
        fh.write(pc.points.astype("<f4").tobytes())


def load_pointcloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != _PC_MAGIC:
            raise ValueError(f"{path}: not a QFPC point cloud")
        (n,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(16 * n), dtype="<f4")
    if data.size != 4 * n:
        raise ValueError(f"{path}: truncated point cloud")
    return PointCloud(data.reshape(n, 4).astype(np.float64))


_CAM_KEYS = ("fx", "fy", "cx", "cy", "width", "height")
_EXT_KEYS = tuple(f"t{r}{c}" for r in range(3) for c in range(4))


def save_camera(path, cam: CameraModel) -> None:
    lines = [f"{k} = {getattr(cam, k)!r}" for k in _CAM_KEYS]
    ext = cam.T_ego_to_cam[:3].reshape(-1)
    lines += [f"{k} = {float(v)!r}" for k, v in zip(_EXT_KEYS, ext)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_camera(path) -> CameraModel:
    vals = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = value.strip()
    missing = [k for k in _CAM_KEYS + _EXT_KEYS if k not in vals]
    if missing:
        raise ValueError(f"{path}: missing camera keys {missing}")
    T = np.eye(4)
    T[:3] = np.array([float(vals[k]) for k in _EXT_KEYS]).reshape(3, 4)
    return CameraModel(fx=float(vals["fx"]), fy=float(vals["fy"]), cx=float(vals["cx"]),
                       cy=float(vals["cy"]), width=int(vals["width"]),
                       height=int(vals["height"]), T_ego_to_cam=T)


def save_depth_pgm(path, dm: DepthMap) -> None:
    """16-bit binary PGM, depth in millimetres (clipped at 65535)."""
    d = dm.depth.data[0]
    mm = np.clip(np.round(d * 1000.0), 0, 65535).astype(">u2")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())


def load_depth_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = (int(v) for v in fh.readline().split())
        fh.readline()
        mm = np.frombuffer(fh.read(2 * w * h), dtype=">u2").reshape(h, w)
    return mm.astype(np.float64) / 1000.0
