"""Small seeded models and inputs shared by the test modules."""

import math

import numpy as np

from quatfuse import lidarproj as lp
from quatfuse import toydet
from quatfuse.fusion import ChainSpec
from quatfuse.lidarproj import CameraModel
from quatfuse.numcore import Tensor

IMAGE_HW = (16, 32)


def small_camera():
    return CameraModel.forward_facing(width=32, height=16, fx=16.0, height_m=1.6, pitch=0.12)


def small_config(mode="progressive", seed=0, **chain):
    kw = dict(mode=mode, dae_hidden=2, gae_hidden=4, depth_state_channels=2)
    kw.update(chain)
    return toydet.ModelConfig(image_hw=IMAGE_HW, backbone_channels=(4, 4, 4), bev_channels=4,
                              grid=8, x_range=(0.0, 25.6), y_range=(-12.8, 12.8),
                              encoder_layers=1, decoder_layers=1, chain=ChainSpec(**kw),
                              seed=seed)


def small_model(mode="progressive", seed=0, **chain):
    return toydet.ToyDetector(small_config(mode, seed, **chain), [small_camera()])


def small_inputs(seed=0, lidar=True):
    rng = np.random.default_rng(seed)
    h, w = IMAGE_HW
    img = Tensor(rng.uniform(-1, 1, (3, h, w)))
    depth = np.where(rng.uniform(size=(1, h, w)) < 0.3, rng.uniform(0.1, 1.0, (1, h, w)), 0.0)
    bev = np.abs(rng.normal(size=(3, 8, 8)))
    if not lidar:
        depth, bev = np.zeros_like(depth), np.zeros_like(bev)
    return [img], [Tensor(depth)], Tensor(bev)


def randomize(module, rng, scale=0.3):
    """Give zero-initialized parameters random values so every path is live."""
    for t in module.parameters().values():
        if not t.data.any():
            t.data[...] = rng.normal(0.0, scale, t.shape)


def random_cloud(rng, n, spread=1.15):
    x = rng.uniform(-0.5, 25.6 * spread, n)
    y = rng.uniform(-12.8 * spread, 12.8 * spread, n)
    z = rng.uniform(-3.5, 3.5, n)
    return lp.PointCloud(np.column_stack([x, y, z, rng.uniform(0, 1, n)]))


def brute_force_bev(points, spec):
    """Per-point loop; returns count, max z, mean intensity as [bx, by] arrays."""
    bx, by, _ = spec.bins
    count = np.zeros((bx, by))
    maxz = np.full((bx, by), -math.inf)
    isum = np.zeros((bx, by))
    ranges = (spec.x_range, spec.y_range, spec.z_range)
    for p in points:
        if not all(lo <= p[a] <= hi for a, (lo, hi) in enumerate(ranges)):
            continue
        i = min(int(math.floor((p[0] - spec.x_range[0]) / spec.voxel[0])), bx - 1)
        j = min(int(math.floor((p[1] - spec.y_range[0]) / spec.voxel[1])), by - 1)
        count[i, j] += 1
        isum[i, j] += p[3]
        maxz[i, j] = max(maxz[i, j], p[2])
    maxz[count == 0] = 0.0
    mean = np.zeros_like(isum)
    mean[count > 0] = isum[count > 0] / count[count > 0]
    return count, maxz, mean


def sorted_pixel_oracle(points, cam, out_h, out_w):
    """Collect every candidate per pixel, sort, keep the nearest."""
    T = cam.T_ego_to_cam
    cand = {}
    for p in points:
        X, Y, Z = (sum(T[r, k] * p[k] for k in range(3)) + T[r, 3] for r in range(3))
        if Z <= lp.MIN_CAMERA_Z:
            continue
        u = (cam.fx * X / Z + cam.cx) * (out_w / cam.width)
        v = (cam.fy * Y / Z + cam.cy) * (out_h / cam.height)
        c, r = math.floor(u + 0.5), math.floor(v + 0.5)
        if 0 <= c < out_w and 0 <= r < out_h:
            cand.setdefault((r, c), []).append(Z)
    out = np.zeros((out_h, out_w))
    for (r, c), zs in cand.items():
        out[r, c] = sorted(zs)[0]
    return out
