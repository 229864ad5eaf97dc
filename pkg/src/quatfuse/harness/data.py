"""Seeded train/eval splits and network-ready inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import lidarproj, synthgen, toydet
from ..fusion import ChainSpec
from ..numcore import Tensor
from .config import RunConfig

DEPTH_SCALE = 50.0
# scene seeds are spread by this stride per data_seed so splits never collide
_SPLIT_STRIDE = 1_000_000


@dataclass
class Sample:
    images: list
    depths: list
    bev: Tensor
    gt: toydet.SceneGT
    targets: toydet.Targets


def model_config(cfg: RunConfig, seed: int) -> toydet.ModelConfig:
    chain = ChainSpec(mode=cfg.fusion_mode, dae=cfg.dae, gae_enc=cfg.gae_enc,
                      gae_dec=cfg.gae_dec, qua_fa=cfg.qua_fa, plain_mixer=cfg.plain_mixer,
                      axis=cfg.axis, dae_hidden=cfg.dae_hidden, gae_hidden=cfg.gae_hidden,
                      depth_state_channels=cfg.depth_state_channels,
                      gae_quaternion=cfg.gae_quaternion)
    return toydet.ModelConfig(bev_channels=cfg.bev_channels, grid=cfg.grid,
                              x_range=cfg.x_range, y_range=cfg.y_range,
                              encoder_layers=cfg.encoder_layers,
                              decoder_layers=cfg.decoder_layers, chain=chain,
                              heat_prior=cfg.heat_prior, depth_scale=DEPTH_SCALE, seed=seed)


def scene_seeds(data_seed: int, split: str, n: int) -> list[int]:
    """Training scenes use even seeds, evaluation scenes odd ones."""
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    base = data_seed * _SPLIT_STRIDE + (0 if split == "train" else 1)
    return [base + 2 * k for k in range(n)]


def prepare_sample(scene: synthgen.Scene, grid: lidarproj.VoxelSpec,
                   lidar_present: bool = True) -> Sample:
    """Image to [-1, 1]; depth in units of 50 m; occupancy counts log-compressed."""
    cam = scene.cam
    image = Tensor._wrap((scene.image.data - 0.5) * 2.0)
    if lidar_present:
        bev = lidarproj.voxelize_bev(scene.pc, grid).grid.data.copy()
        depth = lidarproj.project_depth(scene.pc, cam, cam.height, cam.width).depth.data
    else:
        bev_map, maps = lidarproj.zero_lidar(grid, [cam])
        bev = bev_map.grid.data.copy()
        depth = maps[0].depth.data
    n_occ = grid.bins[2]
    bev[:n_occ] = np.log1p(bev[:n_occ])
    return Sample([image], [Tensor._wrap(depth / DEPTH_SCALE)], Tensor._wrap(bev), scene.gt,
                  toydet.build_targets(scene.gt, grid))


def without_lidar(sample: Sample) -> Sample:
    """Same scene with all LiDAR-derived inputs replaced by zeros."""
    return Sample(sample.images, [Tensor._wrap(np.zeros_like(d.data)) for d in sample.depths],
                  Tensor._wrap(np.zeros_like(sample.bev.data)), sample.gt, sample.targets)


_cache: dict = {}
_CACHE_SIZE = 4


def load_split(cfg: RunConfig, split: str, n: int | None = None) -> list[Sample]:
    """Generate (or reuse) the seeded scenes for ``split`` as prepared samples."""
    if n is None:
        n = cfg.train_scenes if split == "train" else cfg.eval_scenes
    grid = model_config(cfg, 0).grid_spec
    key = (cfg.data_seed, split, n, grid.x_range, grid.y_range, grid.voxel)
    if key not in _cache:
        samples = []
        for s in scene_seeds(cfg.data_seed, split, n):
            scene = synthgen.generate_scene(synthgen.SceneSpec(seed=s))
            samples.append(prepare_sample(scene, grid, True))
        while len(_cache) >= _CACHE_SIZE:
            _cache.pop(next(iter(_cache)))
        _cache[key] = samples
    samples = _cache[key]
    if cfg.lidar_present:
        return samples
    return [without_lidar(s) for s in samples]
