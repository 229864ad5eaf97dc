"""A miniature camera-to-BEV detector that the integrator chain plugs into."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import maximum_filter

from . import numcore as nc
from .fusion import ChainSpec, IntegratorChain, chain_forward
from .layers import Conv1x1, Conv3x3, Module, param_rng
from .lidarproj import CameraModel, MIN_CAMERA_Z, VoxelSpec
from .numcore import ConfigError, Tensor

FOCAL_ALPHA = 2
FOCAL_BETA = 4
HEAT_WEIGHT = 1.0
SIZE_WEIGHT = 0.5


@dataclass
class SceneGT:
    """Boxes as rows of (cx, cy, w, l, yaw); metres and radians."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        if (b[:, 2:4] <= 0).any():
            raise ValueError("box extents must be positive")
        self.boxes = b

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.boxes[:, :2]


@dataclass
class ModelConfig:
    image_hw: tuple[int, int] = (64, 128)
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    bev_channels: int = 64
    grid: int = 48
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    encoder_layers: int = 2
    decoder_layers: int = 2
    chain: ChainSpec = field(default_factory=ChainSpec)
    heat_prior: float = 0.1
    query_std: float = 0.1
    depth_scale: float = 50.0
    depth_aux_weight: float = 0.0
    seed: int = 0

    @property
    def grid_spec(self) -> VoxelSpec:
        dx = (self.x_range[1] - self.x_range[0]) / self.grid
        dy = (self.y_range[1] - self.y_range[0]) / self.grid
        return VoxelSpec(self.x_range, self.y_range, (-5.0, 3.0), (dx, dy, 8.0))


@dataclass
class Prediction:
    heat_logits: Tensor
    sizes: Tensor
    depth_pred: Tensor | None = None

    @property
    def heatmap(self) -> np.ndarray:
        return nc._sigmoid(self.heat_logits.data)


# --------------------------------------------------------------------------
# geometric lift


def lift_matrix(cam: CameraModel, grid: VoxelSpec, feat_hw: tuple[int, int]):
    """Sparse [G*G, Hf*Wf] bilinear sampling of each ground-level cell center.

    Cell (ix, iy) at (x, y, 0) projects to image pixel (u, v) (integer pixel
    centers); the feature map is sampled at ``(u + 0.5) * Wf / W - 0.5``.
    Cells behind the camera or outside the image get an empty row.
    """
    gx, gy, _ = grid.bins
    hf, wf = feat_hw
    ix, iy = np.meshgrid(np.arange(gx), np.arange(gy), indexing="ij")
    x, y = grid.cell_center(ix.reshape(-1), iy.reshape(-1))
    pts = np.stack([x, y, np.zeros_like(x)], axis=1)
    pc = cam.to_camera(pts)
    z = pc[:, 2]
    front = z > MIN_CAMERA_Z
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    vis = front & (u >= -0.5) & (u <= cam.width - 0.5) & (v >= -0.5) & (v <= cam.height - 0.5)
    uf = np.clip((u + 0.5) * wf / cam.width - 0.5, 0.0, wf - 1)
    vf = np.clip((v + 0.5) * hf / cam.height - 0.5, 0.0, hf - 1)
    x0 = np.floor(uf).astype(np.int64)
    y0 = np.floor(vf).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    ax = uf - x0
    ay = vf - y0
    rows = np.nonzero(vis)[0]
    r4 = np.repeat(rows, 4)
    cols = np.stack([y0 * wf + x0, y0 * wf + x1, y1 * wf + x0, y1 * wf + x1], axis=1)[rows]
    wts = np.stack([(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax], axis=1)[rows]
    m = sp.csr_matrix((wts.reshape(-1), (r4, cols.reshape(-1))), shape=(gx * gy, hf * wf))
    return m, vis


def geometric_lift(img_feats: Tensor, cam: CameraModel, grid: VoxelSpec) -> Tensor:
    c, hf, wf = img_feats.shape
    m, _ = lift_matrix(cam, grid, (hf, wf))
    gx, gy, _ = grid.bins
    return nc.sparse_sample(img_feats, m, (gx, gy))


# --------------------------------------------------------------------------
# detector


class ToyDetector(Module):
    """Backbone -> lift -> BEV encoder -> BEV decoder -> center-heatmap head."""

    def __init__(self, cfg: ModelConfig, cams: list[CameraModel]):
        self.cfg = cfg
        self.cams = list(cams)
        seed = cfg.seed
        chans = cfg.backbone_channels
        self.stages = []
        c_prev = 3
        for s, c in enumerate(chans):
            self.stages.append(Conv3x3(c_prev, c, seed, f"backbone.{s}", stride=2))
            c_prev = c
        c_q = cfg.bev_channels
        self.lift_proj = Conv1x1(chans[-1], c_q, seed, "lift_proj")
        self.query = Tensor(param_rng(seed, "query").normal(0.0, cfg.query_std,
                                                           (c_q, cfg.grid, cfg.grid)),
                            requires_grad=True)
        self.enc = [Conv3x3(c_q, c_q, seed, f"enc.{l}") for l in range(cfg.encoder_layers)]
        self.dec = [Conv3x3(c_q, c_q, seed, f"dec.{l}") for l in range(cfg.decoder_layers)]
        # channel 0: heatmap logit, channels 1-2: log w, log l
        self.head = Conv3x3(c_q, 3, seed, "head")
        self.head.b.data[0] = -math.log((1.0 - cfg.heat_prior) / cfg.heat_prior)
        self.depth_head = (Conv1x1(chans[0], 1, seed, "depth_head")
                           if cfg.depth_aux_weight > 0 else None)
        self.grid_spec = cfg.grid_spec
        self.c_bev = 3
        self.chain = IntegratorChain(cfg.chain, chans, c_q, self.c_bev, cfg.encoder_layers,
                                     cfg.decoder_layers, seed=seed)
        self._camera_only_chain = IntegratorChain(ChainSpec(mode="camera_only"), chans, c_q,
                                                  self.c_bev, cfg.encoder_layers,
                                                  cfg.decoder_layers, seed=seed)
        h, w = cfg.image_hw
        for _ in chans:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        self.feat_hw = (h, w)
        self._lift = self._build_lift()

    def _build_lift(self):
        mats = [lift_matrix(cam, self.grid_spec, self.feat_hw) for cam in self.cams]
        if len(mats) == 1:
            return [mats[0][0]]
        seen = np.sum([vis for _, vis in mats], axis=0).astype(np.float64)
        norm = sp.diags(1.0 / np.maximum(seen, 1.0))
        return [(norm @ m).tocsr() for m, _ in mats]

    # body protocol used by chain_forward
    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_enc(self) -> int:
        return len(self.enc)

    @property
    def n_dec(self) -> int:
        return len(self.dec)

    def stage(self, s: int, x: Tensor) -> Tensor:
        return nc.relu(self.stages[s](x))

    def lift(self, feats: list[Tensor]) -> Tensor:
        g = self.cfg.grid
        out = None
        for f, m in zip(feats, self._lift):
            t = nc.sparse_sample(self.lift_proj(f), m, (g, g))
            out = t if out is None else nc.add(out, t)
        return out

    def encode(self, l: int, q: Tensor, lifted: Tensor) -> Tensor:
        return nc.relu(self.enc[l](nc.add(q, lifted)))

    def decode(self, l: int, q: Tensor) -> Tensor:
        return nc.relu(self.dec[l](q))

    def forward(self, images, depth_maps, bev, camera_only: bool = False) -> Prediction:
        chain = self._camera_only_chain if camera_only else self.chain
        res = chain_forward(chain, self, images, depth_maps, bev)
        depth_pred = None
        if self.depth_head is not None and not camera_only:
            depth_pred = self.depth_head(res.features[0][0])
        out = self.head(res.query)
        return Prediction(nc.slice0(out, 0, 1), nc.slice0(out, 1, 3), depth_pred)

    __call__ = forward


def detect_forward(model: ToyDetector, images, depth_maps, bev, mode: str | None = None):
    """Forward pass; ``mode="camera_only"`` bypasses every LiDAR hook."""
    return model.forward(images, depth_maps, bev, camera_only=(mode == "camera_only"))


def with_mode(cfg: ModelConfig, **chain_changes) -> ModelConfig:
    return replace(cfg, chain=replace(cfg.chain, **chain_changes))


# --------------------------------------------------------------------------
# targets and loss


@dataclass
class Targets:
    heat: np.ndarray  # [1, G, G]
    pos: np.ndarray  # [1, G, G] 1.0 at box-center cells
    size: np.ndarray  # [2, G, G] log w, log l at positive cells

    @property
    def n_pos(self) -> int:
        return int(self.pos.sum())


def build_targets(gt: SceneGT, grid: VoxelSpec) -> Targets:
    gx, gy, _ = grid.bins
    heat = np.zeros((gx, gy))
    pos = np.zeros((gx, gy))
    size = np.zeros((2, gx, gy))
    ii, jj = np.meshgrid(np.arange(gx), np.arange(gy), indexing="ij")
    for cx, cy, w, l, _yaw in gt.boxes:
        ix = int(np.clip(math.floor((cx - grid.x_range[0]) / grid.voxel[0]), 0, gx - 1))
        iy = int(np.clip(math.floor((cy - grid.y_range[0]) / grid.voxel[1]), 0, gy - 1))
        sigma = max(1.0, max(w, l) / 2.0 / grid.voxel[0])
        g = np.exp(-((ii - ix) ** 2 + (jj - iy) ** 2) / (2.0 * sigma * sigma))
        heat = np.maximum(heat, g)
        pos[ix, iy] = 1.0
        size[:, ix, iy] = (math.log(w), math.log(l))
    return Targets(heat[None], pos[None], size)


def detection_loss(pred: Prediction, gt: SceneGT, grid: VoxelSpec,
                   targets: Targets | None = None) -> Tensor:
    """Penalty-reduced focal loss on the heatmap plus L1 on log sizes at centers."""
    t = targets if targets is not None else build_targets(gt, grid)
    x = pred.heat_logits
    p = nc.sigmoid(x)
    ones = Tensor._wrap(np.ones(x.shape))
    neg_w = Tensor._wrap((1.0 - t.heat) ** FOCAL_BETA * (1.0 - t.pos))
    pos_m = Tensor._wrap(t.pos)
    pos_term = nc.sum_(nc.mul(pos_m, nc.mul(nc.square(nc.sub(ones, p)), nc.log_sigmoid(x))))
    neg_term = nc.sum_(nc.mul(neg_w, nc.mul(nc.square(p), nc.log_sigmoid(nc.scale(x, -1.0)))))
    norm = 1.0 / max(1, t.n_pos)
    loss = nc.scale(nc.add(pos_term, neg_term), -norm * HEAT_WEIGHT)
    if t.n_pos:
        m2 = Tensor._wrap(np.broadcast_to(t.pos, t.size.shape).copy())
        l1 = nc.sum_(nc.mul(m2, nc.abs_(nc.sub(pred.sizes, Tensor._wrap(t.size)))))
        loss = nc.add(loss, nc.scale(l1, norm * SIZE_WEIGHT))
    return loss


def depth_aux_loss(pred: Prediction, depth_target: Tensor) -> Tensor:
    """L1 between the stage-1 depth guess and rasterized LiDAR depth where it exists."""
    _, h, w = pred.depth_pred.shape
    tgt = nc.resize_bilinear(depth_target, h, w).data
    mask = (tgt > 0).astype(np.float64)
    n = max(1.0, mask.sum())
    diff = nc.abs_(nc.sub(pred.depth_pred, Tensor._wrap(tgt)))
    return nc.scale(nc.sum_(nc.mul(Tensor._wrap(mask), diff)), 1.0 / n)


# --------------------------------------------------------------------------
# toy average precision


def extract_peaks(heatmap: np.ndarray, grid: VoxelSpec, threshold: float = 0.1) -> np.ndarray:
    """3x3 local maxima above ``threshold`` as rows (x, y, score)."""
    h = np.asarray(heatmap, dtype=np.float64).reshape(grid.bins[0], grid.bins[1])
    local = maximum_filter(h, size=3, mode="constant", cval=-np.inf)
    ix, iy = np.nonzero((h == local) & (h > threshold))
    x, y = grid.cell_center(ix, iy)
    return np.stack([x, y, h[ix, iy]], axis=1) if ix.size else np.zeros((0, 3))


def _centers(g) -> np.ndarray:
    if isinstance(g, SceneGT):
        return g.centers
    a = np.asarray(g, dtype=np.float64)
    return a.reshape(len(a), -1)[:, :2] if a.size else np.zeros((0, 2))


def average_precision(dets_per_scene, gts_per_scene, match_radius: float = 2.0) -> float:
    """Pooled center-distance AP with greedy matching, all-point interpolation.

    ``dets_per_scene``: list of [K, 3] arrays (x, y, score).
    ``gts_per_scene``: list of [N, >=2] arrays of centers.
    """
    if match_radius <= 0:
        raise ConfigError(f"match_radius must be positive, got {match_radius}")
    gts_list = [_centers(g) for g in gts_per_scene]
    dets_list = [np.asarray(d, dtype=np.float64).reshape(-1, 3) for d in dets_per_scene]
    n_gt = sum(len(g) for g in gts_list)
    rows = [(float(d[2]), s, n) for s, dets in enumerate(dets_list) for n, d in enumerate(dets)]
    if n_gt == 0:
        return 1.0 if not rows else 0.0
    if not rows:
        return 0.0
    rows.sort(key=lambda r: -r[0])
    used = [np.zeros(len(g), dtype=bool) for g in gts_list]
    tp = np.zeros(len(rows))
    for k, (_score, s, n) in enumerate(rows):
        gts = gts_list[s]
        if len(gts) == 0:
            continue
        d = dets_list[s][n]
        dist = np.hypot(gts[:, 0] - d[0], gts[:, 1] - d[1])
        dist[used[s]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= match_radius:
            used[s][j] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(rows) + 1)
    recall = ctp / n_gt
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def toy_ap(pred, gt, grid: VoxelSpec | None = None, match_radius: float = 2.0,
           threshold: float = 0.1) -> float:
    """AP for one scene (``pred`` a Prediction or a [K, 3] detection array)."""
    if isinstance(pred, Prediction):
        if grid is None:
            raise ConfigError("toy_ap needs the grid spec to decode a Prediction")
        dets = extract_peaks(pred.heatmap, grid, threshold)
    else:
        dets = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    return average_precision([dets], [gt], match_radius)


# --------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, momentum: float = 0.9,
                 clip_norm: float = 5.0):
        self.params = params
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self._vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()
                             if p.grad is not None))

    def step(self) -> float:
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise nc.NonFiniteError(f"gradient norm is {norm}")
        k = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self._vel[name]
            v *= self.momentum
            v += k * p.grad
            p.data -= self.lr * v
        return norm
