"""LiDAR geometry integrators: depth-aware (image stages) and geometry-aware (BEV layers).

Both block kinds finish with a zero-initialized projection added residually
to the host features, so a freshly attached chain leaves the camera-only
forward pass untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import quat
from .layers import Conv1x1, Module, param_rng, param_seed
from .numcore import ConfigError, ShapeError, Tensor

FUSION_MODES = ("camera_only", "progressive", "input_summation", "deep_summation", "separate")
AXIS_VARIANTS = ("lidar_on_i", "lidar_on_r")
DAE_MIXERS = ("quaternion", "concat", "mlp")


def match_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Edge-pad ``x`` to the target aspect ratio, then resize bilinearly to (h, w)."""
    _, hs, ws = x.shape
    if (hs, ws) == (h, w):
        return x
    # pad the short side so hs/ws == h/w before interpolating
    if hs * w < ws * h:
        need = math.ceil(ws * h / w) - hs
        if need > 0:
            x = nc.pad_edge(x, bottom=need)
    elif hs * w > ws * h:
        need = math.ceil(hs * w / h) - ws
        if need > 0:
            x = nc.pad_edge(x, right=need)
    return nc.resize_bilinear(x, h, w)


def axis_assignment(variant: str):
    """Packing rule (image, lidar) -> (r, i) slices for the quaternion input."""
    if variant == "lidar_on_i":
        return lambda img, lid: (img, lid)
    if variant == "lidar_on_r":
        return lambda img, lid: (lid, img)
    raise ConfigError(f"unknown axis variant {variant!r}; expected one of {AXIS_VARIANTS}")


class DAEBlock(Module):
    """Depth-aware embedding for one backbone stage.

    Image features and the incoming depth state are reduced to ``hidden``
    channels, mixed (Hamilton product by default), and projected back: the
    real output refines the image features, the first imaginary output
    becomes the next depth state.
    """

    def __init__(self, c_img: int, c_depth_in: int, c_depth_out: int, hidden: int = 8,
                 mixer: str = "quaternion", axis: str = "lidar_on_i", seed: int = 0,
                 name: str = "dae", activation: str = "relu"):
        if mixer not in DAE_MIXERS:
            raise ConfigError(f"unknown DAE mixer {mixer!r}; expected one of {DAE_MIXERS}")
        self.c_img, self.c_depth_in, self.c_depth_out = c_img, c_depth_in, c_depth_out
        self.hidden = hidden
        self.mixer = mixer
        self.axis = axis
        self._pack = axis_assignment(axis)
        self.activation = activation
        self.g1 = Conv1x1(c_img, hidden, seed, f"{name}.g1")
        self.g2 = Conv1x1(c_depth_in, hidden, seed, f"{name}.g2")
        if mixer == "quaternion":
            self.qua_fa = quat.suprasphere_init(hidden, hidden, param_seed(seed, f"{name}.qua_fa"))
            self.mix = None
        else:
            width = 2 * hidden if mixer == "concat" else 4 * hidden
            self.qua_fa = None
            self.mix = Conv1x1(width, width, seed, f"{name}.mix")
        self.up_img = Conv1x1(hidden, c_img, seed, f"{name}.up_img", zero=True)
        self.up_depth = Conv1x1(hidden, c_depth_out, seed, f"{name}.up_depth", zero=True)

    def mixing_weight_count(self) -> int:
        if self.qua_fa is not None:
            return self.qua_fa.weight_count()
        return self.mix.w.data.size

    def mixed(self, f_img: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Reduced, mixed and activated (real, first imaginary) outputs."""
        if f_img.shape[0] != self.c_img or c_prev.shape[0] != self.c_depth_in:
            raise ShapeError(
                f"DAE block expects {self.c_img} image / {self.c_depth_in} depth channels, "
                f"got {f_img.shape[0]} / {c_prev.shape[0]}")
        _, h, w = f_img.shape
        c_t = match_spatial(c_prev, h, w)
        f_hat = self.g1(f_img)
        c_hat = self.g2(c_t)
        r, i = self._pack(f_hat, c_hat)
        hd = self.hidden
        if self.mixer == "quaternion":
            zero = Tensor._wrap(np.zeros((hd, h, w)))
            q = quat.QuaternionTensor.from_components(r, i, zero, zero)
            out = quat.split_activation(quat.qlinear_forward(self.qua_fa, q), self.activation)
            return out.r, out.i
        if self.mixer == "concat":
            o = nc.relu(self.mix(nc.concat([r, i], axis=0)))
            o = nc.reshape(o, (2, hd, h, w))
        else:
            zero = Tensor._wrap(np.zeros((2 * hd, h, w)))
            o = nc.relu(self.mix(nc.concat([r, i, zero], axis=0)))
            o = nc.reshape(o, (4, hd, h, w))
        return nc.take0(o, 0), nc.take0(o, 1)

    def __call__(self, f_img: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        out_r, out_i = self.mixed(f_img, c_prev)
        return nc.add(f_img, self.up_img(out_r)), self.up_depth(out_i)


def dae_forward(block: DAEBlock, f_img: Tensor, c_depth_prev: Tensor):
    return block(f_img, c_depth_prev)


class GAEBlock(Module):
    """Geometry-aware embedding: concat, reduce, channel gate, residual refine."""

    def __init__(self, c_q: int, c_geo_in: int, hidden: int = 128, quaternion: bool = False,
                 seed: int = 0, name: str = "gae"):
        self.c_q, self.c_geo_in, self.hidden = c_q, c_geo_in, hidden
        self.quaternion = quaternion
        if quaternion:
            self.gq = Conv1x1(c_q, hidden, seed, f"{name}.gq")
            self.gc = Conv1x1(c_geo_in, hidden, seed, f"{name}.gc")
            self.qmix = quat.suprasphere_init(hidden, hidden, param_seed(seed, f"{name}.qmix"))
            self.proj = None
        else:
            self.proj = Conv1x1(c_q + c_geo_in, hidden, seed, f"{name}.proj")
        wt = param_rng(seed, f"{name}.w_t").normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden))
        self.w_t = Tensor(wt, requires_grad=True)
        self.up = Conv1x1(hidden, c_q, seed, f"{name}.up", zero=True)

    def align(self, q_bev: Tensor, c_prev: Tensor) -> Tensor:
        if q_bev.shape[1:] != c_prev.shape[1:]:
            raise ShapeError(f"GAE: spatial mismatch {q_bev.shape} vs {c_prev.shape}")
        if q_bev.shape[0] != self.c_q or c_prev.shape[0] != self.c_geo_in:
            raise ShapeError(
                f"GAE block expects {self.c_q} query / {self.c_geo_in} geometry channels, "
                f"got {q_bev.shape[0]} / {c_prev.shape[0]}")
        if not self.quaternion:
            return nc.relu(self.proj(nc.concat([q_bev, c_prev], axis=0)))
        _, h, w = q_bev.shape
        zero = Tensor._wrap(np.zeros((self.hidden, h, w)))
        packed = quat.QuaternionTensor.from_components(self.gq(q_bev), self.gc(c_prev), zero, zero)
        return quat.split_activation(quat.qlinear_forward(self.qmix, packed), "relu").r

    def gate(self, f_align: Tensor) -> Tensor:
        return nc.sigmoid(nc.matvec(self.w_t, nc.global_avg_pool(f_align)))

    def __call__(self, q_bev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        f_align = self.align(q_bev, c_prev)
        c_geo = nc.channel_scale(f_align, self.gate(f_align))
        return nc.add(q_bev, self.up(c_geo)), c_geo


def gae_forward(block: GAEBlock, q_bev: Tensor, c_geo_prev: Tensor):
    return block(q_bev, c_geo_prev)


def parse_qua_fa(spec: str, n_stages: int) -> list[bool]:
    """Which DAE stages use the quaternion mixer: off | first_layer | depth:k | all."""
    s = str(spec).strip().lower()
    if s in ("off", "none", "0"):
        return [False] * n_stages
    if s in ("first_layer", "first"):
        return [n == 0 for n in range(n_stages)]
    if s == "all":
        return [True] * n_stages
    if s.startswith("depth"):
        k = int(s.split(":", 1)[1] if ":" in s else s[len("depth"):].strip())
        if not 1 <= k <= n_stages:
            raise ConfigError(f"qua_fa depth must be in 1..{n_stages}, got {k}")
        return [n == k - 1 for n in range(n_stages)]
    raise ConfigError(f"unknown qua_fa setting {spec!r}")


@dataclass
class ChainSpec:
    mode: str = "progressive"
    dae: bool = True
    gae_enc: bool = True
    gae_dec: bool = True
    qua_fa: str = "first_layer"
    plain_mixer: str = "concat"
    axis: str = "lidar_on_i"
    dae_hidden: int = 8
    gae_hidden: int = 128
    depth_state_channels: int = 8
    gae_quaternion: bool = False

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")
        axis_assignment(self.axis)


@dataclass
class ChainResult:
    features: list[list[Tensor]]
    query: Tensor
    depth_states: list[list[Tensor]] = field(default_factory=list)
    geo_states: list[Tensor] = field(default_factory=list)


class IntegratorChain(Module):
    """Per-stage DAE blocks and per-layer GAE blocks wired by fusion mode."""

    def __init__(self, spec: ChainSpec, stage_channels, c_q: int, c_bev: int, n_enc: int,
                 n_dec: int, image_channels: int = 3, seed: int = 0):
        self.spec = spec
        self.mode = spec.mode
        n_stages = len(stage_channels)
        self.dae_blocks: list = [None] * n_stages
        self.gae_enc_blocks: list = [None] * n_enc
        self.gae_dec_blocks: list = [None] * n_dec
        self.bev_embed = None
        self.embed_img = None
        self.embed_bev = None
        mode = spec.mode
        if mode in ("progressive", "separate"):
            use_q = parse_qua_fa(spec.qua_fa, n_stages)
            first = True
            if spec.dae:
                for s, c in enumerate(stage_channels):
                    c_in = 1 if (first or mode == "separate") else spec.depth_state_channels
                    self.dae_blocks[s] = DAEBlock(
                        c, c_in, spec.depth_state_channels, spec.dae_hidden,
                        mixer="quaternion" if use_q[s] else spec.plain_mixer,
                        axis=spec.axis, seed=seed, name=f"dae{s}")
                    first = False
            first = True
            for kind, blocks, on in (("enc", self.gae_enc_blocks, spec.gae_enc),
                                     ("dec", self.gae_dec_blocks, spec.gae_dec)):
                if not on:
                    continue
                for n in range(len(blocks)):
                    c_in = c_q if (first or mode == "separate") else spec.gae_hidden
                    blocks[n] = GAEBlock(c_q, c_in, spec.gae_hidden, spec.gae_quaternion,
                                         seed=seed, name=f"gae_{kind}{n}")
                    first = False
            if spec.gae_enc or spec.gae_dec:
                self.bev_embed = Conv1x1(c_bev, c_q, seed, "bev_embed")
        elif mode == "input_summation":
            self.embed_img = Conv1x1(1, image_channels, seed, "embed_img", zero=True)
            self.embed_bev = Conv1x1(c_bev, c_q, seed, "embed_bev", zero=True)
        elif mode == "deep_summation":
            self.embed_img = Conv1x1(1, stage_channels[-1], seed, "embed_img", zero=True)
            self.embed_bev = Conv1x1(c_bev, c_q, seed, "embed_bev", zero=True)

    def blocks(self):
        for b in self.dae_blocks + self.gae_enc_blocks + self.gae_dec_blocks:
            if b is not None:
                yield b

    def manifest(self) -> list[dict]:
        rows = []
        for kind, blocks in (("dae", self.dae_blocks), ("gae_enc", self.gae_enc_blocks),
                             ("gae_dec", self.gae_dec_blocks)):
            for s, b in enumerate(blocks):
                if b is None:
                    continue
                row = {"kind": kind, "stage": s, "hidden": b.hidden}
                if kind == "dae":
                    row["mixer"] = b.mixer
                    row["axis"] = b.axis
                rows.append(row)
        return rows


def chain_forward(chain: IntegratorChain, body, images, m_depth, m_bev) -> ChainResult:
    """Run the detector body with the chain's hooks attached.

    ``body`` supplies ``stage(s, x)``, ``lift(features)``, ``encode(l, q, lifted)``,
    ``decode(l, q)``, ``query`` and the layer counts ``n_stages``, ``n_enc``,
    ``n_dec``. ``images`` and ``m_depth`` are per-camera lists.
    """
    mode = chain.mode
    if len(images) != len(m_depth):
        raise ConfigError(f"{len(images)} images but {len(m_depth)} depth maps")
    all_feats, depth_states, finals = [], [], []
    for img, md in zip(images, m_depth):
        x = img
        if mode == "input_summation":
            _, h, w = img.shape
            x = nc.add(x, chain.embed_img(match_spatial(md, h, w)))
        c = md
        feats, states = [], []
        for s in range(body.n_stages):
            x = body.stage(s, x)
            blk = chain.dae_blocks[s]
            if blk is not None:
                x, c_new = blk(x, c if mode == "progressive" else md)
                states.append(c_new)
                if mode == "progressive":
                    c = c_new
            if mode == "deep_summation" and s == body.n_stages - 1:
                _, h, w = x.shape
                x = nc.add(x, chain.embed_img(match_spatial(md, h, w)))
            feats.append(x)
        all_feats.append(feats)
        depth_states.append(states)
        finals.append(x)

    lifted = body.lift(finals)
    q = body.query
    if mode == "input_summation":
        q = nc.add(q, chain.embed_bev(m_bev))
    geo0 = chain.bev_embed(m_bev) if chain.bev_embed is not None else None
    g = geo0
    geo_states = []
    for l in range(body.n_enc):
        q = body.encode(l, q, lifted)
        blk = chain.gae_enc_blocks[l]
        if blk is not None:
            q, g_new = blk(q, g if mode == "progressive" else geo0)
            geo_states.append(g_new)
            if mode == "progressive":
                g = g_new
    for l in range(body.n_dec):
        q = body.decode(l, q)
        blk = chain.gae_dec_blocks[l]
        if blk is not None:
            q, g_new = blk(q, g if mode == "progressive" else geo0)
            geo_states.append(g_new)
            if mode == "progressive":
                g = g_new
    if mode == "deep_summation":
        q = nc.add(q, chain.embed_bev(m_bev))
    return ChainResult(all_feats, q, depth_states, geo_states)
