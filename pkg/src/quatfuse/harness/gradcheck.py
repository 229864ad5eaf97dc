"""Finite-difference audit of every differentiable op, block and the full loss."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .. import fusion, quat, toydet
from .. import numcore as nc
from ..numcore import Tensor

ELEMENTWISE_TOL = 1e-7
BLOCK_TOL = 1e-5
LOSS_TOL = 1e-4
TRIALS = 5
FULL_LOSS_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    kind: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.threshold)


@dataclass
class GradcheckReport:
    seed: int
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            flag = "ok  " if r.passed else "FAIL"
            out.append(f"{flag} {r.kind:11s} {r.name:24s} max_rel_err={r.max_rel_err:.3e} "
                       f"(< {r.threshold:.0e})")
        return out


def _proj(rng, shape):
    """Fixed random weights so the scalar test function sees every output element."""
    return Tensor._wrap(rng.normal(size=shape))


def _dot(y: Tensor, r: Tensor) -> Tensor:
    return nc.sum_(nc.mul(y, r))


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap + v, v)


def _unary(op_name, shape=(2, 3, 4), sample=None):
    def run(rng):
        x = Tensor(sample(rng, shape) if sample else rng.normal(size=shape))
        r = _proj(rng, shape)
        return nc.finite_diff_check(lambda t: _dot(getattr(nc, op_name)(t), r), x)
    return run


def _binary(op_name, shape=(2, 3, 4)):
    def run(rng):
        a = Tensor(rng.normal(size=shape))
        b = Tensor(rng.normal(size=shape))
        r = _proj(rng, shape)
        op = getattr(nc, op_name)
        ea = nc.finite_diff_check(lambda t: _dot(op(t, b), r), a)
        eb = nc.finite_diff_check(lambda t: _dot(op(a, t), r), b)
        return max(ea, eb)
    return run


def _scale(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (3, 4))
    return nc.finite_diff_check(lambda t: _dot(nc.scale(t, -1.7), r), x)


def _concat(rng):
    a = Tensor(rng.normal(size=(2, 3, 3)))
    b = Tensor(rng.normal(size=(3, 3, 3)))
    r = _proj(rng, (5, 3, 3))
    ea = nc.finite_diff_check(lambda t: _dot(nc.concat([t, b], 0), r), a)
    eb = nc.finite_diff_check(lambda t: _dot(nc.concat([a, t], 0), r), b)
    return max(ea, eb)


def _reductions(name):
    def run(rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        return nc.finite_diff_check(lambda t: nc.scale(getattr(nc, name)(t), 1.3), x)
    return run


def _shape_ops(rng):
    x = Tensor(rng.normal(size=(4, 2, 3)))
    errs = []
    r1 = _proj(rng, (8, 3))
    errs.append(nc.finite_diff_check(lambda t: _dot(nc.reshape(t, (8, 3)), r1), x))
    r2 = _proj(rng, (2, 3))
    errs.append(nc.finite_diff_check(lambda t: _dot(nc.take0(t, 2), r2), x))
    r3 = _proj(rng, (2, 2, 3))
    errs.append(nc.finite_diff_check(lambda t: _dot(nc.slice0(t, 1, 3), r3), x))
    r4 = _proj(rng, (2, 4, 2, 3))
    errs.append(nc.finite_diff_check(lambda t: _dot(nc.stack0([t, nc.scale(t, 2.0)]), r4), x))
    return max(errs)


def _conv1x1(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)))
    w = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=2))
    r = _proj(rng, (2, 4, 5))
    return max(nc.finite_diff_check(lambda t: _dot(nc.conv1x1(t, w, b), r), x),
               nc.finite_diff_check(lambda t: _dot(nc.conv1x1(x, t, b), r), w),
               nc.finite_diff_check(lambda t: _dot(nc.conv1x1(x, w, t), r), b))


def _conv3x3(stride):
    def run(rng):
        x = Tensor(rng.normal(size=(2, 5, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        ho, wo = (5 - 1) // stride + 1, (6 - 1) // stride + 1
        r = _proj(rng, (3, ho, wo))
        return max(
            nc.finite_diff_check(lambda t: _dot(nc.conv3x3(t, w, b, stride), r), x),
            nc.finite_diff_check(lambda t: _dot(nc.conv3x3(x, t, b, stride), r), w),
            nc.finite_diff_check(lambda t: _dot(nc.conv3x3(x, w, t, stride), r), b))
    return run


def _matvec(rng):
    w = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=4))
    r = _proj(rng, (3,))
    return max(nc.finite_diff_check(lambda t: _dot(nc.matvec(t, v), r), w),
               nc.finite_diff_check(lambda t: _dot(nc.matvec(w, t), r), v))


def _channel_scale(rng):
    x = Tensor(rng.normal(size=(3, 2, 4)))
    g = Tensor(rng.normal(size=3))
    r = _proj(rng, (3, 2, 4))
    return max(nc.finite_diff_check(lambda t: _dot(nc.channel_scale(t, g), r), x),
               nc.finite_diff_check(lambda t: _dot(nc.channel_scale(x, t), r), g))


def _gap(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)))
    r = _proj(rng, (3,))
    return nc.finite_diff_check(lambda t: _dot(nc.global_avg_pool(t), r), x)


def _resize(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)))
    r1 = _proj(rng, (2, 7, 4))
    r2 = _proj(rng, (2, 2, 9))
    return max(nc.finite_diff_check(lambda t: _dot(nc.resize_bilinear(t, 7, 4), r1), x),
               nc.finite_diff_check(lambda t: _dot(nc.resize_bilinear(t, 2, 9), r2), x))


def _pad_edge(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    r = _proj(rng, (2, 3 + 1 + 2, 4 + 3 + 1))
    return nc.finite_diff_check(lambda t: _dot(nc.pad_edge(t, 1, 2, 3, 1), r), x)


def _sparse_sample(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    m = sp.random(6, 12, density=0.4, random_state=int(rng.integers(1 << 31)), format="csr")
    r = _proj(rng, (2, 2, 3))
    return nc.finite_diff_check(lambda t: _dot(nc.sparse_sample(t, m, (2, 3)), r), x)


def _hamilton_block(rng):
    ws = [Tensor(rng.normal(size=(3, 2))) for _ in range(4)]
    r = _proj(rng, (12, 8))
    errs = []
    for k in range(4):
        def f(t, k=k):
            args = list(ws)
            args[k] = t
            return _dot(quat.hamilton_block(*args), r)
        errs.append(nc.finite_diff_check(f, ws[k]))
    return max(errs)


# --------------------------------------------------------------------------
# blocks


@contextlib.contextmanager
def _swapped(owner, path: str, value: Tensor):
    """Temporarily replace the parameter at dotted ``path`` under ``owner``."""
    *parents, leaf = path.split(".")
    obj = owner
    for p in parents:
        obj = obj[int(p)] if isinstance(obj, list) else getattr(obj, p)
    old = getattr(obj, leaf)
    setattr(obj, leaf, value)
    try:
        yield
    finally:
        setattr(obj, leaf, old)


def _param_check(owner, path: str, f, rng, n_idx: int = 12, h: float = 1e-5) -> float:
    p = owner.parameters()[path]
    idx = rng.choice(p.data.size, size=min(n_idx, p.data.size), replace=False)

    def g(t):
        with _swapped(owner, path, t):
            return f()
    return nc.finite_diff_check(g, p, h=h, indices=idx)


def _randomize(module, rng, scale=0.3):
    """Give zero-initialized projections random values so their gradients flow."""
    for t in module.parameters().values():
        if not t.data.any():
            t.data[...] = rng.normal(0.0, scale, t.shape)


def _qlinear(rng):
    layer = quat.suprasphere_init(3, 2, seed=int(rng.integers(1 << 31)))
    layer.bias.data[...] = rng.normal(size=layer.bias.shape)
    x = Tensor(rng.normal(size=(4, 3, 2, 3)))
    r = _proj(rng, (4, 2, 2, 3))

    def f_x(t):
        return _dot(quat.split_activation(layer(quat.QuaternionTensor(t)), "sigmoid").inner, r)
    errs = [nc.finite_diff_check(f_x, x)]
    for name in ("wr", "wi", "wj", "wk", "bias"):
        errs.append(_param_check(layer, name, lambda: f_x(x), rng))
    return max(errs)


def _dae(mixer):
    def run(rng):
        blk = fusion.DAEBlock(4, 1, 2, hidden=2, mixer=mixer, seed=int(rng.integers(1 << 31)),
                              name="gc_dae")
        _randomize(blk, rng)
        f_img = Tensor(rng.normal(size=(4, 5, 6)))
        depth = Tensor(np.abs(rng.normal(size=(1, 9, 13))))
        r1 = _proj(rng, (4, 5, 6))
        r2 = _proj(rng, (2, 5, 6))

        def out(fi, dp):
            a, b = blk(fi, dp)
            return nc.add(_dot(a, r1), _dot(b, r2))
        errs = [nc.finite_diff_check(lambda t: out(t, depth), f_img),
                nc.finite_diff_check(lambda t: out(f_img, t), depth)]
        for name in blk.parameters():
            errs.append(_param_check(blk, name, lambda: out(f_img, depth), rng, 6))
        return max(errs)
    return run


def _gae(quaternion):
    def run(rng):
        blk = fusion.GAEBlock(4, 3, hidden=4, quaternion=quaternion,
                              seed=int(rng.integers(1 << 31)), name="gc_gae")
        _randomize(blk, rng)
        q = Tensor(rng.normal(size=(4, 5, 5)))
        c = Tensor(rng.normal(size=(3, 5, 5)))
        r1 = _proj(rng, (4, 5, 5))
        r2 = _proj(rng, (4, 5, 5))

        def out(qq, cc):
            a, b = blk(qq, cc)
            return nc.add(_dot(a, r1), _dot(b, r2))
        errs = [nc.finite_diff_check(lambda t: out(t, c), q),
                nc.finite_diff_check(lambda t: out(q, t), c)]
        for name in blk.parameters():
            errs.append(_param_check(blk, name, lambda: out(q, c), rng, 6))
        return max(errs)
    return run


def _small_model(rng, mode="progressive"):
    from ..fusion import ChainSpec
    from ..lidarproj import CameraModel

    cfg = toydet.ModelConfig(image_hw=(16, 32), backbone_channels=(4, 4, 4), bev_channels=4,
                             grid=8, x_range=(0.0, 25.6), y_range=(-12.8, 12.8),
                             encoder_layers=1, decoder_layers=1,
                             chain=ChainSpec(mode=mode, dae_hidden=2, gae_hidden=4,
                                             depth_state_channels=2),
                             seed=int(rng.integers(1 << 31)))
    cam = CameraModel.forward_facing(width=32, height=16, fx=16.0, height_m=1.6,
                                              pitch=0.12)
    model = toydet.ToyDetector(cfg, [cam])
    _randomize(model, rng, 0.2)
    img = Tensor(rng.uniform(-1, 1, (3, 16, 32)))
    depth = Tensor(np.where(rng.uniform(size=(1, 16, 32)) < 0.3,
                            rng.uniform(0.1, 1.0, (1, 16, 32)), 0.0))
    bev = Tensor(np.abs(rng.normal(size=(3, 8, 8))))
    gt = toydet.SceneGT(np.array([[8.0, 1.0, 1.8, 4.2, 0.3], [15.0, -4.0, 2.0, 4.0, 1.0]]))
    return model, img, depth, bev, gt


def _head(rng):
    model, _, _, _, gt = _small_model(rng)
    q = Tensor(np.maximum(rng.normal(size=(4, 8, 8)), 0.0))

    def loss():
        out = model.head(q)
        pred = toydet.Prediction(nc.slice0(out, 0, 1), nc.slice0(out, 1, 3))
        return toydet.detection_loss(pred, gt, model.grid_spec)
    return max(_param_check(model, "head.w", loss, rng),
               _param_check(model, "head.b", loss, rng))


def _full_loss(rng):
    model, img, depth, bev, gt = _small_model(rng)

    def loss():
        pred = model([img], [depth], bev)
        return toydet.detection_loss(pred, gt, model.grid_spec)
    names = sorted(model.parameters())
    picks = rng.choice(len(names), size=6, replace=False)
    # a whole network has relu kinks everywhere; the narrower stencil keeps
    # central differences from straddling one
    return max(_param_check(model, names[k], loss, rng, 4, h=FULL_LOSS_STEP) for k in picks)


def registry() -> list[tuple[str, str, float, object]]:
    """(name, kind, threshold, check) for every audited item."""
    ew = ELEMENTWISE_TOL
    items = [
        ("add", "elementwise", ew, _binary("add")),
        ("sub", "elementwise", ew, _binary("sub")),
        ("mul", "elementwise", ew, _binary("mul")),
        ("scale", "elementwise", ew, _scale),
        ("relu", "elementwise", ew, _unary("relu", sample=_away_from_zero)),
        ("sigmoid", "elementwise", ew, _unary("sigmoid")),
        ("log_sigmoid", "elementwise", ew, _unary("log_sigmoid")),
        ("square", "elementwise", ew, _unary("square")),
        ("abs", "elementwise", ew, _unary("abs_", sample=_away_from_zero)),
        ("log1p", "elementwise", ew,
         _unary("log1p", sample=lambda r, s: r.uniform(0.0, 3.0, s))),
        ("concat", "elementwise", ew, _concat),
        ("sum", "op", BLOCK_TOL, _reductions("sum_")),
        ("mean", "op", BLOCK_TOL, _reductions("mean")),
        ("reshape/take/slice/stack", "op", BLOCK_TOL, _shape_ops),
        ("conv1x1", "op", BLOCK_TOL, _conv1x1),
        ("conv3x3", "op", BLOCK_TOL, _conv3x3(1)),
        ("conv3x3_stride2", "op", BLOCK_TOL, _conv3x3(2)),
        ("matvec", "op", BLOCK_TOL, _matvec),
        ("channel_scale", "op", BLOCK_TOL, _channel_scale),
        ("global_avg_pool", "op", BLOCK_TOL, _gap),
        ("resize_bilinear", "op", BLOCK_TOL, _resize),
        ("pad_edge", "op", BLOCK_TOL, _pad_edge),
        ("sparse_sample", "op", BLOCK_TOL, _sparse_sample),
        ("hamilton_block", "op", BLOCK_TOL, _hamilton_block),
        ("qlinear", "block", BLOCK_TOL, _qlinear),
        ("dae_quaternion", "block", BLOCK_TOL, _dae("quaternion")),
        ("dae_concat", "block", BLOCK_TOL, _dae("concat")),
        ("dae_mlp", "block", BLOCK_TOL, _dae("mlp")),
        ("gae", "block", BLOCK_TOL, _gae(False)),
        ("gae_quaternion", "block", BLOCK_TOL, _gae(True)),
        ("head", "block", BLOCK_TOL, _head),
        ("full_loss", "loss", LOSS_TOL, _full_loss),
    ]
    return items


def gradcheck_all(seed: int = 0, trials: int = TRIALS, only=None) -> GradcheckReport:
    """Worst relative error over ``trials`` seeded draws for each registered item."""
    results = []
    for n, (name, kind, tol, check) in enumerate(registry()):
        if only is not None and name not in only:
            continue
        worst = 0.0
        for k in range(trials):
            rng = np.random.default_rng([seed, n, k])
            try:
                err = float(check(rng))
            except nc.NonFiniteError:
                err = float("inf")
            worst = err if not np.isfinite(err) else max(worst, err)
            if not np.isfinite(worst):
                break
        results.append(CheckResult(name, kind, worst, tol))
    return GradcheckReport(seed, results)
