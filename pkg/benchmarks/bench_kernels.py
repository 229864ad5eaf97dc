"""Compare the numba kernels with their numpy fallbacks.

Every kernel is timed on both paths, regardless of QUATFUSE_NUMBA, after a
warm-up call that pays the JIT cost. Results are checked for agreement before
timing. ``--step`` also times one full training step with each backend in a
fresh interpreter, since the flag is read at import time.

    python3 benchmarks/bench_kernels.py --repeat 20 --step
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from quatfuse import _kernels as K


def best_ms(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


def cases(rng, scale):
    n_pts = 40000 * scale
    n_cells = 64 * 64 * 4
    cell = rng.integers(0, n_cells, n_pts)
    z = rng.uniform(-2, 3, n_pts)
    inten = rng.uniform(0, 1, n_pts)
    yield "bev_scatter", (K.bev_scatter_numba, K.bev_scatter_numpy), (cell, z, inten, n_cells)

    h, w = 96, 320
    rows = rng.integers(0, h, n_pts)
    cols = rng.integers(0, w, n_pts)
    depth = rng.uniform(1, 60, n_pts)
    yield "zbuffer", (K.zbuffer_numba, K.zbuffer_numpy), (rows, cols, depth, h, w)

    n_rays = 8000 * scale
    origins = np.tile([0.0, 0.0, 1.8], (n_rays, 1))
    dirs = rng.normal(size=(n_rays, 3))
    dirs[:, 0] = np.abs(dirs[:, 0]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    boxes = np.column_stack([rng.uniform(5, 40, 12), rng.uniform(-10, 10, 12), np.zeros(12),
                             rng.uniform(1.6, 2.0, 12), rng.uniform(3.5, 4.8, 12),
                             rng.uniform(1.4, 1.8, 12), rng.uniform(-np.pi, np.pi, 12)])
    yield "raycast", (K.raycast_numba, K.raycast_numpy), (origins, dirs, boxes, 0.0, True, 80.0)

    c, hh, ww = 32, 32 * scale, 32
    x = rng.normal(size=(c, hh, ww))
    yield "im2col", (K.im2col_numba, K.im2col_numpy), (x, 1, hh, ww)
    cols9 = rng.normal(size=(c * 9, hh * ww))
    yield "col2im", (K.col2im_numba, K.col2im_numpy), (cols9, c, hh, ww, hh, ww, 1)


def agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in zip(a, b))


_STEP_SNIPPET = """
import time
from quatfuse import _kernels
from quatfuse.harness import runner
from quatfuse.harness.config import DESK, RunConfig
from quatfuse.harness.data import load_split
cfg = RunConfig(**DESK, train_scenes=8)
s = load_split(cfg, 'train')
m = runner.build_model(cfg, 0)
from quatfuse.toydet import SGD
opt = SGD(m.parameters(), 1e-2, 0.9, 5.0)
best = 1e9
for i in range(12):
    t0 = time.perf_counter()
    loss = runner.sample_loss(m, s[i % 8]); loss.backward(); opt.step()
    best = min(best, time.perf_counter() - t0)
print(_kernels.BACKEND, 1e3 * best)
"""


def step_times():
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, QUATFUSE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _STEP_SNIPPET], env=env, check=True,
                             capture_output=True, text=True)
        name, ms = res.stdout.split()
        out[name] = float(ms)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--scale", type=int, default=1, help="multiply problem sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", action="store_true", help="also time a full training step")
    args = p.parse_args(argv)
    if K.numba is None:
        print("numba is not installed; nothing to compare")
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':12s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    ok = True
    for name, (fast, slow), inputs in cases(rng, args.scale):
        same = agree(fast(*inputs), slow(*inputs))
        ok &= same
        t_fast = best_ms(fast, inputs, args.repeat)
        t_slow = best_ms(slow, inputs, args.repeat)
        print(f"{name:12s} {t_fast:10.3f} {t_slow:10.3f} {t_slow / t_fast:8.2f}  {same}")
    if args.step:
        t = step_times()
        print(f"{'train step':12s} {t['numba']:10.3f} {t['numpy']:10.3f} "
              f"{t['numpy'] / t['numba']:8.2f}  -")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
