"""Hot scatter/ray loops, compiled with numba when available.

Each kernel has two implementations with identical results: a plain loop
that numba compiles, and a vectorized numpy fallback. Set
``QUATFUSE_NUMBA=0`` in the environment to force the numpy path.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("QUATFUSE_NUMBA", "1").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# BEV scatter: per-cell count, max z, intensity sum


def _bev_scatter_loop(cell, z, inten, n_cells):
    count = np.zeros(n_cells, dtype=np.float64)
    maxz = np.full(n_cells, -np.inf)
    isum = np.zeros(n_cells, dtype=np.float64)
    for n in range(cell.shape[0]):
        c = cell[n]
        count[c] += 1.0
        isum[c] += inten[n]
        if z[n] > maxz[c]:
            maxz[c] = z[n]
    for c in range(n_cells):
        if count[c] == 0.0:
            maxz[c] = 0.0
    return count, maxz, isum


def bev_scatter_numpy(cell, z, inten, n_cells):
    count = np.bincount(cell, minlength=n_cells).astype(np.float64)
    isum = np.bincount(cell, weights=inten, minlength=n_cells).astype(np.float64)
    maxz = np.full(n_cells, -np.inf)
    np.maximum.at(maxz, cell, z)
    maxz[count == 0] = 0.0
    return count, maxz, isum


bev_scatter_numba = _jit(_bev_scatter_loop)


# --------------------------------------------------------------------------
# depth z-buffer: keep the minimum depth per pixel, 0 where nothing landed


def _zbuffer_loop(rows, cols, depth, h, w):
    out = np.full((h, w), np.inf)
    for n in range(rows.shape[0]):
        r = rows[n]
        c = cols[n]
        if depth[n] < out[r, c]:
            out[r, c] = depth[n]
    for r in range(h):
        for c in range(w):
            if out[r, c] == np.inf:
                out[r, c] = 0.0
    return out


def zbuffer_numpy(rows, cols, depth, h, w):
    out = np.full(h * w, np.inf)
    np.minimum.at(out, rows * w + cols, depth)
    out[np.isinf(out)] = 0.0
    return out.reshape(h, w)


zbuffer_numba = _jit(_zbuffer_loop)


# --------------------------------------------------------------------------
# ray casting against yaw-rotated boxes standing on z=z0 plus a ground plane
#
# boxes: [B, 7] = (cx, cy, z0, w, l, h, yaw); l runs along the heading.
# Returns (t, hit) with t=inf / hit=-1 for no return, hit=-2 for ground.


def _slab_loop(o, d, box):
    cx, cy, z0, w, l, h, yaw = box[0], box[1], box[2], box[3], box[4], box[5], box[6]
    c = np.cos(yaw)
    s = np.sin(yaw)
    px = o[0] - cx
    py = o[1] - cy
    lo = np.empty(3)
    ld = np.empty(3)
    lo[0] = c * px + s * py
    lo[1] = -s * px + c * py
    lo[2] = o[2]
    ld[0] = c * d[0] + s * d[1]
    ld[1] = -s * d[0] + c * d[1]
    ld[2] = d[2]
    lower = np.empty(3)
    upper = np.empty(3)
    lower[0] = -0.5 * l
    upper[0] = 0.5 * l
    lower[1] = -0.5 * w
    upper[1] = 0.5 * w
    lower[2] = z0
    upper[2] = z0 + h
    tnear = -np.inf
    tfar = np.inf
    for a in range(3):
        if ld[a] == 0.0:
            if lo[a] < lower[a] or lo[a] > upper[a]:
                return np.inf
        else:
            t1 = (lower[a] - lo[a]) / ld[a]
            t2 = (upper[a] - lo[a]) / ld[a]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tnear:
                tnear = t1
            if t2 < tfar:
                tfar = t2
    if tnear > tfar or tfar < 0.0:
        return np.inf
    if tnear >= 0.0:
        return tnear
    return tfar


slab_numba = _jit(_slab_loop)


def _raycast_loop(origins, dirs, boxes, ground_z, use_ground, max_range):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        best = np.inf
        best_id = -1
        for b in range(boxes.shape[0]):
            t = _slab_kernel(origins[r], dirs[r], boxes[b])
            if t < best:
                best = t
                best_id = b
        if use_ground and dirs[r, 2] < 0.0:
            tg = (ground_z - origins[r, 2]) / dirs[r, 2]
            if tg >= 0.0 and tg < best:
                best = tg
                best_id = -2
        if best <= max_range:
            t_out[r] = best
            hit[r] = best_id
    return t_out, hit


def slab_numpy(origins, dirs, boxes):
    """Vectorized slab test; returns hit distances [R, B] (inf for miss)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    boxes = np.atleast_2d(boxes)
    c = np.cos(boxes[:, 6])[None, :]
    s = np.sin(boxes[:, 6])[None, :]
    px = origins[:, 0:1] - boxes[None, :, 0]
    py = origins[:, 1:2] - boxes[None, :, 1]
    lo = np.stack([c * px + s * py, -s * px + c * py,
                   np.broadcast_to(origins[:, 2:3], px.shape)], axis=-1)
    dx = dirs[:, 0:1]
    dy = dirs[:, 1:2]
    ld = np.stack([c * dx + s * dy, -s * dx + c * dy,
                   np.broadcast_to(dirs[:, 2:3], px.shape)], axis=-1)
    lower = np.stack([-0.5 * boxes[:, 4], -0.5 * boxes[:, 3], boxes[:, 2]], axis=-1)[None]
    upper = np.stack([0.5 * boxes[:, 4], 0.5 * boxes[:, 3], boxes[:, 2] + boxes[:, 5]],
                     axis=-1)[None]
    parallel = ld == 0.0
    safe = np.where(parallel, 1.0, ld)
    t1 = (lower - lo) / safe
    t2 = (upper - lo) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    outside = parallel & ((lo < lower) | (lo > upper))
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    tnear = tmin.max(axis=-1)
    tfar = tmax.min(axis=-1)
    miss = outside.any(axis=-1) | (tnear > tfar) | (tfar < 0.0)
    t = np.where(tnear >= 0.0, tnear, tfar)
    return np.where(miss, np.inf, t)


def raycast_numpy(origins, dirs, boxes, ground_z, use_ground, max_range):
    n = origins.shape[0]
    if boxes.shape[0]:
        tb = slab_numpy(origins, dirs, boxes)
        best_id = np.argmin(tb, axis=1)
        best = tb[np.arange(n), best_id]
        best_id = np.where(np.isinf(best), -1, best_id).astype(np.int64)
    else:
        best = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
    if use_ground:
        down = dirs[:, 2] < 0.0
        tg = np.full(n, np.inf)
        tg[down] = (ground_z - origins[down, 2]) / dirs[down, 2]
        take = (tg >= 0.0) & (tg < best)
        best = np.where(take, tg, best)
        best_id = np.where(take, -2, best_id)
    keep = best <= max_range
    return np.where(keep, best, np.inf), np.where(keep, best_id, -1).astype(np.int64)


if numba is not None:
    _slab_kernel = slab_numba
    raycast_numba = _jit(_raycast_loop)
else:  # pragma: no cover
    _slab_kernel = _slab_loop
    raycast_numba = _raycast_loop


# --------------------------------------------------------------------------
# 3x3 patch gather/scatter for convolution (zero padding 1)


def _im2col_loop(x, stride, ho, wo):
    c, h, w = x.shape
    out = np.zeros((c, 3, 3, ho, wo))
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                for oy in range(ho):
                    iy = oy * stride + ky - 1
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + kx - 1
                        if ix >= 0 and ix < w:
                            out[ci, ky, kx, oy, ox] = x[ci, iy, ix]
    return out.reshape(c * 9, ho * wo)


def _col2im_loop(cols, c, h, w, ho, wo, stride):
    cc = cols.reshape(c, 3, 3, ho, wo)
    out = np.zeros((c, h, w))
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                for oy in range(ho):
                    iy = oy * stride + ky - 1
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + kx - 1
                        if ix >= 0 and ix < w:
                            out[ci, iy, ix] += cc[ci, ky, kx, oy, ox]
    return out


im2col_numba = _jit(_im2col_loop)
col2im_numba = _jit(_col2im_loop)


def im2col_numpy(x, stride, ho, wo):
    """Patch matrix [C*9, Ho*Wo]; rows ordered (channel, ky, kx)."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.empty((c, 3, 3, ho, wo))
    for ky in range(3):
        for kx in range(3):
            out[:, ky, kx] = xp[:, ky:ky + stride * (ho - 1) + 1:stride,
                                kx:kx + stride * (wo - 1) + 1:stride]
    return out.reshape(c * 9, ho * wo)


def col2im_numpy(cols, c, h, w, ho, wo, stride):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to [C,H,W]."""
    cc = cols.reshape(c, 3, 3, ho, wo)
    xp = np.zeros((c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            xp[:, ky:ky + stride * (ho - 1) + 1:stride,
               kx:kx + stride * (wo - 1) + 1:stride] += cc[:, ky, kx]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1])


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    bev_scatter = bev_scatter_numba
    zbuffer = zbuffer_numba
    raycast = raycast_numba
    im2col = im2col_numba
    col2im = col2im_numba
else:
    bev_scatter = bev_scatter_numpy
    zbuffer = zbuffer_numpy
    raycast = raycast_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy


def slab(origin, direction, box):
    """Single ray/box hit distance (inf for a miss) on the active backend."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    b = np.asarray(box, dtype=np.float64)
    if USE_NUMBA:
        return float(slab_numba(o, d, b))
    return float(slab_numpy(o[None], d[None], b[None])[0, 0])
