"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public wrappers at the bottom dispatch on :func:`visigrid._accel.backend`.
Both flavours use the same arithmetic so they agree bit-for-bit on ordinary
inputs; the test-suite checks this.

Grid traversal works in *index space*: a 2D grid of ``W x H`` cells spans
``[0, W] x [0, H]``, a voxel grid additionally ``[0, Nz]`` in z.
"""
import math

import numpy as np

from ._accel import HAVE_NUMBA, backend, njit

TIE_EPS = 1e-9


# --------------------------------------------------------------------------
# segment clipping shared by the traversals


def _clip_start_np(p0, p1, upper):
    """Liang-Barsky entry parameter of segments p0->p1 into the box [0, upper].

    p0, p1 are (M, D); returns (M,) entry t, NaN when the segment misses.
    """
    d = p1 - p0
    t0 = np.zeros(p0.shape[0])
    t1 = np.ones(p0.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(p0.shape[1]):
            lo = (0.0 - p0[:, a]) / d[:, a]
            hi = (upper[a] - p0[:, a]) / d[:, a]
            tmin = np.minimum(lo, hi)
            tmax = np.maximum(lo, hi)
            par = d[:, a] == 0.0
            outside = par & ((p0[:, a] < 0.0) | (p0[:, a] > upper[a]))
            tmin = np.where(par, -np.inf, tmin)
            tmax = np.where(par, np.inf, tmax)
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, tmax)
            t1 = np.where(outside, -1.0, t1)
    return np.where(t0 <= t1, t0, np.nan)


# --------------------------------------------------------------------------
# 2D / 3D grid raytracing (Amanatides-Woo with diagonal steps on exact ties)


def _dda_visibility_py(blocked, start, targets):
    """Reference scalar implementation; compiled by numba as ``_dda_visibility_nb``.

    blocked: 3D bool array. start: (3,) float index-space point. targets:
    (M, 3) int cell indices. Returns (M,) float 0/1.
    """
    ndim = start.shape[0]
    m = targets.shape[0]
    out = np.ones(m)
    shape = np.empty(ndim, np.int64)
    for a in range(ndim):
        shape[a] = blocked.shape[a]
    cell = np.empty(ndim, np.int64)
    step = np.empty(ndim, np.int64)
    tmax = np.empty(ndim)
    tdelta = np.empty(ndim)
    p1 = np.empty(ndim)
    d = np.empty(ndim)
    max_steps = 4
    for a in range(ndim):
        max_steps += shape[a]
    for q in range(m):
        for a in range(ndim):
            p1[a] = targets[q, a] + 0.5
            d[a] = p1[a] - start[a]
        # clip the start into the grid box
        t0 = 0.0
        t1 = 1.0
        miss = False
        for a in range(ndim):
            if d[a] == 0.0:
                if start[a] < 0.0 or start[a] > shape[a]:
                    miss = True
            else:
                lo = (0.0 - start[a]) / d[a]
                hi = (shape[a] - start[a]) / d[a]
                if lo > hi:
                    lo, hi = hi, lo
                if lo > t0:
                    t0 = lo
                if hi < t1:
                    t1 = hi
        if miss or t0 > t1:
            out[q] = 1.0
            continue
        for a in range(ndim):
            ps = start[a] + t0 * d[a]
            c = math.floor(ps)
            if d[a] < 0.0 and ps == c:
                c -= 1
            if c < 0:
                c = 0
            if c > shape[a] - 1:
                c = shape[a] - 1
            cell[a] = c
            if d[a] > 0.0:
                step[a] = 1
                tmax[a] = (c + 1.0 - start[a]) / d[a]
                tdelta[a] = 1.0 / d[a]
            elif d[a] < 0.0:
                step[a] = -1
                tmax[a] = (c - start[a]) / d[a]
                tdelta[a] = -1.0 / d[a]
            else:
                step[a] = 0
                tmax[a] = np.inf
                tdelta[a] = np.inf
        vis = 1.0
        for _ in range(max_steps):
            hit = True
            for a in range(ndim):
                if cell[a] != targets[q, a]:
                    hit = False
            if hit:
                break
            if blocked[cell[0], cell[1], cell[2]]:
                vis = 0.0
                break
            tm = tmax[0]
            for a in range(1, ndim):
                if tmax[a] < tm:
                    tm = tmax[a]
            inside = True
            for a in range(ndim):
                if tmax[a] <= tm + TIE_EPS:
                    cell[a] += step[a]
                    tmax[a] += tdelta[a]
                if cell[a] < 0 or cell[a] >= shape[a]:
                    inside = False
            if not inside:
                break
        out[q] = vis
    return out


def _dda_visibility_np(blocked, start, targets):
    """Lock-step vectorised traversal: every ray advances one cell per pass."""
    ndim = start.shape[0]
    shape = np.array(blocked.shape[:ndim], dtype=np.int64)
    m = targets.shape[0]
    out = np.ones(m)
    if m == 0:
        return out
    p1 = targets + 0.5
    p0 = np.broadcast_to(start, p1.shape).astype(float)
    d = p1 - p0
    t0 = _clip_start_np(p0, p1, shape.astype(float))
    live = ~np.isnan(t0)
    t0 = np.where(live, t0, 0.0)
    ps = p0 + t0[:, None] * d
    cell = np.floor(ps).astype(np.int64)
    cell = np.where((d < 0.0) & (ps == cell), cell - 1, cell)
    cell = np.clip(cell, 0, shape - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.sign(d).astype(np.int64)
        tmax = np.where(d > 0.0, (cell + 1.0 - p0) / d, np.where(d < 0.0, (cell - p0) / d, np.inf))
        tdelta = np.where(d != 0.0, 1.0 / np.abs(d), np.inf)
    idx = np.nonzero(live)[0]
    cell, step, tmax, tdelta, tgt = cell[idx], step[idx], tmax[idx], tdelta[idx], targets[idx]
    for _ in range(int(shape.sum()) + 4):
        if idx.size == 0:
            break
        hit = np.all(cell == tgt, axis=1)
        blk = blocked[tuple(cell.T)] & ~hit
        out[idx[blk]] = 0.0
        keep = ~(hit | blk)
        tm = tmax.min(axis=1)
        adv = tmax <= tm[:, None] + TIE_EPS
        cell = cell + np.where(adv, step, 0)
        tmax = tmax + np.where(adv, tdelta, 0.0)
        inside = np.all((cell >= 0) & (cell < shape), axis=1)
        keep &= inside
        idx, cell, step, tmax, tdelta, tgt = idx[keep], cell[keep], step[keep], tmax[keep], tdelta[keep], tgt[keep]
    return out


def _traverse_cells_py(shape0, shape1, start, end):
    """Cells crossed by the 2D segment start->end, excluding the end cell.

    Returns an (n, 2) int array in traversal order; cells outside the grid are
    skipped. Shares the stepping rule of the visibility traversal.
    """
    out = np.empty((shape0 + shape1 + 4, 2), np.int64)
    n = 0
    d0 = end[0] - start[0]
    d1 = end[1] - start[1]
    e0 = math.floor(end[0])
    e1 = math.floor(end[1])
    c0 = math.floor(start[0])
    c1 = math.floor(start[1])
    if d0 < 0.0 and start[0] == c0:
        c0 -= 1
    if d1 < 0.0 and start[1] == c1:
        c1 -= 1
    if d0 > 0.0:
        s0, tm0, td0 = 1, (c0 + 1.0 - start[0]) / d0, 1.0 / d0
    elif d0 < 0.0:
        s0, tm0, td0 = -1, (c0 - start[0]) / d0, -1.0 / d0
    else:
        s0, tm0, td0 = 0, np.inf, np.inf
    if d1 > 0.0:
        s1, tm1, td1 = 1, (c1 + 1.0 - start[1]) / d1, 1.0 / d1
    elif d1 < 0.0:
        s1, tm1, td1 = -1, (c1 - start[1]) / d1, -1.0 / d1
    else:
        s1, tm1, td1 = 0, np.inf, np.inf
    limit = out.shape[0]
    while n < limit:
        if c0 == e0 and c1 == e1:
            break
        if 0 <= c0 < shape0 and 0 <= c1 < shape1:
            out[n, 0] = c0
            out[n, 1] = c1
            n += 1
        tm = min(tm0, tm1)
        if tm > 1.0:
            break
        if tm0 <= tm + TIE_EPS:
            c0 += s0
            tm0 += td0
        if tm1 <= tm + TIE_EPS:
            c1 += s1
            tm1 += td1
    return out[:n]


# --------------------------------------------------------------------------
# spherical per-ray scan


def _scan_rays_py(occ, thr, graded):
    """Visibility along axis 0 of ``occ`` (range axis), independently per ray.

    Range is the outer loop so the inner loops walk contiguous memory; ``trans``
    holds the running transmission of every (azimuth, elevation) ray.
    """
    nr, na, ne = occ.shape
    vis = np.empty(occ.shape)
    trans = np.ones((na, ne))
    for k in range(nr):
        for i in range(na):
            for j in range(ne):
                t = trans[i, j]
                vis[k, i, j] = t
                o = occ[k, i, j]
                if graded:
                    f = 2.0 * o - 1.0
                    if f > 0.0:
                        trans[i, j] = t * (1.0 - f)
                elif o >= thr:
                    trans[i, j] = 0.0
    return vis


def _scan_rays_np(occ, thr, graded):
    if graded:
        f = 1.0 - np.maximum(0.0, 2.0 * occ - 1.0)
    else:
        f = np.where(occ >= thr, 0.0, 1.0)
    vis = np.ones(occ.shape)
    if occ.shape[0] > 1:
        vis[1:] = np.cumprod(f[:-1], axis=0)
    return vis


# --------------------------------------------------------------------------
# segment / ray vs oriented boxes
#
# boxes are (N, 7) rows: cx, cy, yaw, length, width, height, z_base


def _segments_blocked_py(origin, ends, boxes, eps):
    k = ends.shape[0]
    out = np.zeros(k, np.bool_)
    for b in range(boxes.shape[0]):
        cx = boxes[b, 0]
        cy = boxes[b, 1]
        yaw = boxes[b, 2]
        ln = boxes[b, 3]
        wd = boxes[b, 4]
        ht = boxes[b, 5]
        zb = boxes[b, 6]
        c = math.cos(yaw)
        s = math.sin(yaw)
        ox = origin[0] - cx
        oy = origin[1] - cy
        p0 = c * ox + s * oy
        p1 = -s * ox + c * oy
        p2 = origin[2] - (zb + 0.5 * ht)
        half0 = 0.5 * ln
        half1 = 0.5 * wd
        half2 = 0.5 * ht
        for q in range(k):
            if out[q]:
                continue
            ex = ends[q, 0] - origin[0]
            ey = ends[q, 1] - origin[1]
            d0 = c * ex + s * ey
            d1 = -s * ex + c * ey
            d2 = ends[q, 2] - origin[2]
            t0 = 0.0
            t1 = 1.0
            ok = True
            for a in range(3):
                if a == 0:
                    p, d, h = p0, d0, half0
                elif a == 1:
                    p, d, h = p1, d1, half1
                else:
                    p, d, h = p2, d2, half2
                if d == 0.0:
                    if not (-h < p < h):
                        ok = False
                        break
                else:
                    lo = (-h - p) / d
                    hi = (h - p) / d
                    if lo > hi:
                        lo, hi = hi, lo
                    if lo > t0:
                        t0 = lo
                    if hi < t1:
                        t1 = hi
            if ok and t1 - t0 > eps:
                out[q] = True
    return out


def _segments_blocked_np(origin, ends, boxes, eps):
    k = ends.shape[0]
    out = np.zeros(k, bool)
    if k == 0 or boxes.shape[0] == 0:
        return out
    cx, cy, yaw, ln, wd, ht, zb = (boxes[:, i][:, None] for i in range(7))
    c, s = np.cos(yaw), np.sin(yaw)
    ox, oy = origin[0] - cx, origin[1] - cy
    p = [c * ox + s * oy, -s * ox + c * oy, origin[2] - (zb + 0.5 * ht)]
    ex = ends[None, :, 0] - origin[0]
    ey = ends[None, :, 1] - origin[1]
    d = [c * ex + s * ey, -s * ex + c * ey, np.broadcast_to(ends[None, :, 2] - origin[2], ex.shape)]
    half = [0.5 * ln, 0.5 * wd, 0.5 * ht]
    t0 = np.zeros((boxes.shape[0], k))
    t1 = np.ones((boxes.shape[0], k))
    ok = np.ones((boxes.shape[0], k), bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            pa = np.broadcast_to(p[a], t0.shape)
            par = d[a] == 0.0
            ok &= ~par | ((-half[a] < pa) & (pa < half[a]))
            lo = (-half[a] - pa) / d[a]
            hi = (half[a] - pa) / d[a]
            t0 = np.where(par, t0, np.maximum(t0, np.minimum(lo, hi)))
            t1 = np.where(par, t1, np.minimum(t1, np.maximum(lo, hi)))
    return np.any(ok & (t1 - t0 > eps), axis=0)


def _ray_box_interval(ox, oy, oz, dx, dy, dz, cx, cy, c, s, hl, hw, zc, hh):
    """Entry/exit distance of a unit ray through a box (both NaN on a miss)."""
    rx = ox - cx
    ry = oy - cy
    p0 = c * rx + s * ry
    p1 = -s * rx + c * ry
    p2 = oz - zc
    d0 = c * dx + s * dy
    d1 = -s * dx + c * dy
    d2 = dz
    t0 = 0.0
    t1 = np.inf
    for a in range(3):
        if a == 0:
            p, d, h = p0, d0, hl
        elif a == 1:
            p, d, h = p1, d1, hw
        else:
            p, d, h = p2, d2, hh
        if d == 0.0:
            if not (-h < p < h):
                return np.nan, np.nan
        else:
            lo = (-h - p) / d
            hi = (h - p) / d
            if lo > hi:
                lo, hi = hi, lo
            if lo > t0:
                t0 = lo
            if hi < t1:
                t1 = hi
    if t1 <= t0:
        return np.nan, np.nan
    return t0, t1


def _rasterize_spherical_py(occ, sensor, grid, boxes, ranges):
    """Accumulate radial coverage of boxes into a spherical occupancy array.

    sensor: (x, y, z, yaw). grid: (r_min, dr, az_min, daz, el_min, del).
    ranges: (N, 4) int rows i0, i1, j0, j1 (inclusive-exclusive) per box.
    """
    nr = occ.shape[0]
    r_min = grid[0]
    dr = grid[1]
    az_min = grid[2]
    daz = grid[3]
    el_min = grid[4]
    dele = grid[5]
    for b in range(boxes.shape[0]):
        cx = boxes[b, 0]
        cy = boxes[b, 1]
        yaw = boxes[b, 2]
        ln = boxes[b, 3]
        wd = boxes[b, 4]
        ht = boxes[b, 5]
        zb = boxes[b, 6]
        c = math.cos(yaw)
        s = math.sin(yaw)
        for i in range(ranges[b, 0], ranges[b, 1]):
            az = sensor[3] + az_min + (i + 0.5) * daz
            for j in range(ranges[b, 2], ranges[b, 3]):
                el = el_min + (j + 0.5) * dele
                ce = math.cos(el)
                t0, t1 = _ray_box_interval(
                    sensor[0], sensor[1], sensor[2], ce * math.cos(az), ce * math.sin(az), math.sin(el),
                    cx, cy, c, s, 0.5 * ln, 0.5 * wd, zb + 0.5 * ht, 0.5 * ht,
                )
                if not t0 == t0:
                    continue
                k0 = int(math.floor((t0 - r_min) / dr))
                k1 = int(math.floor((t1 - r_min) / dr))
                if k0 < 0:
                    k0 = 0
                if k1 > nr - 1:
                    k1 = nr - 1
                for k in range(k0, k1 + 1):
                    lo = r_min + k * dr
                    cov = (min(t1, lo + dr) - max(t0, lo)) / dr
                    if cov > 0.0:
                        v = occ[k, i, j] + cov
                        occ[k, i, j] = v if v < 1.0 else 1.0
    return occ


def _rasterize_spherical_np(occ, sensor, grid, boxes, ranges):
    nr = occ.shape[0]
    r_min, dr, az_min, daz, el_min, dele = grid
    for b in range(boxes.shape[0]):
        i0, i1, j0, j1 = ranges[b]
        if i1 <= i0 or j1 <= j0:
            continue
        cx, cy, yaw, ln, wd, ht, zb = boxes[b]
        ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        az = sensor[3] + az_min + (ii + 0.5) * daz
        el = el_min + (jj + 0.5) * dele
        ce = np.cos(el)
        dirs = np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)
        t0, t1 = ray_box_intervals_np(np.asarray(sensor[:3], float), dirs, boxes[b])
        hit = ~np.isnan(t0)
        ii, jj, t0, t1 = ii[hit], jj[hit], t0[hit], t1[hit]
        if ii.size == 0:
            continue
        k0 = np.clip(np.floor((t0 - r_min) / dr).astype(np.int64), 0, nr - 1)
        k1 = np.clip(np.floor((t1 - r_min) / dr).astype(np.int64), 0, nr - 1)
        span = int((k1 - k0).max()) + 1
        for off in range(span):
            k = k0 + off
            sel = k <= k1
            kk = k[sel]
            lo = r_min + kk * dr
            cov = (np.minimum(t1[sel], lo + dr) - np.maximum(t0[sel], lo)) / dr
            pos = cov > 0.0
            kk, ia, ja, cov = kk[pos], ii[sel][pos], jj[sel][pos], cov[pos]
            occ[kk, ia, ja] = np.minimum(occ[kk, ia, ja] + cov, 1.0)
    return occ


def ray_box_intervals_np(origin, dirs, box):
    """Vectorised entry/exit distances of unit rays through one box row."""
    cx, cy, yaw, ln, wd, ht, zb = box
    c, s = math.cos(yaw), math.sin(yaw)
    rx, ry = origin[0] - cx, origin[1] - cy
    p = np.array([c * rx + s * ry, -s * rx + c * ry, origin[2] - (zb + 0.5 * ht)])
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    half = np.array([0.5 * ln, 0.5 * wd, 0.5 * ht])
    t0 = np.zeros(dirs.shape[0])
    t1 = np.full(dirs.shape[0], np.inf)
    ok = np.ones(dirs.shape[0], bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            par = d[:, a] == 0.0
            ok &= ~par | ((-half[a] < p[a]) & (p[a] < half[a]))
            lo = (-half[a] - p[a]) / d[:, a]
            hi = (half[a] - p[a]) / d[:, a]
            t0 = np.where(par, t0, np.maximum(t0, np.minimum(lo, hi)))
            t1 = np.where(par, t1, np.minimum(t1, np.maximum(lo, hi)))
    hit = ok & (t1 > t0)
    return np.where(hit, t0, np.nan), np.where(hit, t1, np.nan)


# --------------------------------------------------------------------------
# numba builds

if HAVE_NUMBA:
    _dda_visibility_nb = njit(_dda_visibility_py)
    _traverse_cells_nb = njit(_traverse_cells_py)
    _scan_rays_nb = njit(_scan_rays_py)
    _segments_blocked_nb = njit(_segments_blocked_py)
    _ray_box_interval = njit(_ray_box_interval)
    _rasterize_spherical_nb = njit(_rasterize_spherical_py)


def _pick(nb_name, np_impl):
    if backend() == "numba":
        return globals()[nb_name]
    return np_impl


# --------------------------------------------------------------------------
# public entry points


def dda_visibility(blocked, start, targets):
    """Binary line-of-sight from ``start`` to the centre of each target cell.

    A target is visible iff no cell traversed strictly before it is blocked;
    a blocked target cell is itself visible. Works for 2D and 3D grids.
    """
    blocked = np.asarray(blocked, dtype=np.bool_)
    start = np.asarray(start, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, start.shape[0])
    if blocked.ndim == 2:
        blocked = blocked[:, :, None]
        start = np.append(start, 0.5)
        targets = np.column_stack([targets, np.zeros(len(targets), np.int64)])
    blocked = np.ascontiguousarray(blocked)
    start = np.ascontiguousarray(start)
    targets = np.ascontiguousarray(targets)
    return _pick("_dda_visibility_nb", _dda_visibility_np)(blocked, start, targets)


def traverse_cells(shape, start, end):
    f = _pick("_traverse_cells_nb", _traverse_cells_py)
    return f(int(shape[0]), int(shape[1]), np.asarray(start, np.float64), np.asarray(end, np.float64))


def scan_rays(occ, thr, graded=False):
    occ = np.ascontiguousarray(occ, dtype=np.float64)
    return _pick("_scan_rays_nb", _scan_rays_np)(occ, float(thr), bool(graded))


def segments_blocked(origin, ends, boxes, eps=1e-9):
    """For each segment origin->end, whether it passes through any box interior."""
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    ends = np.ascontiguousarray(ends, dtype=np.float64).reshape(-1, 3)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7)
    return _pick("_segments_blocked_nb", _segments_blocked_np)(origin, ends, boxes, float(eps))


def rasterize_spherical(occ, sensor, grid, boxes, ranges):
    occ = np.ascontiguousarray(occ, dtype=np.float64)
    args = (
        np.asarray(sensor, np.float64),
        np.asarray(grid, np.float64),
        np.ascontiguousarray(boxes, np.float64).reshape(-1, 7),
        np.ascontiguousarray(ranges, np.int64).reshape(-1, 4),
    )
    return _pick("_rasterize_spherical_nb", _rasterize_spherical_np)(occ, *args)
