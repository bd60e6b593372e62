"""Brute-force propagation oracle for verifying the fast simulator.

Deliberately independent algorithms: visibility subdivides each segment at
every wall-line crossing and tests interval midpoints for strict interior
membership (instead of slab clipping), and specular reflection points are
found by bisecting the path-length derivative along each wall span to the
Fermat stationary point (instead of mirror-image construction).
"""

import numpy as np

from .channel import LOS, NLOS, MultipathChannel, PropagationRay
from .scene import _building_array, _fold_angle, _walls, grid_cell_centers, grid_cell_kinds
from .scene import CELL_FREE

# metric margin for strict interior tests; far below any plausible geometry
_MARGIN = 1e-9


def segments_blocked_oracle(p0, p1, rects, margin=_MARGIN):
    """Interior-crossing test via midpoints of wall-line subdivisions."""
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    m = len(p0)
    blocked = np.zeros(m, dtype=bool)
    d = p1 - p0
    for x0, y0, x1, y1 in rects:
        # candidate split parameters: segment ends plus all wall-line crossings
        ts = [np.zeros(m), np.ones(m)]
        for axis, c in ((0, x0), (0, x1), (1, y0), (1, y1)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (c - p0[:, axis]) / d[:, axis]
            t = np.where(np.isfinite(t) & (t > 0.0) & (t < 1.0), t, 0.0)
            ts.append(t)
        ts = np.sort(np.stack(ts, axis=1), axis=1)
        mids = 0.5 * (ts[:, :-1] + ts[:, 1:])  # (m, 5)
        q = p0[:, None, :] + mids[:, :, None] * d[:, None, :]
        inside = (
            (q[:, :, 0] > x0 + margin)
            & (q[:, :, 0] < x1 - margin)
            & (q[:, :, 1] > y0 + margin)
            & (q[:, :, 1] < y1 - margin)
        )
        blocked |= inside.any(axis=1)
    return blocked


def _bisect_root(g, lo, hi, iters=100):
    """Vectorized bisection of a monotone-increasing g with g(lo)<0<g(hi)."""
    a = np.asarray(lo, dtype=float).copy()
    b = np.asarray(hi, dtype=float).copy()
    for _ in range(iters):
        mid = 0.5 * (a + b)
        below = g(mid) < 0.0
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    return 0.5 * (a + b)


def _oracle_rays(scene, pts):
    """Same ray-array layout as the fast tracer, computed the slow way."""
    pts = np.asarray(pts, dtype=float)
    bs = np.asarray(scene.bs_position, dtype=float)
    rects = _building_array(scene)
    lam = scene.carrier_wavelength_m
    m = len(pts)

    idx_parts, los_parts, len_parts, ang_parts, amp_parts, pha_parts = [], [], [], [], [], []

    delta = pts - bs
    dist = np.hypot(delta[:, 0], delta[:, 1])
    visible = ~segments_blocked_oracle(np.broadcast_to(bs, (m, 2)), pts, rects)
    vis_idx = np.nonzero(visible)[0]
    if vis_idx.size:
        d = dist[vis_idx]
        idx_parts.append(vis_idx)
        los_parts.append(np.ones(vis_idx.size, dtype=bool))
        len_parts.append(d)
        ang_parts.append(_fold_angle(np.arctan2(delta[vis_idx, 0], delta[vis_idx, 1])))
        amp_parts.append(lam / (4.0 * np.pi * d))
        pha_parts.append(np.mod(-2.0 * np.pi * d / lam, 2.0 * np.pi))

    for axis, c, span_lo, span_hi, gamma in _walls(scene):
        other = 1 - axis
        sb = bs[axis] - c
        if abs(sb) < 1e-12:
            continue
        sp = pts[:, axis] - c
        cand = np.nonzero(sb * sp > 0)[0]
        if cand.size == 0:
            continue
        pc = pts[cand]
        b_free = bs[other]
        p_free = pc[:, other]

        def path_slope(u, sb=sb, sp=sp[cand], b_free=b_free, p_free=p_free):
            # d/du of |bs - s(u)| + |s(u) - p|; zero at the equal-angle point
            d1 = np.hypot(sb, u - b_free)
            d2 = np.hypot(sp, u - p_free)
            return (u - b_free) / d1 + (u - p_free) / d2

        lo = np.full(cand.size, span_lo)
        hi = np.full(cand.size, span_hi)
        # convex path length: a strictly interior specular point exists iff
        # the slope changes sign across the span
        interior = (path_slope(lo) < 0.0) & (path_slope(hi) > 0.0)
        keep = np.nonzero(interior)[0]
        if keep.size == 0:
            continue
        u = _bisect_root(
            lambda v: path_slope(v, sb=sb, sp=sp[cand][keep], b_free=b_free, p_free=p_free[keep]),
            lo[keep],
            hi[keep],
        )
        s = np.empty((keep.size, 2))
        s[:, axis] = c
        s[:, other] = u
        pk = pc[keep]
        clear = ~(
            segments_blocked_oracle(np.broadcast_to(bs, (keep.size, 2)), s, rects)
            | segments_blocked_oracle(s, pk, rects)
        )
        good = np.nonzero(clear)[0]
        if good.size == 0:
            continue
        sg, pg = s[good], pk[good]
        d1 = np.hypot(sg[:, 0] - bs[0], sg[:, 1] - bs[1])
        d2 = np.hypot(pg[:, 0] - sg[:, 0], pg[:, 1] - sg[:, 1])
        dt = d1 + d2
        idx_parts.append(cand[keep[good]])
        los_parts.append(np.zeros(good.size, dtype=bool))
        len_parts.append(dt)
        ang_parts.append(_fold_angle(np.arctan2(sg[:, 0] - bs[0], sg[:, 1] - bs[1])))
        amp_parts.append(gamma * lam / (4.0 * np.pi * dt))
        pha_parts.append(np.mod(-2.0 * np.pi * dt / lam, 2.0 * np.pi))

    if not idx_parts:
        empty = np.zeros(0)
        return np.zeros(0, dtype=int), np.zeros(0, dtype=bool), empty, empty, empty, empty
    return (
        np.concatenate(idx_parts),
        np.concatenate(los_parts),
        np.concatenate(len_parts),
        np.concatenate(ang_parts),
        np.concatenate(amp_parts),
        np.concatenate(pha_parts),
    )


def oracle_trace_point(scene, point, num_antennas=1):
    """Slow-path multipath channel at one map point."""
    idx, is_los, lengths, angles, amps, phases = _oracle_rays(
        scene, np.array([point], dtype=float)
    )
    rays = tuple(
        PropagationRay(
            kind=LOS if is_los[i] else NLOS,
            length_m=float(lengths[i]),
            departure_angle=float(angles[i]),
            amplitude=float(amps[i]),
            phase=float(phases[i]),
        )
        for i in range(len(idx))
    )
    return MultipathChannel(rays=rays, num_antennas=num_antennas)


def oracle_channel_map(scene, num_antennas):
    """Slow-path analogue of scene.channel_map over all grid cell centers."""
    kinds = grid_cell_kinds(scene).reshape(-1)
    centers = grid_cell_centers(scene).reshape(-1, 2)
    traced = np.nonzero(kinds == CELL_FREE)[0]
    h = np.zeros((kinds.size, num_antennas), dtype=np.complex128)
    has_los = np.zeros(kinds.size, dtype=bool)
    if traced.size:
        idx, is_los, _, angles, amps, phases = _oracle_rays(scene, centers[traced])
        steer = np.exp(
            1j * np.pi * np.sin(angles)[:, None] * np.arange(num_antennas)[None, :]
        )
        np.add.at(h, traced[idx], (amps * np.exp(1j * phases))[:, None] * steer)
        has_los[traced[np.unique(idx[is_los])]] = True
    return h, has_los, kinds
