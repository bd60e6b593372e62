"""Synthetic urban scenes and a deterministic 2-D multipath simulator.

Propagation is line-of-sight plus first-order specular wall reflections via
the image method, at a single height. Amplitudes follow the free-space 1/d
law (lambda / 4 pi d), reflections additionally scaled by the wall's
reflection coefficient. The BS ULA broadside points along +y; departure
angles are folded into [-pi/2, pi/2] (front/back ambiguity of a ULA).
"""

import json
from dataclasses import dataclass

import numpy as np

from .channel import LOS, NLOS, MultipathChannel, PropagationRay, equivalent_gain, gain_to_db

CELL_FREE = 0
CELL_BUILDING = 1
CELL_BS = 2

# parameter-space tolerance for "segment passes through interior" tests;
# real crossings in randomly generated scenes are many orders larger
_BLOCK_EPS = 1e-9


class SceneGenerationError(RuntimeError):
    """Random placement failed within the retry budget."""


class DegenerateSceneError(RuntimeError):
    """No grid cell receives any power; the map has no defined maximum."""


@dataclass(frozen=True)
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    gamma: float  # reflection coefficient in [0, 1]


@dataclass(frozen=True)
class Scene:
    width_m: float
    height_m: float
    cell_m: float
    buildings: tuple
    bs_position: tuple
    carrier_wavelength_m: float = 0.0857  # 3.5 GHz; cancels in normalization
    seed: int = 0

    def __post_init__(self):
        nx = self.width_m / self.cell_m
        ny = self.height_m / self.cell_m
        if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
            raise ValueError("map extent must be an integer number of cells")
        bx, by = self.bs_position
        if not (0 <= bx <= self.width_m and 0 <= by <= self.height_m):
            raise ValueError("bs_position outside map extent")
        for b in self.buildings:
            if not (b.x1 > b.x0 and b.y1 > b.y0):
                raise ValueError("degenerate building with non-positive area")
            if b.x0 < 0 or b.y0 < 0 or b.x1 > self.width_m or b.y1 > self.height_m:
                raise ValueError("building outside map extent")
            if not 0.0 <= b.gamma <= 1.0:
                raise ValueError("reflection coefficient must be in [0, 1]")
            if b.x0 < bx < b.x1 and b.y0 < by < b.y1:
                raise ValueError("bs_position strictly inside a building")

    @property
    def nx(self):
        return int(round(self.width_m / self.cell_m))

    @property
    def ny(self):
        return int(round(self.height_m / self.cell_m))

    def to_dict(self):
        return {
            "extent": [self.width_m, self.height_m],
            "cell_m": self.cell_m,
            "wavelength_m": self.carrier_wavelength_m,
            "bs": list(self.bs_position),
            "buildings": [
                {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "gamma": b.gamma}
                for b in self.buildings
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            width_m=float(doc["extent"][0]),
            height_m=float(doc["extent"][1]),
            cell_m=float(doc["cell_m"]),
            buildings=tuple(
                Building(b["x0"], b["y0"], b["x1"], b["y1"], b["gamma"])
                for b in doc["buildings"]
            ),
            bs_position=tuple(doc["bs"]),
            carrier_wavelength_m=float(doc["wavelength_m"]),
            seed=int(doc["seed"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SceneGenConfig:
    width_m: float = 64.0
    height_m: float = 64.0
    cell_m: float = 1.0
    building_count: tuple = (5, 12)
    building_size_m: tuple = (4.0, 16.0)
    reflection_coefficient: tuple = (0.3, 0.9)
    min_gap_m: float = 1.0
    wavelength_m: float = 0.0857
    max_tries: int = 200

    def to_dict(self):
        return {
            "width_m": self.width_m,
            "height_m": self.height_m,
            "cell_m": self.cell_m,
            "building_count": list(self.building_count),
            "building_size_m": list(self.building_size_m),
            "reflection_coefficient": list(self.reflection_coefficient),
            "min_gap_m": self.min_gap_m,
            "wavelength_m": self.wavelength_m,
            "max_tries": self.max_tries,
        }

    @classmethod
    def from_dict(cls, doc):
        kwargs = dict(doc)
        for key in ("building_count", "building_size_m", "reflection_coefficient"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def generate_scene(config, seed):
    """Random buildings plus a BS at a free cell center; deterministic per seed."""
    rng = np.random.default_rng(np.uint64(seed))
    lo, hi = config.building_count
    count = int(rng.integers(lo, hi + 1))
    placed = []
    gap = config.min_gap_m
    for _ in range(count):
        for _ in range(config.max_tries):
            w = rng.uniform(*config.building_size_m)
            h = rng.uniform(*config.building_size_m)
            x0 = rng.uniform(0.0, config.width_m - w)
            y0 = rng.uniform(0.0, config.height_m - h)
            gamma = rng.uniform(*config.reflection_coefficient)
            cand = Building(x0, y0, x0 + w, y0 + h, gamma)
            clear = all(
                cand.x0 - gap >= b.x1
                or cand.x1 + gap <= b.x0
                or cand.y0 - gap >= b.y1
                or cand.y1 + gap <= b.y0
                for b in placed
            )
            if clear:
                placed.append(cand)
                break
        else:
            raise SceneGenerationError(
                f"could not place building {len(placed) + 1}/{count} after "
                f"{config.max_tries} tries (seed {seed})"
            )
    scene = Scene(
        width_m=config.width_m,
        height_m=config.height_m,
        cell_m=config.cell_m,
        buildings=tuple(placed),
        bs_position=(0.0, 0.0),  # placeholder until the free-cell draw below
        carrier_wavelength_m=config.wavelength_m,
        seed=int(seed),
    )
    centers = grid_cell_centers(scene).reshape(-1, 2)
    free = np.nonzero(~_inside_any(centers, _building_array(scene)))[0]
    if free.size == 0:
        raise SceneGenerationError(f"no free cell left for the BS (seed {seed})")
    pick = int(rng.integers(free.size))
    bs = tuple(float(v) for v in centers[free[pick]])
    return Scene(
        width_m=scene.width_m,
        height_m=scene.height_m,
        cell_m=scene.cell_m,
        buildings=scene.buildings,
        bs_position=bs,
        carrier_wavelength_m=scene.carrier_wavelength_m,
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# grid geometry


def grid_cell_centers(scene):
    """(ny, nx, 2) metric centers; row 0 is the north (max-y) edge."""
    cell = scene.cell_m
    xs = (np.arange(scene.nx) + 0.5) * cell
    ys = scene.height_m - (np.arange(scene.ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def grid_cell_kinds(scene):
    """(ny, nx) int8 map: 0 free, 1 building interior, 2 the BS cell."""
    centers = grid_cell_centers(scene).reshape(-1, 2)
    kinds = np.zeros(len(centers), dtype=np.int8)
    kinds[_inside_any(centers, _building_array(scene))] = CELL_BUILDING
    bx, by = scene.bs_position
    col = int(np.floor(bx / scene.cell_m))
    row = int(np.floor((scene.height_m - by) / scene.cell_m))
    col = min(max(col, 0), scene.nx - 1)
    row = min(max(row, 0), scene.ny - 1)
    flat = row * scene.nx + col
    kinds[flat] = CELL_BS
    return kinds.reshape(scene.ny, scene.nx)


def _building_array(scene):
    if not scene.buildings:
        return np.zeros((0, 4))
    return np.array([[b.x0, b.y0, b.x1, b.y1] for b in scene.buildings])


def _inside_any(pts, rects):
    """Strict interior membership of each point in any rectangle."""
    if len(rects) == 0:
        return np.zeros(len(pts), dtype=bool)
    x, y = pts[:, 0:1], pts[:, 1:2]
    inside = (x > rects[:, 0]) & (x < rects[:, 2]) & (y > rects[:, 1]) & (y < rects[:, 3])
    return inside.any(axis=1)


def _slab_interval(lo, hi, p, d):
    """Entry/exit parameters of lines p + t*d against one axis slab [lo, hi]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p) / d
        t2 = (hi - p) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = d == 0
    inside = (p > lo) & (p < hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def segments_blocked(p0, p1, rects, eps=_BLOCK_EPS):
    """True per segment when it crosses any rectangle interior (slab clipping)."""
    p0 = np.atleast_2d(p0)
    p1 = np.atleast_2d(p1)
    if len(rects) == 0:
        return np.zeros(len(p0), dtype=bool)
    d = p1 - p0
    txmin, txmax = _slab_interval(rects[:, 0], rects[:, 2], p0[:, 0:1], d[:, 0:1])
    tymin, tymax = _slab_interval(rects[:, 1], rects[:, 3], p0[:, 1:2], d[:, 1:2])
    enter = np.maximum(txmin, tymin)
    leave = np.minimum(txmax, tymax)
    lo = np.maximum(enter, 0.0)
    hi = np.minimum(leave, 1.0)
    return ((hi - lo) > eps).any(axis=1)


def _fold_angle(psi):
    """Map any direction to the equivalent ULA angle in [-pi/2, pi/2]."""
    return np.arcsin(np.sin(psi))


def _walls(scene):
    """(axis, line coordinate, span lo, span hi, gamma) per building wall."""
    walls = []
    for b in scene.buildings:
        walls.append((0, b.x0, b.y0, b.y1, b.gamma))
        walls.append((0, b.x1, b.y0, b.y1, b.gamma))
        walls.append((1, b.y0, b.x0, b.x1, b.gamma))
        walls.append((1, b.y1, b.x0, b.x1, b.gamma))
    return walls


def _trace_arrays(scene, pts):
    """Ray data for many receive points at once.

    Returns (point_idx, is_los, length, angle, amplitude, phase) as flat
    arrays over all rays of all points. Points must be inside the extent,
    outside buildings and away from the BS.
    """
    pts = np.asarray(pts, dtype=float)
    bs = np.asarray(scene.bs_position, dtype=float)
    rects = _building_array(scene)
    lam = scene.carrier_wavelength_m
    m = len(pts)

    delta = pts - bs
    dist = np.hypot(delta[:, 0], delta[:, 1])
    if np.any(dist < 1e-9):
        raise ValueError("receive point coincides with the BS position")

    idx_parts, los_parts, len_parts, ang_parts, amp_parts, pha_parts = [], [], [], [], [], []

    visible = ~segments_blocked(np.broadcast_to(bs, (m, 2)), pts, rects)
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
            continue  # BS on the wall line: no mirror image
        sp = pts[:, axis] - c
        same_side = sb * sp > 0
        if not same_side.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            t = sb / (sb + sp)  # mirror-symmetric opposite-side points hit 0/0
            s_other = bs[other] + t * (pts[:, other] - bs[other])
        on_span = (s_other > span_lo) & (s_other < span_hi)
        cand = np.nonzero(same_side & on_span)[0]
        if cand.size == 0:
            continue
        s = np.empty((cand.size, 2))
        s[:, axis] = c
        s[:, other] = s_other[cand]
        clear = ~(
            segments_blocked(np.broadcast_to(bs, (cand.size, 2)), s, rects)
            | segments_blocked(s, pts[cand], rects)
        )
        keep = np.nonzero(clear)[0]
        if keep.size == 0:
            continue
        sk = s[keep]
        pk = pts[cand[keep]]
        d1 = np.hypot(sk[:, 0] - bs[0], sk[:, 1] - bs[1])
        d2 = np.hypot(pk[:, 0] - sk[:, 0], pk[:, 1] - sk[:, 1])
        dt = d1 + d2
        idx_parts.append(cand[keep])
        los_parts.append(np.zeros(keep.size, dtype=bool))
        len_parts.append(dt)
        ang_parts.append(_fold_angle(np.arctan2(sk[:, 0] - bs[0], sk[:, 1] - bs[1])))
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


def trace_point(scene, point, num_antennas=1):
    """Multipath channel at one map point (LoS + first-order reflections)."""
    x, y = point
    if not (0 <= x <= scene.width_m and 0 <= y <= scene.height_m):
        raise ValueError(f"point {point} outside map extent")
    pt = np.array([[x, y]], dtype=float)
    if _inside_any(pt, _building_array(scene))[0]:
        raise ValueError(f"point {point} lies inside a building")
    idx, is_los, lengths, angles, amps, phases = _trace_arrays(scene, pt)
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


def channel_map(scene, num_antennas):
    """Channel vectors for every grid cell center.

    Returns (h, has_los, kinds): h is (ny*nx, N) complex128 and zero at
    building/BS cells, has_los is a flat bool mask, kinds the flat cell map.
    """
    kinds = grid_cell_kinds(scene).reshape(-1)
    centers = grid_cell_centers(scene).reshape(-1, 2)
    traced = np.nonzero(kinds == CELL_FREE)[0]
    h = np.zeros((kinds.size, num_antennas), dtype=np.complex128)
    has_los = np.zeros(kinds.size, dtype=bool)
    if traced.size:
        idx, is_los, _, angles, amps, phases = _trace_arrays(scene, centers[traced])
        steer = np.exp(
            1j * np.pi * np.sin(angles)[:, None] * np.arange(num_antennas)[None, :]
        )
        contrib = (amps * np.exp(1j * phases))[:, None] * steer
        np.add.at(h, traced[idx], contrib)
        has_los[traced[np.unique(idx[is_los])]] = True
    return h, has_los, kinds


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-map dB normalization with a fixed dynamic range below the maximum."""

    p_max_db: float
    dynamic_range_db: float = 40.0

    @property
    def p_thre_db(self):
        return self.p_max_db - self.dynamic_range_db

    def apply(self, raw_db):
        raw_db = np.asarray(raw_db, dtype=float)
        span = self.p_max_db - self.p_thre_db
        out = (raw_db - self.p_thre_db) / span
        out = np.where(raw_db < self.p_thre_db, 0.0, out)
        return np.minimum(out, 1.0)


@dataclass
class CkmSample:
    """One training example: layout encoding in, normalized gain maps out."""

    input: np.ndarray  # (2, ny, nx) float32: occupancy, BS one-hot
    target: np.ndarray  # (N, ny, nx) float32 in [0, 1]
    scene_id: str
    bs_id: int
    codebook_size: int


def compute_raw_gain_db(scene, codebook, supersample=1):
    """Per-beam raw gain maps in dB: (N, ny, nx) with -inf where no power
    arrives and NaN at building/BS cells (excluded from the map maximum)."""
    if supersample < 1:
        raise ValueError("supersample factor must be >= 1")
    kinds = grid_cell_kinds(scene).reshape(-1)
    centers = grid_cell_centers(scene).reshape(-1, 2)
    traced = np.nonzero(kinds == CELL_FREE)[0]
    nb = codebook.num_antennas
    gains = np.zeros((kinds.size, nb))

    if traced.size:
        k = int(supersample)
        if k == 1:
            sub_pts = centers[traced]
            sub_owner = np.arange(traced.size)
        else:
            offs = (np.arange(k) + 0.5) / k - 0.5  # cell-relative offsets
            ox, oy = np.meshgrid(offs, offs)
            offsets = np.stack([ox.ravel(), oy.ravel()], axis=-1) * scene.cell_m
            sub_pts = (centers[traced][:, None, :] + offsets[None, :, :]).reshape(-1, 2)
            sub_owner = np.repeat(np.arange(traced.size), k * k)
            ok = ~_inside_any(sub_pts, _building_array(scene))
            ok &= np.hypot(*(sub_pts - np.asarray(scene.bs_position)).T) > 1e-9
            sub_pts, sub_owner = sub_pts[ok], sub_owner[ok]
        idx, _, _, angles, amps, phases = _trace_arrays(scene, sub_pts)
        h = np.zeros((len(sub_pts), codebook.num_antennas), dtype=np.complex128)
        steer = np.exp(
            1j * np.pi * np.sin(angles)[:, None] * np.arange(codebook.num_antennas)[None, :]
        )
        np.add.at(h, idx, (amps * np.exp(1j * phases))[:, None] * steer)
        sub_gain = np.abs(np.conj(h) @ codebook.columns) ** 2
        acc = np.zeros((traced.size, nb))
        np.add.at(acc, sub_owner, sub_gain)
        counts = np.bincount(sub_owner, minlength=traced.size).astype(float)
        counts[counts == 0] = 1.0
        gains[traced] = acc / counts[:, None]

    with np.errstate(divide="ignore"):
        raw = np.where(gains > 0, 10.0 * np.log10(np.where(gains > 0, gains, 1.0)), -np.inf)
    raw[kinds != CELL_FREE] = np.nan
    return raw.T.reshape(nb, scene.ny, scene.nx)


def render_ckm(scene, codebook, dynamic_range_db=40.0, supersample=1, scene_id=None, bs_id=0):
    """Build the (input, target) tensor pair for one scene and codebook."""
    raw = compute_raw_gain_db(scene, codebook, supersample=supersample)
    finite = np.isfinite(raw)
    if not finite.any():
        raise DegenerateSceneError(
            f"no cell receives power in scene {scene_id or scene.seed}"
        )
    spec = NormalizationSpec(p_max_db=float(raw[finite].max()), dynamic_range_db=dynamic_range_db)
    norm = spec.apply(raw)

    kinds = grid_cell_kinds(scene)
    overwrite = kinds != CELL_FREE
    norm[:, overwrite] = 1.0

    occupancy = (kinds == CELL_BUILDING).astype(np.float32)
    bs_onehot = (kinds == CELL_BS).astype(np.float32)
    sample = CkmSample(
        input=np.stack([occupancy, bs_onehot]).astype(np.float32),
        target=norm.astype(np.float32),
        scene_id=scene_id if scene_id is not None else f"{scene.seed:016x}",
        bs_id=bs_id,
        codebook_size=codebook.num_antennas,
    )
    if not np.isfinite(sample.target).all():
        raise AssertionError("normalized target contains non-finite values")
    if sample.target.min() < 0.0 or sample.target.max() > 1.0:
        raise AssertionError("normalized target escapes [0, 1]")
    return sample


def free_space_slope_check(scene, codeword, d1, d2):
    """Raw-gain dB difference between boresight points at ranges d1 < d2."""
    if not 0 < d1 < d2:
        raise ValueError("need 0 < d1 < d2")
    bx, by = scene.bs_position
    n = len(codeword)
    p1 = gain_to_db(equivalent_gain(trace_point(scene, (bx, by + d1), n), codeword))
    p2 = gain_to_db(equivalent_gain(trace_point(scene, (bx, by + d2), n), codeword))
    return p1 - p2
