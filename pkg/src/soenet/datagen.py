"""Seeded synthetic worlds standing in for a repeatedly traversed map.

Places sit on a metric map, far enough apart to be negatives of each other.
Each place owns a fixed scene built from parametric primitives (box
buildings, poles and free-standing walls; no ground). A traversal renders the
scene through a window around a slightly shifted scan center, replaces a
fraction of points with fresh surface samples, adds Gaussian jitter and
rescales to [-1, 1].

Scene constants (meters):

* scan window: 40 x 40 around the scan center, heights rescaled about 7 m
* boxes: 2-4, footprint 3-10 per side, height 3-14, any yaw
* poles: 3-8, radius 0.15-0.4, height 4-9
* walls: 1-3, length 6-25, height 1.5-5, any yaw
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from soenet.errors import DataError
from soenet.geometry import PointCloud, Submap, write_catalog, write_cloud

HALF_WINDOW = 20.0
HEIGHT_CENTER = 7.0
POOL_FACTOR = 6


@dataclass(frozen=True)
class WorldConfig:
    n_places: int = 64
    extent: float = 2000.0
    traversals: int = 4
    n_points: int = 256
    jitter_sigma: float = 0.1
    dropout_rate: float = 0.2
    shift_max: float = 2.0
    min_separation: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.n_places < 2 or self.traversals < 1 or self.n_points < 1:
            raise ValueError("need n_places >= 2, traversals >= 1, n_points >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.jitter_sigma < 0 or self.shift_max < 0:
            raise ValueError("jitter_sigma and shift_max must be non-negative")
        if self.extent <= 0:
            raise ValueError("extent must be positive")


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True, eq=False)
class Scene:
    rects: np.ndarray  # (R, 3, 3): origin, edge u, edge v
    cylinders: np.ndarray  # (P, 4): cx, cy, radius, height
    pool: np.ndarray  # (POOL_FACTOR * N, 3) fixed surface samples, scene frame

    def areas(self) -> np.ndarray:
        rect = np.linalg.norm(np.cross(self.rects[:, 1], self.rects[:, 2]), axis=1)
        cyl = 2 * np.pi * self.cylinders[:, 2] * self.cylinders[:, 3]
        return np.concatenate([rect, cyl])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Area-uniform points on the scene surfaces."""
        areas = self.areas()
        which = rng.choice(areas.size, size=count, p=areas / areas.sum())
        s, t = rng.random(count), rng.random(count)
        out = np.empty((count, 3))
        nr = len(self.rects)
        is_rect = which < nr
        r = self.rects[which[is_rect]]
        out[is_rect] = r[:, 0] + s[is_rect, None] * r[:, 1] + t[is_rect, None] * r[:, 2]
        c = self.cylinders[which[~is_rect] - nr]
        ang = 2 * np.pi * s[~is_rect]
        out[~is_rect, 0] = c[:, 0] + c[:, 2] * np.cos(ang)
        out[~is_rect, 1] = c[:, 1] + c[:, 2] * np.sin(ang)
        out[~is_rect, 2] = t[~is_rect] * c[:, 3]
        return out


def _box(rng: np.random.Generator, span: float) -> list[np.ndarray]:
    cx, cy = rng.uniform(-span, span, 2)
    w, d = rng.uniform(3, 10, 2)
    h = rng.uniform(3, 14)
    yaw = rng.uniform(0, np.pi)
    ex = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    ey = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, h])
    c = np.array([cx, cy, 0.0])
    corner = c - ex * w / 2 - ey * d / 2
    rects = [
        (corner, ex * w, up),
        (corner, ey * d, up),
        (corner + ey * d, ex * w, up),
        (corner + ex * w, ey * d, up),
        (corner + up, ex * w, ey * d),  # roof
    ]
    return [np.stack(r) for r in rects]


def _wall(rng: np.random.Generator, span: float) -> np.ndarray:
    cx, cy = rng.uniform(-span, span, 2)
    length = rng.uniform(6, 25)
    h = rng.uniform(1.5, 5)
    yaw = rng.uniform(0, np.pi)
    e = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * length
    return np.stack([np.array([cx, cy, 0.0]) - e / 2, e, np.array([0.0, 0.0, h])])


def make_scene(rng: np.random.Generator, n_points: int) -> Scene:
    span = HALF_WINDOW - 2
    rects: list[np.ndarray] = []
    for _ in range(rng.integers(2, 5)):
        rects.extend(_box(rng, span))
    for _ in range(rng.integers(1, 4)):
        rects.append(_wall(rng, span))
    n_poles = rng.integers(3, 9)
    poles = np.column_stack(
        [
            rng.uniform(-span, span, (n_poles, 2)),
            rng.uniform(0.15, 0.4, n_poles),
            rng.uniform(4, 9, n_poles),
        ]
    )
    scene = Scene(np.stack(rects), poles, np.empty((0, 3)))
    pool = scene.sample(rng, POOL_FACTOR * n_points)
    return Scene(scene.rects, scene.cylinders, pool)


def _in_window(local: np.ndarray) -> np.ndarray:
    return (np.abs(local[:, 0]) <= HALF_WINDOW) & (np.abs(local[:, 1]) <= HALF_WINDOW)


def render_scan(
    scene: Scene,
    rng: np.random.Generator,
    n_points: int,
    jitter_sigma: float = 0.0,
    dropout_rate: float = 0.0,
    shift: tuple[float, float] = (0.0, 0.0),
) -> PointCloud:
    """One traversal of ``scene`` seen from ``shift`` (meters), in [-1, 1]."""
    offset = np.array([shift[0], shift[1], 0.0])
    local = scene.pool - offset
    inside = local[_in_window(local)]
    if len(inside) == 0:
        raise DataError("scene has no points inside the scan window")
    pts = inside[np.arange(n_points) % len(inside)].copy()
    n_drop = int(round(dropout_rate * n_points))
    if n_drop:
        slots = rng.choice(n_points, size=n_drop, replace=False)
        fresh = np.empty((0, 3))
        while len(fresh) < n_drop:
            cand = scene.sample(rng, 2 * n_drop) - offset
            fresh = np.concatenate([fresh, cand[_in_window(cand)]])
        pts[slots] = fresh[:n_drop]
    if jitter_sigma > 0:
        pts = pts + rng.normal(0.0, jitter_sigma, pts.shape)
    pts[:, 2] -= HEIGHT_CENTER
    pts = np.clip(pts / HALF_WINDOW, -1.0, 1.0)
    return PointCloud(pts.astype(np.float32))


# --------------------------------------------------------------------------
# worlds


@dataclass(frozen=True, eq=False)
class Scan:
    submap: Submap
    place: int
    traversal: int


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    places: np.ndarray  # (n_places, 2)
    scans: list[Scan]

    def traversal(self, t: int) -> list[Submap]:
        return [s.submap for s in self.scans if s.traversal == t]

    def split(self) -> dict[str, list[Submap]]:
        """train / reference / queries: the last two traversals are held out."""
        t = self.config.traversals
        if t < 3:
            raise DataError("a train/reference/query split needs at least 3 traversals")
        return {
            "train": [s.submap for s in self.scans if s.traversal < t - 2],
            "reference": self.traversal(t - 2),
            "queries": self.traversal(t - 1),
        }


def place_locations(config: WorldConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0])
    pts: list[np.ndarray] = []
    attempts = 0
    limit = 2000 * config.n_places
    while len(pts) < config.n_places:
        attempts += 1
        if attempts > limit:
            raise DataError(
                f"cannot place {config.n_places} places {config.min_separation} m apart in a {config.extent} m map"
            )
        cand = rng.uniform(0, config.extent, 2)
        if all(np.linalg.norm(cand - p) > config.min_separation for p in pts):
            pts.append(cand)
    return np.array(pts)


def generate_world(config: WorldConfig) -> World:
    places = place_locations(config)
    scans = []
    for p, loc in enumerate(places):
        scene = make_scene(np.random.default_rng([config.seed, 1, p]), config.n_points)
        for t in range(config.traversals):
            rng = np.random.default_rng([config.seed, 2, p, t])
            r = config.shift_max * np.sqrt(rng.random())
            ang = rng.uniform(0, 2 * np.pi)
            shift = (r * np.cos(ang), r * np.sin(ang))
            cloud = render_scan(scene, rng, config.n_points, config.jitter_sigma, config.dropout_rate, shift)
            sub = Submap(f"p{p:03d}_t{t}", cloud, (float(loc[0] + shift[0]), float(loc[1] + shift[1])))
            scans.append(Scan(sub, p, t))
    return World(config, places, scans)


def write_world(world: World, out_dir) -> dict[str, Path]:
    """Write SPC1 clouds plus catalogs; returns the catalog paths by name."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    rows = {}
    for scan in world.scans:
        s = scan.submap
        fname = f"clouds/{s.id}.spc"
        write_cloud(out / fname, s.cloud)
        rows[s.id] = (s.id, fname, s.location[0], s.location[1])
    catalogs = {"all": [s.submap for s in world.scans]}
    for t in range(world.config.traversals):
        catalogs[f"traversal_{t}"] = world.traversal(t)
    if world.config.traversals >= 3:
        catalogs.update(world.split())
    paths = {}
    for name, subs in catalogs.items():
        paths[name] = out / f"{name}.csv"
        write_catalog(paths[name], [rows[s.id] for s in subs])
    (out / "world.txt").write_text("".join(f"{k}={v}\n" for k, v in asdict(world.config).items()))
    return paths


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
