import itertools

import numpy as np
import pytest

from soenet.datagen import WorldConfig, chamfer, generate_world, make_scene, place_locations, render_scan, write_world
from soenet.errors import DataError
from soenet.geometry import read_catalog
from soenet.training import MiningRule


@pytest.fixture(scope="module")
def desk_world():
    return generate_world(WorldConfig())


def test_single_traversal_size():
    w = generate_world(WorldConfig(n_places=5, traversals=1, n_points=16, extent=500))
    assert len(w.scans) == 5


def test_same_seed_identical_files(tmp_path):
    cfg = WorldConfig(n_places=6, traversals=3, n_points=32, extent=600, seed=9)
    a = write_world(generate_world(cfg), tmp_path / "a")
    b = write_world(generate_world(cfg), tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()
    for f in sorted((tmp_path / "a" / "clouds").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "clouds" / f.name).read_bytes()
    c = write_world(generate_world(WorldConfig(n_places=6, traversals=3, n_points=32, extent=600, seed=10)), tmp_path / "c")
    assert c["all"].read_bytes() != a["all"].read_bytes()


def test_desk_world_satisfies_mining_geometry(desk_world):
    rule = MiningRule()
    scans = desk_world.scans
    assert len(scans) == 64 * 4
    loc = np.array([s.submap.location for s in scans])
    place = np.array([s.place for s in scans])
    d = np.linalg.norm(loc[:, None] - loc[None], axis=-1)
    same = place[:, None] == place[None]
    assert d[same].max() <= rule.positive_radius
    assert d[~same].min() > rule.negative_radius


def test_scans_are_valid_clouds(desk_world):
    for s in desk_world.scans:
        pts = s.submap.cloud.points
        assert pts.shape == (256, 3) and np.all(np.isfinite(pts)) and np.abs(pts).max() <= 1


def test_noise_free_traversals_identical():
    cfg = WorldConfig(n_places=3, traversals=3, n_points=64, extent=400, jitter_sigma=0, dropout_rate=0, shift_max=0)
    w = generate_world(cfg)
    for p in range(3):
        clouds = [s.submap.cloud.points for s in w.scans if s.place == p]
        for c in clouds[1:]:
            assert c.tobytes() == clouds[0].tobytes()


def test_render_exact_size_and_noise():
    rng = np.random.default_rng(0)
    scene = make_scene(rng, 100)
    for n in (1, 7, 100, 300):
        assert len(render_scan(scene, rng, n, 0.1, 0.3, (1.0, -1.0))) == n
    a = render_scan(scene, np.random.default_rng(1), 100, 0.1, 0.2).points
    b = render_scan(scene, np.random.default_rng(2), 100, 0.1, 0.2).points
    assert not np.array_equal(a, b)


def test_same_place_closer_than_other_places(desk_world):
    """Chamfer sanity separation over sampled (anchor, same place, other place) triples."""
    rng = np.random.default_rng(0)
    by_place = {}
    for s in desk_world.scans:
        by_place.setdefault(s.place, []).append(s.submap.cloud.points.astype(np.float64))
    wins = total = 0
    for p in range(64):
        for t1, t2 in itertools.combinations(range(4), 2):
            q = int(rng.integers(63))
            q += q >= p
            anchor, same = by_place[p][t1], by_place[p][t2]
            other = by_place[q][int(rng.integers(4))]
            wins += chamfer(anchor, same) < chamfer(anchor, other)
            total += 1
    assert wins / total >= 0.99


def test_infeasible_separation():
    with pytest.raises(DataError):
        place_locations(WorldConfig(n_places=50, extent=100))


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(n_places=1)
    with pytest.raises(ValueError):
        WorldConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        WorldConfig(jitter_sigma=-1)


def test_written_catalogs(tmp_path):
    w = generate_world(WorldConfig(n_places=4, traversals=4, n_points=16, extent=400))
    paths = write_world(w, tmp_path)
    assert set(paths) >= {"all", "train", "reference", "queries", "traversal_0"}
    train = read_catalog(paths["train"])
    ref = read_catalog(paths["reference"])
    queries = read_catalog(paths["queries"])
    assert len(train) == 8 and len(ref) == 4 and len(queries) == 4
    assert all(s.id.endswith("_t2") for s in ref) and all(s.id.endswith("_t3") for s in queries)
    assert (tmp_path / "world.txt").read_text().startswith("n_places=4\n")
    back = {s.id: s for s in read_catalog(paths["all"])}
    for scan in w.scans:
        assert back[scan.submap.id].cloud.points.tobytes() == scan.submap.cloud.points.tobytes()
        assert back[scan.submap.id].location == scan.submap.location
