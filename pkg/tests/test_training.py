import numpy as np
import pytest

from soenet.datagen import WorldConfig, generate_world
from soenet.errors import DataError, ShapeError
from soenet.geometry import PointCloud, Submap
from soenet.losses import LossConfig
from soenet.model import ModelConfig, init_params, load_params
from soenet.training import (
    AdamState,
    MiningRule,
    TrainConfig,
    adam_step,
    lr_at_step,
    sample_tuple,
    train,
)

TINY = ModelConfig(n_points=32, mlp_dims=(4, 8), vlad_k=2, out_dim=4)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(n_places=12, extent=800, traversals=4, n_points=32, seed=3))


def _catalog(world):
    return world.split()["train"]


# --------------------------------------------------------------------------
# tuple sampling


def test_sample_tuple_obeys_geometry(world):
    cat = _catalog(world)
    loc = {s.id: np.array(s.location) for s in cat}
    rule = MiningRule()
    rng = np.random.default_rng(0)
    for anchor in range(len(cat)):
        t = sample_tuple(cat, anchor, rule, rng, n_positives=1, n_negatives=9)
        a = loc[t.anchor]
        assert len(t.positives) == 1 and len(t.negatives) == 8
        assert len(set(t.negatives)) == 8 and t.anchor not in t.positives
        for p in t.positives:
            assert np.linalg.norm(loc[p] - a) <= rule.positive_radius
        for n in t.negatives:
            assert np.linalg.norm(loc[n] - a) >= rule.negative_radius
        members = [t.anchor, *t.positives, *t.negatives]
        assert t.other not in members
        for m in members:
            assert np.linalg.norm(loc[t.other] - loc[m]) >= rule.negative_radius


def test_sample_tuple_too_few_positives(world):
    cat = _catalog(world)
    with pytest.raises(DataError, match="positives"):
        sample_tuple(cat, 0, MiningRule(), np.random.default_rng(0), n_positives=2)


def test_sample_tuple_too_few_negatives():
    cloud = PointCloud(np.zeros((4, 3)))
    cat = [Submap(f"s{i}", cloud, (i * 1.0, 0.0)) for i in range(4)]
    with pytest.raises(DataError, match="negatives"):
        sample_tuple(cat, "s0", MiningRule(), np.random.default_rng(0), n_positives=1)


def test_mining_rule_order():
    with pytest.raises(ValueError):
        MiningRule(positive_radius=30)


# --------------------------------------------------------------------------
# schedule and optimizer


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at_step(0, cfg) == 0.0005
    assert lr_at_step(1999, cfg) == 0.0005
    assert lr_at_step(2000, cfg) == pytest.approx(0.00035, rel=1e-12)
    assert lr_at_step(4000, cfg) == pytest.approx(0.000245, rel=1e-12)
    lrs = [lr_at_step(s, cfg) for s in range(0, 20000, 250)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step():
    p, state = adam_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, AdamState(), 0.1)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_and_shape_check():
    params = {"w": np.arange(3.0)}
    p, _ = adam_step(params, {"w": np.zeros(3)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"], params["w"])
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(2)}, AdamState(), 0.1)


def test_adam_matches_formula_over_steps():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    grads = rng.normal(size=(5, 4))
    params, state = {"w": w.copy()}, AdamState()
    m = v = np.zeros(4)
    ref = w.copy()
    for t, g in enumerate(grads, start=1):
        params, state = adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


# --------------------------------------------------------------------------
# training loop


def _short(seed=0, **kw):
    base = dict(n_positives=1, epochs=1, max_steps=4, seed=seed)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_init(world, tmp_path):
    res = train(_catalog(world), TINY, _short(epochs=0), LossConfig(), out_dir=tmp_path)
    init = init_params(TINY, 0)
    final = load_params(tmp_path / "final.sck")
    assert res.log == []
    for k in init:
        assert final[k].tobytes() == init[k].tobytes()
    assert (tmp_path / "metrics.csv").read_text() == "step,loss,lr\n"


def test_same_seed_identical_logs(world, tmp_path):
    a = train(_catalog(world), TINY, _short(), LossConfig(), out_dir=tmp_path / "a")
    b = train(_catalog(world), TINY, _short(), LossConfig(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "final.sck").read_bytes() == (tmp_path / "b" / "final.sck").read_bytes()
    assert len(a.log) == 4 and a.log == b.log
    c = train(_catalog(world), TINY, _short(seed=1), LossConfig())
    assert c.log != a.log


def test_checkpoints_and_log_format(world, tmp_path):
    train(_catalog(world), TINY, _short(checkpoint_every=2), LossConfig(loss="lazy"), out_dir=tmp_path)
    assert (tmp_path / "step_0000002.sck").exists() and (tmp_path / "step_0000004.sck").exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 5
    step, loss, lr = lines[1].split(",")
    assert step == "0" and float(lr) == 0.0005 and float(loss) >= 0


def test_train_split_excludes_evaluation_traversals(world):
    split = world.split()
    train_ids = {s.id for s in split["train"]}
    held_out = {s.id for s in split["reference"] + split["queries"]}
    assert train_ids and not train_ids & held_out
    seen = []
    res = train(split["train"], TINY, _short(max_steps=3), LossConfig(), on_step=lambda s, l: seen.append(s))
    assert seen == [0, 1, 2]
    assert all(np.isfinite(l) for _, l, _ in res.log)


def test_loss_decreases_on_small_world(world):
    res = train(_catalog(world), TINY, TrainConfig(n_positives=1, epochs=10, lr0=0.005, seed=0), LossConfig())
    losses = np.array([l for _, l, _ in res.log])
    k = len(losses) // 4
    assert losses[-k:].mean() < losses[:k].mean()


def test_no_eligible_anchor():
    cloud = PointCloud(np.zeros((32, 3)))
    cat = [Submap(f"s{i}", cloud, (i * 100.0, 0.0)) for i in range(12)]
    with pytest.raises(DataError):
        train(cat, TINY, _short(), LossConfig())
