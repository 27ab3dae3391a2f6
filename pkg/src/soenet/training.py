"""Tuple mining from a geotagged catalog and the optimization loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from soenet import diffcore as dc
from soenet.errors import DataError, NonFiniteError, ShapeError
from soenet.geometry import Submap
from soenet.losses import LossConfig, TupleBatch, batch_loss
from soenet.model import ModelConfig, init_params, neighbor_table, save_params, soenet, validate_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiningRule:
    positive_radius: float = 10.0
    negative_radius: float = 50.0
    eval_radius: float = 25.0

    def __post_init__(self):
        if not (0 < self.positive_radius < self.eval_radius < self.negative_radius):
            raise ValueError("need 0 < positive_radius < eval_radius < negative_radius")


@dataclass(frozen=True)
class TrainConfig:
    n_positives: int = 2
    n_negatives: int = 9  # set negatives plus the one extra negative
    lr0: float = 0.0005
    decay_factor: float = 0.7
    decay_steps: int = 2000
    epochs: int = 20
    max_steps: int | None = None
    tuples_per_step: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_positives < 1 or self.n_negatives < 2:
            raise ValueError("need n_positives >= 1 and n_negatives >= 2")
        if not 0 < self.decay_factor <= 1 or self.lr0 <= 0 or self.decay_steps < 1:
            raise ValueError("bad learning-rate schedule")
        if self.epochs < 0 or self.tuples_per_step < 1:
            raise ValueError("epochs must be >= 0 and tuples_per_step >= 1")


@dataclass(frozen=True)
class TupleSources:
    anchor: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    other: str


def _locations(catalog: Sequence[Submap]) -> np.ndarray:
    return np.array([s.location for s in catalog], dtype=np.float64).reshape(-1, 2)


def _pairwise(loc: np.ndarray) -> np.ndarray:
    diff = loc[:, None, :] - loc[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def sample_tuple(
    catalog: Sequence[Submap],
    anchor: int | str,
    rule: MiningRule,
    rng: np.random.Generator,
    n_positives: int = 2,
    n_negatives: int = 9,
    distances: np.ndarray | None = None,
) -> TupleSources:
    """Draw positives, set negatives and one extra negative for ``anchor``.

    ``n_negatives`` counts the extra negative, so ``n_negatives - 1`` set
    negatives are drawn. ``distances`` may carry a precomputed pairwise
    location matrix for the catalog.
    """
    ids = [s.id for s in catalog]
    a = ids.index(anchor) if isinstance(anchor, str) else int(anchor)
    dist = _pairwise(_locations(catalog)) if distances is None else distances
    row = dist[a]
    idx = np.arange(len(catalog))
    pos = idx[(row <= rule.positive_radius) & (idx != a)]
    neg = idx[row >= rule.negative_radius]
    n_set = n_negatives - 1
    if pos.size < n_positives:
        raise DataError(f"anchor {ids[a]}: {pos.size} positives within {rule.positive_radius} m, need {n_positives}")
    if neg.size < n_set:
        raise DataError(f"anchor {ids[a]}: {neg.size} negatives beyond {rule.negative_radius} m, need {n_set}")
    p = rng.choice(pos, size=n_positives, replace=False)
    n = rng.choice(neg, size=n_set, replace=False)
    members = np.concatenate([[a], p, n])
    far = np.all(dist[members] >= rule.negative_radius, axis=0)
    far[members] = False
    others = idx[far]
    if others.size == 0:
        raise DataError(f"anchor {ids[a]}: no extra negative far from every tuple member")
    o = int(rng.choice(others))
    return TupleSources(ids[a], tuple(ids[i] for i in p), tuple(ids[i] for i in n), ids[o])


def lr_at_step(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * config.decay_factor ** (step // config.decay_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[tuple[int, float, float]]

    def metrics_csv(self) -> str:
        return "step,loss,lr\n" + "".join(f"{s},{l!r},{r!r}\n" for s, l, r in self.log)


def train(
    catalog: Sequence[Submap],
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig,
    rule: MiningRule = MiningRule(),
    params: dict[str, np.ndarray] | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train on ``catalog`` (training traversals only).

    Each step samples ``tuples_per_step`` tuples, runs every member through
    the network on one tape, averages the tuple losses and applies Adam at
    the scheduled learning rate. With ``out_dir`` set, writes
    ``metrics.csv``, periodic ``step_XXXXXXX.sck`` files and ``final.sck``.
    """
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, train_config.seed) if params is None else dict(params)
    validate_params(params, model_config)
    dtype = dc._PRECISIONS[model_config.precision]
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    index = {s.id: i for i, s in enumerate(catalog)}
    dist = _pairwise(_locations(catalog))
    n_set = train_config.n_negatives - 1
    eligible = [
        i
        for i in range(len(catalog))
        if ((dist[i] <= rule.positive_radius).sum() - 1 >= train_config.n_positives)
        and ((dist[i] >= rule.negative_radius).sum() >= n_set)
    ]
    if train_config.epochs > 0 and not eligible:
        raise DataError("no anchor in the catalog has enough positives and negatives")
    tables: dict[int, np.ndarray | None] = {}

    def table(i: int):
        if i not in tables:
            tables[i] = neighbor_table(catalog[i].cloud, model_config)
        return tables[i]

    state = AdamState()
    history: list[tuple[int, float, float]] = []
    step = 0
    per_step = train_config.tuples_per_step
    with dc.precision(model_config.precision):
        for epoch in range(train_config.epochs):
            order = rng.permutation(eligible)
            for start in range(0, len(order), per_step):
                if train_config.max_steps is not None and step >= train_config.max_steps:
                    break
                tuples = [
                    sample_tuple(catalog, int(a), rule, rng, train_config.n_positives, train_config.n_negatives, dist)
                    for a in order[start : start + per_step]
                ]
                tape = dc.Tape()
                P = {k: tape.param(k, v) for k, v in params.items()}
                desc: dict[str, dc.Tensor] = {}

                def embed(sid: str):
                    if sid not in desc:
                        i = index[sid]
                        desc[sid] = soenet(tape.input(sid, catalog[i].cloud.points), table(i), P, model_config)
                    return desc[sid]

                batches = [
                    TupleBatch(
                        embed(t.anchor),
                        [embed(s) for s in t.positives],
                        [embed(s) for s in t.negatives],
                        embed(t.other),
                    )
                    for t in tuples
                ]
                loss = batch_loss(batches, loss_config)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                lr = lr_at_step(step, train_config)
                grads = dc.backward_grads(tape, loss)
                params, state = adam_step(params, grads, state, lr)
                history.append((step, value, lr))
                if on_step is not None:
                    on_step(step, value)
                step += 1
                if out_dir is not None and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
                    save_params(params, out_dir / f"step_{step:07d}.sck")
            log.info("epoch %d done at step %d", epoch, step)
            if train_config.max_steps is not None and step >= train_config.max_steps:
                break

    result = TrainResult(params, history)
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(result.metrics_csv())
        save_params(params, out_dir / "final.sck")
    return result


def config_dict(train_config: TrainConfig) -> dict:
    return asdict(train_config)
