"""Quadruplet-family metric losses over global descriptors.

All distances are squared Euclidean. Hard-sample selection happens on the
forward values; the returned loss tensor then depends only on the selected
pairs, so gradients flow through them alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from soenet import diffcore as dc
from soenet.diffcore import Tape, Tensor
from soenet.errors import ShapeError

LOSSES = ("quadruplet", "lazy", "hphn")


@dataclass(frozen=True)
class LossConfig:
    loss: str = "hphn"
    margin_alpha: float = 0.5
    margin_beta: float = 0.2
    margin_gamma: float = 0.5

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if min(self.margin_alpha, self.margin_beta, self.margin_gamma) < 0:
            raise ValueError("margins must be non-negative")


@dataclass
class TupleBatch:
    """One training tuple: anchor, positives, set negatives and the extra negative."""

    anchor: Tensor
    positives: list[Tensor]
    negatives: list[Tensor]
    other: Tensor

    def __post_init__(self):
        if not self.positives or not self.negatives:
            raise ShapeError("a tuple needs at least one positive and one negative")
        shape = self.anchor.shape
        for t in [*self.positives, *self.negatives, self.other]:
            if t.shape != shape:
                raise ShapeError(f"descriptor shape {t.shape} differs from anchor {shape}")

    @classmethod
    def from_arrays(cls, anchor, positives, negatives, other, tape: Tape | None = None) -> "TupleBatch":
        tape = Tape() if tape is None else tape
        return cls(
            tape.const(anchor),
            [tape.const(p) for p in positives],
            [tape.const(n) for n in negatives],
            tape.const(other),
        )


def _sq(a: np.ndarray, b: np.ndarray):
    d = a - b
    return np.sum(d * d)


@dataclass(frozen=True)
class Mining:
    d_hp: float
    d_hn: float
    hp_index: int
    branch: str  # "anchor" or "other"
    hn_index: int


def hphn_mine(batch: TupleBatch) -> Mining:
    """Hardest positive (farthest from the anchor) and hardest negative.

    The hardest negative is the closest set negative to either the anchor
    or the extra negative; ties prefer the anchor branch, then lower index.
    """
    a = batch.anchor.value
    d_ap = [_sq(a, p.value) for p in batch.positives]
    d_an = [_sq(a, n.value) for n in batch.negatives]
    d_on = [_sq(batch.other.value, n.value) for n in batch.negatives]
    hp = int(np.argmax(d_ap))
    ja, jo = int(np.argmin(d_an)), int(np.argmin(d_on))
    if d_an[ja] <= d_on[jo]:
        return Mining(float(d_ap[hp]), float(d_an[ja]), hp, "anchor", ja)
    return Mining(float(d_ap[hp]), float(d_on[jo]), hp, "other", jo)


def hphn_quadruplet_loss(batch: TupleBatch, gamma: float = 0.5) -> Tensor:
    m = hphn_mine(batch)
    src = batch.anchor if m.branch == "anchor" else batch.other
    d_hp = dc.sqdist(batch.anchor, batch.positives[m.hp_index])
    d_hn = dc.sqdist(src, batch.negatives[m.hn_index])
    return dc.relu((d_hp - d_hn) + gamma)


def lazy_quadruplet_loss(batch: TupleBatch, alpha: float = 0.5, beta: float = 0.2) -> Tensor:
    """Max over (positive, negative) pairs of each hinge, summed.

    The hinge is monotone in its argument, so each max is attained at the
    farthest positive paired with the closest negative for that term.
    """
    a, o = batch.anchor.value, batch.other.value
    i = int(np.argmax([_sq(a, p.value) for p in batch.positives]))
    j1 = int(np.argmin([_sq(a, n.value) for n in batch.negatives]))
    j2 = int(np.argmin([_sq(o, n.value) for n in batch.negatives]))
    d_ap = dc.sqdist(batch.anchor, batch.positives[i])
    first = dc.relu((d_ap - dc.sqdist(batch.anchor, batch.negatives[j1])) + alpha)
    second = dc.relu((d_ap - dc.sqdist(batch.other, batch.negatives[j2])) + beta)
    return first + second


def quadruplet_loss(batch: TupleBatch, alpha: float = 0.5, beta: float = 0.2) -> Tensor:
    if len(batch.positives) != 1 or len(batch.negatives) != 1:
        raise ShapeError("quadruplet_loss takes exactly one positive and one negative")
    a, p, n, o = batch.anchor, batch.positives[0], batch.negatives[0], batch.other
    d_ap = dc.sqdist(a, p)
    first = dc.relu((d_ap - dc.sqdist(a, n)) + alpha)
    second = dc.relu((d_ap - dc.sqdist(o, n)) + beta)
    return first + second


def tuple_loss(batch: TupleBatch, config: LossConfig) -> Tensor:
    if config.loss == "hphn":
        return hphn_quadruplet_loss(batch, config.margin_gamma)
    if config.loss == "lazy":
        return lazy_quadruplet_loss(batch, config.margin_alpha, config.margin_beta)
    if len(batch.positives) == 1 and len(batch.negatives) == 1:
        return quadruplet_loss(batch, config.margin_alpha, config.margin_beta)
    # plain quadruplet on a larger tuple uses its first positive and negative
    sub = TupleBatch(batch.anchor, batch.positives[:1], batch.negatives[:1], batch.other)
    return quadruplet_loss(sub, config.margin_alpha, config.margin_beta)


def batch_loss(batches: list[TupleBatch], config: LossConfig) -> Tensor:
    """Arithmetic mean of per-tuple losses."""
    if not batches:
        raise ShapeError("empty batch")
    total = tuple_loss(batches[0], config)
    for b in batches[1:]:
        total = total + tuple_loss(b, config)
    return total if len(batches) == 1 else total * (1.0 / len(batches))
