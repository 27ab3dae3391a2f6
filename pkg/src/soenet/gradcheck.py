"""Finite-difference checks of the full network composed with each loss."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from soenet import diffcore as dc
from soenet.losses import LOSSES, LossConfig, TupleBatch, tuple_loss
from soenet.model import ModelConfig, init_params, neighbor_table, soenet

TOLERANCE = 1e-4
# every hinge stays active: squared distances between unit vectors are <= 4
_WIDE_MARGINS = LossConfig(margin_alpha=5.0, margin_beta=5.0, margin_gamma=5.0)


def _tuple_shape(loss: str) -> tuple[int, int]:
    return (1, 1) if loss == "quadruplet" else (2, 3)


def _loss_value(params, clouds, tables, config: ModelConfig, loss_cfg: LossConfig, n_pos: int):
    tape = dc.Tape()
    P = {k: tape.param(k, v) for k, v in params.items()}
    d = [soenet(tape.input(f"c{i}", c), t, P, config) for i, (c, t) in enumerate(zip(clouds, tables))]
    batch = TupleBatch(d[0], d[1 : 1 + n_pos], d[1 + n_pos : -1], d[-1])
    return tape, tuple_loss(batch, loss_cfg), batch


def _selection_gap(batch: TupleBatch) -> float:
    """Smallest gap between the selected hardest pair and its runner-up."""

    def gap(values):
        v = np.sort(np.asarray(values))
        return np.inf if v.size < 2 else float(v[1] - v[0])

    a, o = batch.anchor.value, batch.other.value
    d_ap = [-np.sum((a - p.value) ** 2) for p in batch.positives]
    d_an = [np.sum((a - n.value) ** 2) for n in batch.negatives]
    d_on = [np.sum((o - n.value) ** 2) for n in batch.negatives]
    return min(gap(d_ap), gap(d_an), gap(d_on), gap([min(d_an), min(d_on)]))


def _relu_pattern(tape: dc.Tape) -> list[np.ndarray]:
    return [tape.values[n.inputs[0]] > 0 for n in tape.nodes if n.op == "relu"]


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def model_loss_check(
    loss: str,
    config: ModelConfig,
    seed: int = 0,
    probes_per_tensor: int = 2,
    step: float = 1e-5,
) -> dict[str, float]:
    """Relative gradient error per parameter tensor for network + ``loss``.

    Parameters are randomized (nonzero biases and attention scale) so that no
    ReLU sits exactly on its kink; draws where the hardest-sample selection
    is within 1e-6 of switching are rejected, and so are probes whose
    perturbation flips any ReLU. Some gradients vanish by symmetry (a bias
    shared by every attention key cancels in the softmax) and a saturated
    attention softmax leaves others below what a difference quotient can
    resolve, so tiny gradients are compared against a floor.
    """
    config = replace(config, precision="float64")
    loss_cfg = replace(_WIDE_MARGINS, loss=loss)
    n_pos, n_neg = _tuple_shape(loss)
    rng = np.random.default_rng(seed)
    with dc.precision("float64"):
        for _ in range(100):
            clouds = [rng.uniform(-1, 1, (config.n_points, 3)) for _ in range(2 + n_pos + n_neg)]
            tables = [neighbor_table(c, config) for c in clouds]
            params = {
                k: v.astype(np.float64) + rng.normal(0.0, 0.1, v.shape)
                for k, v in init_params(config, int(rng.integers(1 << 31))).items()
            }
            tape, value, batch = _loss_value(params, clouds, tables, config, loss_cfg, n_pos)
            if _selection_gap(batch) > 1e-6:
                break
        grads = dc.backward_grads(tape, value)
        pattern = _relu_pattern(tape)
        probes = {}
        for name, arr in params.items():
            analytic, numeric = [], []
            for flat in rng.permutation(arr.size)[: 10 * probes_per_tensor]:
                if len(numeric) == probes_per_tensor:
                    break
                vals = []
                for sign in (1, -1):
                    probe = dict(params)
                    probe[name] = arr.copy()
                    probe[name].reshape(-1)[flat] += sign * step
                    t, v, _ = _loss_value(probe, clouds, tables, config, loss_cfg, n_pos)
                    if not _same_pattern(pattern, _relu_pattern(t)):
                        break
                    vals.append(v.item())
                if len(vals) == 2:
                    analytic.append(grads[name].reshape(-1)[flat])
                    numeric.append((vals[0] - vals[1]) / (2 * step))
            probes[name] = (np.array(analytic), np.array(numeric))
    # one rounding unit of the loss moves a quotient by eps*|L|/step; errors are
    # floored so that ten such units stay under the tolerance
    scale = np.linalg.norm(np.concatenate([a for a, _ in probes.values()]))
    resolution = np.finfo(np.float64).eps * max(abs(value.item()), 1.0) / step
    floor = max(1e-6 * scale, 10 * resolution / TOLERANCE)
    return {name: dc.relative_error(a, n, floor=floor) for name, (a, n) in probes.items()}


def full_report(
    config: ModelConfig,
    trials: int = 10,
    seed: int = 0,
    losses: tuple[str, ...] = LOSSES,
    probes_per_tensor: int = 2,
) -> dict[str, float]:
    """Primitive checks plus one network+loss composition check per loss."""
    report = dc.grad_check_report(trials=trials, seed=seed)
    for k, loss in enumerate(losses):
        per_tensor = model_loss_check(loss, config, seed=seed * 1000 + k, probes_per_tensor=probes_per_tensor)
        report[f"model+{loss}"] = max(per_tensor.values())
    return report
