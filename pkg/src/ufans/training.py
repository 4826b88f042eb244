"""Mini-batch MSE training with Adam on the tape-based autodiff."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataio import Dataset
from .model import UfansModel, forward
from .numerics import (
    AdamState,
    NonFiniteError,
    adam_step,
    backward,
    crop_frames,
    mse_loss,
    recording,
    scale,
    sum_scalars,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_speakers: bool = True


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_params: list[np.ndarray] | None = None
    best_valid: float = float("inf")
    initial_loss: float | None = None


def _groups(data: Dataset, idx, use_speakers: bool):
    """Split a batch into stackable groups sharing frame count and speaker."""
    keyed: dict = {}
    for i in idx:
        x = data.inputs[i]
        spk = x.speaker_id if use_speakers else None
        keyed.setdefault((x.n_frames, spk), []).append(i)
    for (_, spk), members in keyed.items():
        xs = np.stack([data.inputs[i].frames for i in members])
        ys = np.stack([data.targets[i].frames for i in members])
        yield spk, xs, ys


def _scored(pred, target: np.ndarray, start: int):
    if start == 0:
        return pred, target
    return crop_frames(pred, start, pred.shape[-2], axis=-2), target[..., start:, :]


def batch_loss(model: UfansModel, data: Dataset, idx, mode: str, seed: int, use_speakers: bool):
    """Frame-weighted MSE over a batch, built on the active tape."""
    dt = model.cfg.np_dtype
    start = data.score_from
    parts = []
    total = sum(data.targets[i].n_frames - start for i in idx)
    for g, (spk, xs, ys) in enumerate(_groups(data, idx, use_speakers)):
        pred = forward(model, xs.astype(dt), spk, mode, seed=seed * 131 + g)
        pred, tgt = _scored(pred, ys.astype(dt), start)
        weight = xs.shape[0] * (xs.shape[1] - start) / total
        parts.append(scale(mse_loss(pred, tgt), weight))
    return parts[0] if len(parts) == 1 else sum_scalars(parts)


def evaluate(model: UfansModel, data: Dataset, batch_size: int = 16, use_speakers: bool = True) -> float:
    """Eval-mode MSE over the scored frames of every utterance.

    Speaker ids in the data are ignored when the model is unconditioned.
    """
    use_speakers = use_speakers and model.cfg.n_speakers > 0
    sq, count = 0.0, 0
    idx = np.arange(len(data))
    start = data.score_from
    for b in range(0, len(idx), batch_size):
        for spk, xs, ys in _groups(data, idx[b:b + batch_size], use_speakers):
            pred = forward(model, xs.astype(model.cfg.np_dtype), spk, "eval").data[..., start:, :]
            diff = pred.astype(np.float64) - ys[..., start:, :]
            sq += float(np.sum(diff * diff))
            count += diff.size
    return sq / count


def train(
    model: UfansModel,
    train_set: Dataset,
    valid_set: Dataset | None,
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train in place; after each epoch records eval-mode train/valid MSE.

    The best-validation parameters are kept in ``result.best_params``.
    """
    use_spk = cfg.use_speakers and model.cfg.n_speakers > 0
    params = model.parameters()
    state = AdamState.zeros_like([p.data for p in params], lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            with recording() as tape:
                loss = batch_loss(model, train_set, idx, "train", cfg.seed * 100003 + step, use_spk)
            if result.initial_loss is None:
                result.initial_loss = loss.item()
            grads = backward(tape, loss)
            try:
                new, state = adam_step([p.data for p in params], [grads[p] for p in params], state)
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {epoch} step {step}: {e}") from e
            for p, a in zip(params, new):
                p.data = a
            step += 1
        row = {"epoch": epoch, "train_mse": evaluate(model, train_set, cfg.batch_size, use_spk)}
        if valid_set is not None:
            row["valid_mse"] = evaluate(model, valid_set, cfg.batch_size, use_spk)
        score = row.get("valid_mse", row["train_mse"])
        if score < result.best_valid:
            result.best_valid = score
            result.best_params = [p.data.copy() for p in params]
        result.history.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    return result
