"""Desk-scale studies on the synthetic tasks: N sweep, skip ablation, speakers.

All arms of a study share one seeded dataset and an equal epoch budget.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging

from .dataio import Dataset, LongDepTaskSpec, gen_longdep, gen_multispeaker
from .model import UfansConfig, build_model, receptive_field
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

# Small models that finish in minutes on one core; see README for the numbers they give.
EXPERIMENT_DEFAULTS = {
    "length": "512",
    "lag": "100",
    "in_dims": "1",
    "out_dims": "1",
    "noise_std": "0.5",
    "n_utterances": "1024",
    "valid_utterances": "32",
    "smoothing": "8.0",
    "block_channels": "32",
    "final_conv_channels": "32",
    "dropout_rate": "0.0",
    "epochs": "8",
    "batch_size": "16",
    "lr": "0.002",
    "n_samplings": "5",
    "ns": "3,4,5,6",
    "n_speakers": "2",
    "speaker_offset": "1.0",
}


def splits(task: LongDepTaskSpec, valid_utterances: int, n_speakers: int = 0, offset: float = 1.0):
    valid_task = dataclasses.replace(task, seed=task.seed + 1, n_utterances=valid_utterances)
    if n_speakers:
        return gen_multispeaker(task, n_speakers, offset), gen_multispeaker(valid_task, n_speakers, offset)
    return gen_longdep(task), gen_longdep(valid_task)


def param_digest(model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()[:16]


def _run(model_cfg: UfansConfig, train_cfg: TrainConfig, tr: Dataset, va: Dataset) -> dict:
    model = build_model(model_cfg)
    digest = param_digest(model)
    init_valid = evaluate(model, va)
    res = train(model, tr, va, train_cfg)
    last = res.history[-1]
    return {
        "valid_mse": last["valid_mse"],
        "train_mse": last["train_mse"],
        "best_valid_mse": res.best_valid,
        "init_valid_mse": init_valid,
        "init_digest": digest,
        "history": res.history,
    }


def sweep_n(task: LongDepTaskSpec, ns, model_cfg: UfansConfig, train_cfg: TrainConfig, valid_utterances: int = 32):
    """One model per N on the same data; rows carry the analytic span and final validation MSE."""
    tr, va = splits(task, valid_utterances)
    rows = []
    for n in ns:
        out = _run(dataclasses.replace(model_cfg, n_samplings=n), train_cfg, tr, va)
        rows.append({
            "N": n,
            "S_N": receptive_field(n),
            "valid_mse": out["valid_mse"],
            "noise_floor": task.noise_floor,
            "ratio_to_floor": out["valid_mse"] / task.noise_floor,
        })
        log.info("sweep N=%d valid_mse=%.4f", n, out["valid_mse"])
    return rows


def is_non_increasing(values, slack: float = 0.0) -> bool:
    return all(b <= a * (1 + slack) for a, b in zip(values, values[1:]))


def ablate_skip(task: LongDepTaskSpec, model_cfg: UfansConfig, train_cfg: TrainConfig, valid_utterances: int = 32):
    """Two matched runs that differ only in the skip-connection flag."""
    tr, va = splits(task, valid_utterances)
    rows = []
    for flag in (True, False):
        out = _run(dataclasses.replace(model_cfg, skip_connections=flag), train_cfg, tr, va)
        rows.append({
            "skip": int(flag),
            "N": model_cfg.n_samplings,
            "valid_mse": out["valid_mse"],
            "init_valid_mse": out["init_valid_mse"],
            "init_digest": out["init_digest"],
        })
    return rows


def speaker_study(task: LongDepTaskSpec, model_cfg: UfansConfig, train_cfg: TrainConfig,
                  n_speakers: int = 2, offset: float = 1.0, valid_utterances: int = 32):
    """Conditioned vs unconditioned model on the multi-speaker task."""
    tr, va = splits(task, valid_utterances, n_speakers, offset)
    rows = []
    for conditioned in (True, False):
        cfg = dataclasses.replace(model_cfg, n_speakers=n_speakers if conditioned else 0)
        out = _run(cfg, train_cfg, tr, va)
        rows.append({
            "conditioned": int(conditioned),
            "valid_mse": out["valid_mse"],
            "noise_floor": task.noise_floor,
            "unconditioned_floor": tr.meta["unconditioned_floor"],
        })
    return rows
