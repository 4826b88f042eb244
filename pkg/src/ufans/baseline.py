"""Sequential bidirectional recurrent model and the latency comparison harness.

The cell is a single-gate recurrent unit, not an LSTM:

    f_t = sigmoid(Wf x_t + Uf h_{t-1} + bf)
    c_t = tanh(Wc x_t + Uc h_{t-1} + bc)
    h_t = f_t * c_t

All state flows through U, so U = 0 reduces it to a per-frame map. It stands
in for the recurrent baselines only as far as latency goes: every step waits
for the previous one.
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .model import UfansModel, forward
from .numerics import ShapeError, recording

REPORT_COLUMNS = ("model", "L", "threads", "median_ms", "p90_ms", "params")


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1)


@dataclass
class RecurrentCellParams:
    W: np.ndarray  # (in_dims, 2H): gate then candidate
    U: np.ndarray  # (H, 2H)
    b: np.ndarray  # (2H,)
    direction: str = "forward"

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


@dataclass
class RecurrentModel:
    fwd: RecurrentCellParams
    bwd: RecurrentCellParams
    out_W: np.ndarray  # (2H, out_dims)
    out_b: np.ndarray
    step_counter: list[int] = field(default_factory=lambda: [0])

    @property
    def in_dims(self) -> int:
        return self.fwd.W.shape[0]

    def num_parameters(self) -> int:
        arrays = [self.fwd.W, self.fwd.U, self.fwd.b, self.bwd.W, self.bwd.U, self.bwd.b, self.out_W, self.out_b]
        return sum(a.size for a in arrays)


def recurrent_param_count(hidden: int, in_dims: int, out_dims: int) -> int:
    per_dir = in_dims * 2 * hidden + hidden * 2 * hidden + 2 * hidden
    return 2 * per_dir + 2 * hidden * out_dims + out_dims


def matched_hidden(target_params: int, in_dims: int, out_dims: int) -> int:
    """Hidden size whose parameter count is closest to ``target_params``."""
    # 4H^2 + H(4 in + 4 + 2 out) + out = target
    a, b = 4, 4 * in_dims + 4 + 2 * out_dims
    h = int((-b + math.sqrt(b * b + 4 * a * max(target_params - out_dims, 0))) / (2 * a))
    return min((max(1, h + d) for d in (-1, 0, 1)),
               key=lambda k: abs(recurrent_param_count(k, in_dims, out_dims) - target_params))


def build_recurrent(in_dims: int, out_dims: int, hidden: int, seed: int = 0, dtype=np.float32) -> RecurrentModel:
    rng = np.random.default_rng(seed)

    def cell(direction):
        W = rng.uniform(-1, 1, (in_dims, 2 * hidden)) / math.sqrt(in_dims)
        U = rng.uniform(-1, 1, (hidden, 2 * hidden)) / math.sqrt(hidden)
        return RecurrentCellParams(W.astype(dtype), U.astype(dtype), np.zeros(2 * hidden, dtype), direction)

    fwd, bwd = cell("forward"), cell("backward")
    out_W = (rng.uniform(-1, 1, (2 * hidden, out_dims)) / math.sqrt(2 * hidden)).astype(dtype)
    return RecurrentModel(fwd, bwd, out_W, np.zeros(out_dims, dtype))


def _run_direction(p: RecurrentCellParams, x: np.ndarray, counter: list[int]) -> np.ndarray:
    n, hdim = x.shape[0], p.hidden
    pre = x @ p.W + p.b  # input part is parallel across frames
    order = range(n) if p.direction == "forward" else range(n - 1, -1, -1)
    h = np.zeros(hdim, dtype=x.dtype)
    out = np.empty((n, hdim), dtype=x.dtype)
    for t in order:
        z = pre[t] + h @ p.U
        f = _sigmoid(z[:hdim])
        c = np.tanh(z[hdim:])
        h = f * c
        out[t] = h
        counter[0] += 1
    return out


def cell_step(p: RecurrentCellParams, x_t: np.ndarray, h: np.ndarray) -> np.ndarray:
    hdim = p.hidden
    z = x_t @ p.W + p.b + h @ p.U
    f = _sigmoid(z[:hdim])
    return f * np.tanh(z[hdim:])


def recurrent_forward(model: RecurrentModel, features) -> np.ndarray:
    """``(L, in_dims)`` -> ``(L, out_dims)``; each direction is strictly sequential."""
    x = np.asarray(getattr(features, "frames", features), dtype=model.fwd.W.dtype)
    if x.ndim != 2 or x.shape[1] != model.in_dims:
        raise ShapeError(f"recurrent_forward: expected (L, {model.in_dims}) features, got {x.shape}")
    hf = _run_direction(model.fwd, x, model.step_counter)
    hb = _run_direction(model.bwd, x, model.step_counter)
    return np.concatenate([hf, hb], axis=1) @ model.out_W + model.out_b


def ufans_op_count(model: UfansModel, length: int) -> int:
    """Number of tensor ops in one forward pass (recorded on a throwaway tape)."""
    x = np.zeros((length, model.cfg.in_dims), dtype=model.cfg.np_dtype)
    with recording() as tape:
        forward(model, x)
    return len(tape)


# ---------------------------------------------------------------------------
# latency


def _time_ms(fn, repeats: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples


def latency_compare(
    ufans_model: UfansModel,
    recurrent_model: RecurrentModel,
    length: int = 1000,
    repeats: int = 5,
    threads: int = 1,
    warmup: int = 1,
    seed: int = 0,
) -> list[dict]:
    """Median and p90 wall-clock per utterance for both models at one thread count.

    BLAS threads are pinned to ``threads`` for the duration. Returns one row
    per model, keyed by :data:`REPORT_COLUMNS`, plus the raw samples.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((length, ufans_model.cfg.in_dims)).astype(ufans_model.cfg.np_dtype)
    rows = []
    with threadpool_limits(limits=threads):
        for name, fn, params in (
            ("ufans", lambda: forward(ufans_model, x), ufans_model.num_parameters()),
            ("recurrent", lambda: recurrent_forward(recurrent_model, x), recurrent_model.num_parameters()),
        ):
            samples = _time_ms(fn, repeats, warmup)
            rows.append({
                "model": name,
                "L": length,
                "threads": threads,
                "median_ms": float(np.median(samples)),
                "p90_ms": float(np.percentile(samples, 90)),
                "params": params,
                "samples": samples,
            })
    return rows


def speedup(rows: Sequence[dict]) -> float:
    by = {r["model"]: r for r in rows}
    return by["recurrent"]["median_ms"] / by["ufans"]["median_ms"]


def write_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
