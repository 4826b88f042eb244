"""The U-shaped fully-parallel acoustic model and its dependency calculus."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import layers as L
from .numerics import (
    ShapeError,
    Tensor,
    crop_frames,
    pad_frames,
    take_row,
    tanh,
    transpose_last,
)


@dataclass(frozen=True)
class UfansConfig:
    n_samplings: int = 9
    block_channels: int = 256
    final_conv_channels: int = 512
    kernel_width: int = 3
    in_dims: int = 165
    out_dims: int = 193
    dropout_rate: float = 0.2
    n_speakers: int = 0
    skip_connections: bool = True
    seed: int = 0
    dtype: str = "float32"
    init_gain: float = 2.5  # scales the glorot limit of every gated conv; 1.0 starves the deep path

    def __post_init__(self):
        problems = []
        if self.n_samplings < 1:
            problems.append(f"n_samplings must be >= 1 (got {self.n_samplings})")
        if self.block_channels < 2 or self.block_channels % 2:
            problems.append(f"block_channels must be even and positive (got {self.block_channels})")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            problems.append(f"kernel_width must be odd (got {self.kernel_width})")
        if self.final_conv_channels < 1 or self.in_dims < 1 or self.out_dims < 1:
            problems.append("final_conv_channels, in_dims and out_dims must be positive")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must be in [0, 1) (got {self.dropout_rate})")
        if self.n_speakers < 0:
            problems.append(f"n_speakers must be >= 0 (got {self.n_speakers})")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64 (got {self.dtype!r})")
        if problems:
            raise ValueError("invalid UfansConfig: " + "; ".join(problems))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UfansConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown UfansConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PaddingPlan:
    length: int
    padded_length: int

    @property
    def pad_right(self) -> int:
        return self.padded_length - self.length


def plan_padding(length: int, n_samplings: int) -> PaddingPlan:
    """Right-pad to the smallest multiple of ``2**n_samplings``."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    block = 2 ** n_samplings
    return PaddingPlan(length, -(-length // block) * block)


def receptive_field(n: int) -> int:
    """Frames feeding one output frame after ``n`` down/up samplings, by iteration."""
    if n < 0:
        raise ValueError("n must be >= 0")
    s = 0
    for _ in range(n):
        s = 2 * (s + 2)
    return s


def receptive_field_closed(n: int) -> int:
    if n < 0:
        raise ValueError("n must be >= 0")
    return 2 ** (n + 2) - 4


class UfansModel:
    """Parameters of a built model, plus the topology they implement.

    Parameter tensors are listed in a fixed declaration order; the checkpoint
    format and the optimizer both rely on it.
    """

    def __init__(self, cfg: UfansConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        c, kw, n = cfg.block_channels, cfg.kernel_width, cfg.n_samplings
        self.in_proj = L.init_conv1d(rng, cfg.in_dims, c, 1, dt, "in_proj")
        gain = cfg.init_gain
        self.down = [L.init_conv1d(rng, c, 2 * c, kw, dt, f"down{i}", gain) for i in range(1, n + 1)]
        self.bottleneck = L.init_conv1d(rng, c, 2 * c, kw, dt, "bottleneck", gain)
        # expansive stages in execution order: level n-1 first, level 0 last
        self.up = [L.init_conv_transpose1d(rng, c, c, dt, f"up{i}.upsample") for i in range(n, 0, -1)]
        self.up_conv = [L.init_conv1d(rng, c, 2 * c, kw, dt, f"up{i}.conv", gain) for i in range(n, 0, -1)]
        self.head_conv = L.init_conv1d(rng, c, cfg.final_conv_channels, kw, dt, "head.conv")
        self.head_dense = L.init_dense(rng, cfg.final_conv_channels, cfg.out_dims, dt, "head.dense")
        self.speaker: dict[str, tuple[Tensor, Tensor]] = {}
        if cfg.n_speakers:
            from .numerics import parameter

            for gate in self.gate_names():
                self.speaker[gate] = (
                    parameter(np.zeros((cfg.n_speakers, c), dt), f"{gate}.h_spk"),
                    parameter(np.zeros((cfg.n_speakers, c), dt), f"{gate}.g_spk"),
                )

    def gate_names(self) -> list[str]:
        n = self.cfg.n_samplings
        return [f"down{i}" for i in range(1, n + 1)] + ["bottleneck"] + [f"up{i}" for i in range(n, 0, -1)]

    def topology(self) -> list[str]:
        """Block sequence along the U, e.g. ``A, pool, A, pool, bottleneck, up, D, up, D, final``."""
        n = self.cfg.n_samplings
        return ["A", "pool"] * n + ["bottleneck"] + ["up", "D"] * n + ["final"]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from ((t.name, t) for t in self.parameters())

    def parameters(self) -> list[Tensor]:
        ps = [self.in_proj.kernel, self.in_proj.bias]
        for conv in self.down:
            ps += [conv.kernel, conv.bias]
        ps += [self.bottleneck.kernel, self.bottleneck.bias]
        for up, conv in zip(self.up, self.up_conv):
            ps += [up.kernel, up.bias, conv.kernel, conv.bias]
        ps += [self.head_conv.kernel, self.head_conv.bias, self.head_dense.weight, self.head_dense.bias]
        for gate in self.gate_names():
            if gate in self.speaker:
                ps += list(self.speaker[gate])
        return ps

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def num_bytes(self) -> int:
        return sum(p.data.nbytes for p in self.parameters())

    def set_parameters(self, arrays) -> None:
        ps = self.parameters()
        if len(arrays) != len(ps):
            raise ValueError(f"expected {len(ps)} arrays, got {len(arrays)}")
        for p, a in zip(ps, arrays):
            a = np.asarray(a, dtype=p.data.dtype)
            if a.shape != p.shape:
                raise ShapeError(f"{p.name}: expected shape {p.shape}, got {a.shape}")
            p.data = a


def build_model(cfg: UfansConfig) -> UfansModel:
    return UfansModel(cfg)


def _gate(model: UfansModel, name: str, conv: L.Conv1dParams, x: Tensor, speaker_id: int | None) -> Tensor:
    p1, p2 = L.split_channels(L.conv1d(x, conv))
    if speaker_id is None:
        return L.gated_activation(p1, p2)
    h, g = model.speaker[name]
    return L.gated_activation(p1, p2, take_row(h, speaker_id), take_row(g, speaker_id))


def forward(
    model: UfansModel,
    features,
    speaker_id: int | None = None,
    mode: str = "eval",
    seed: int = 0,
) -> Tensor:
    """Map ``(..., frames, in_dims)`` features to ``(..., frames, out_dims)``.

    Frames are right-padded to a multiple of ``2**n_samplings`` and the
    output is cropped back, so any length works. ``seed`` drives dropout in
    train mode.
    """
    cfg = model.cfg
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(getattr(features, "frames", features), dtype=cfg.np_dtype))
    if features.ndim < 2 or features.shape[-1] != cfg.in_dims:
        raise ShapeError(f"forward: expected (..., frames, {cfg.in_dims}) features, got {features.shape}")
    if speaker_id is not None:
        if not cfg.n_speakers:
            raise ValueError("speaker_id given but the model has no speaker embeddings")
        if not 0 <= speaker_id < cfg.n_speakers:
            raise ValueError(f"speaker_id {speaker_id} out of range for {cfg.n_speakers} speakers")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    n = cfg.n_samplings
    plan = plan_padding(features.shape[-2], n)
    x = pad_frames(transpose_last(features), plan.pad_right)
    x = L.conv1d(x, model.in_proj)

    skips = []
    for i, conv in enumerate(model.down, start=1):
        a = _gate(model, f"down{i}", conv, x, speaker_id)
        skips.append(a)
        x = L.avg_pool1d(a)
    x = _gate(model, "bottleneck", model.bottleneck, x, speaker_id)

    for stage, (up, conv) in enumerate(zip(model.up, model.up_conv)):
        level = n - stage
        u = L.conv_transpose1d(x, up)
        s = L.add(u, skips[level - 1]) if cfg.skip_connections else u
        s = L.dropout(s, L.DropoutSpec(cfg.dropout_rate, seed * 1009 + stage, mode))
        x = _gate(model, f"up{level}", conv, s, speaker_id)

    h = tanh(L.conv1d(x, model.head_conv))
    y = L.dense(transpose_last(h), model.head_dense)
    return crop_frames(y, 0, plan.length, axis=-2)


# ---------------------------------------------------------------------------
# dependency analysis


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return mask
    out = mask.copy()
    for s in range(1, r + 1):
        out[s:] |= mask[:-s]
        out[:-s] |= mask[s:]
    return out


def dependency_mask(cfg: UfansConfig, length: int, out_frame: int) -> np.ndarray:
    """Boolean mask of input frames that can structurally influence ``out_frame``.

    Traces the layer graph backwards; exact for generic (nonzero) weights.
    """
    if not 0 <= out_frame < length:
        raise IndexError(f"frame {out_frame} out of range for length {length}")
    n, r = cfg.n_samplings, (cfg.kernel_width - 1) // 2
    plan = plan_padding(length, n)
    lens = [plan.padded_length >> i for i in range(n + 1)]

    def through_down_block(mask_a: np.ndarray) -> np.ndarray:
        # gated conv output at some level -> its input at the same level
        return _dilate(mask_a, r)

    def pool_back(mask_x: np.ndarray) -> np.ndarray:
        return np.repeat(mask_x, 2)

    def a_to_input(level: int, mask_a: np.ndarray) -> np.ndarray:
        # a_level lives at resolution level-1; returns mask over padded input frames
        m = through_down_block(mask_a)
        for lv in range(level - 1, 0, -1):
            m = through_down_block(pool_back(m))
        return m

    def x_to_input(level: int, mask_x: np.ndarray) -> np.ndarray:
        if level == 0:
            return mask_x
        return a_to_input(level, pool_back(mask_x))

    def e_to_input(level: int, mask_e: np.ndarray) -> np.ndarray:
        # e_level: output of the expansive gate at resolution `level` (e_n is the bottleneck)
        s = _dilate(mask_e, r)
        if level == n:
            return x_to_input(n, s)
        up_src = s.reshape(-1, 2).any(axis=1)
        total = e_to_input(level + 1, up_src)
        if cfg.skip_connections:
            total = total | a_to_input(level + 1, s)
        return total

    out = np.zeros(lens[0], dtype=bool)
    out[out_frame] = True
    m = e_to_input(0, _dilate(out, r))
    return m[:length]


def dependency_bounds(cfg: UfansConfig, length: int, out_frame: int) -> tuple[int, int]:
    idx = np.flatnonzero(dependency_mask(cfg, length, out_frame))
    return int(idx[0]), int(idx[-1])


def empirical_dependency_span(
    model: UfansModel,
    length: int,
    frame: int,
    magnitude: float = 1.0,
    inverted: bool = False,
    tol: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Measure dependency by perturbation on a random input, in eval mode.

    By default perturbs input ``frame`` and returns the boolean mask of output
    frames that changed by more than ``tol``. With ``inverted=True`` it
    instead returns which input frames, when perturbed, change output
    ``frame``. ``mask.sum()`` is the span.
    """
    if not 0 <= frame < length:
        raise IndexError(f"frame {frame} out of range for length {length}")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((length, cfg.in_dims)).astype(cfg.np_dtype)
    ref = forward(model, base).data
    if not inverted:
        probe = base.copy()
        probe[frame] += magnitude
        diff = np.abs(forward(model, probe).data - ref).max(axis=-1)
        return diff > tol
    batch = np.repeat(base[None], length, axis=0)
    batch[np.arange(length), np.arange(length)] += magnitude
    out = forward(model, batch).data
    diff = np.abs(out[:, frame, :] - ref[frame]).max(axis=-1)
    return diff > tol
