"""Frame files, normalization, and synthetic long-range / multi-speaker tasks."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"UFNS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIi")
HEADER_BYTES = _HEADER.size  # 20
STD_FLOOR = 1e-6


class FrameFormatError(ValueError):
    pass


class BadMagicError(FrameFormatError):
    pass


class UnsupportedVersionError(FrameFormatError):
    pass


class TruncatedFileError(FrameFormatError):
    pass


@dataclass
class FrameSequence:
    frames: np.ndarray  # (L, D)
    speaker_id: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (L >= 1, D), got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# "UFNS" frame files


def encode_frames(seq: FrameSequence) -> bytes:
    spk = -1 if seq.speaker_id is None else int(seq.speaker_id)
    header = _HEADER.pack(MAGIC, VERSION, seq.n_frames, seq.dims, spk)
    return header + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()


def decode_frames(buf: bytes) -> FrameSequence:
    if len(buf) < HEADER_BYTES:
        raise TruncatedFileError(f"header needs {HEADER_BYTES} bytes, file has {len(buf)}")
    magic, version, n, d, spk = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported frame file version {version}")
    expected = HEADER_BYTES + 4 * n * d
    if len(buf) != expected:
        raise TruncatedFileError(f"expected {expected} bytes for {n}x{d} frames, got {len(buf)}")
    frames = np.frombuffer(buf, dtype="<f4", offset=HEADER_BYTES).reshape(n, d).astype(np.float32)
    return FrameSequence(frames, None if spk < 0 else spk)


def write_frames(path, seq: FrameSequence) -> None:
    Path(path).write_bytes(encode_frames(seq))


def read_frames(path) -> FrameSequence:
    return decode_frames(Path(path).read_bytes())


def target_path_for(input_path) -> Path:
    """``utt.in.ufns`` -> ``utt.out.ufns``: where training targets live."""
    p = Path(input_path)
    if not p.name.endswith(".in.ufns"):
        raise ValueError(f"input frame files must end in .in.ufns: {p}")
    return p.with_name(p.name[: -len(".in.ufns")] + ".out.ufns")


def read_manifest(path) -> list[tuple[Path, int | None]]:
    """Newline-delimited paths, each optionally followed by ``\\t speaker_id``.

    Relative paths resolve against the manifest's directory.
    """
    root = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        p = Path(parts[0].strip())
        spk = int(parts[1]) if len(parts) > 1 and parts[1].strip() else None
        if len(parts) > 2:
            raise ValueError(f"{path}:{lineno}: expected 'path[\\tspeaker_id]'")
        entries.append((p if p.is_absolute() else root / p, spk))
    return entries


def write_manifest(path, entries: Sequence[tuple[Path | str, int | None]]) -> None:
    lines = [str(p) if s is None else f"{p}\t{s}" for p, s in entries]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.asarray(x).dtype, copy=False)

    def invert(self, z: np.ndarray) -> np.ndarray:
        return (z * self.std + self.mean).astype(np.asarray(z).dtype, copy=False)


def fit_norm(train: Sequence[FrameSequence] | Sequence[np.ndarray]) -> NormStats:
    if len(train) == 0:
        raise ValueError("fit_norm needs at least one sequence")
    allf = np.concatenate([np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in train])
    mean = allf.mean(axis=0)
    std = np.maximum(allf.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def apply_norm(stats: NormStats, seq: FrameSequence) -> FrameSequence:
    return FrameSequence(stats.apply(seq.frames.astype(np.float64)).astype(seq.frames.dtype), seq.speaker_id)


def invert_norm(stats: NormStats, seq: FrameSequence) -> FrameSequence:
    return FrameSequence(stats.invert(seq.frames.astype(np.float64)).astype(seq.frames.dtype), seq.speaker_id)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class LongDepTaskSpec:
    length: int = 512
    lag: int = 100
    in_dims: int = 2
    out_dims: int = 2
    noise_std: float = 0.5
    n_utterances: int = 64
    seed: int = 0
    smoothing: float = 4.0  # std (frames) of the gaussian low-pass on the inputs; 0 = white
    map_seed: int = 0  # the lag map is shared by every split drawn with the same map_seed

    def __post_init__(self):
        if not 0 <= self.lag < self.length:
            raise ValueError(f"lag must satisfy 0 <= lag < length (got lag={self.lag}, length={self.length})")
        if self.noise_std < 0 or self.n_utterances < 1 or self.in_dims < 1 or self.out_dims < 1:
            raise ValueError("noise_std must be >= 0 and counts positive")

    @property
    def noise_floor(self) -> float:
        return self.noise_std ** 2


@dataclass
class Dataset:
    inputs: list[FrameSequence]
    targets: list[FrameSequence]
    score_from: int = 0  # targets before this frame are not predictable and not scored
    noise_floor: float = 0.0
    lag_map: np.ndarray | None = None
    offsets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)


def _smooth_noise(rng: np.random.Generator, n: int, dims: int, width: float) -> np.ndarray:
    if width <= 0:
        return rng.standard_normal((n, dims))
    half = int(np.ceil(4 * width))
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    taps /= np.sqrt(np.sum(taps ** 2))  # unit output variance
    white = rng.standard_normal((n + 2 * half, dims))
    return np.stack([np.convolve(white[:, j], taps, mode="valid") for j in range(dims)], axis=1)


def lag_map(spec: LongDepTaskSpec) -> np.ndarray:
    """Fixed linear map (out_dims x in_dims) with unit-norm rows."""
    rng = np.random.default_rng([spec.map_seed, 7919])
    f = rng.standard_normal((spec.out_dims, spec.in_dims))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _lag_pairs(spec: LongDepTaskSpec, rng, f: np.ndarray):
    raw = _smooth_noise(rng, spec.length + spec.lag, spec.in_dims, spec.smoothing)
    x = raw[spec.lag:]
    signal = raw[: spec.length] @ f.T  # target t sees input frame t - lag
    noise = spec.noise_std * rng.standard_normal(signal.shape)
    return x, signal + noise


def gen_longdep(spec: LongDepTaskSpec) -> Dataset:
    """Inputs are seeded (optionally smoothed) gaussian noise; target ``t`` is
    ``f @ input[t - lag] + N(0, noise_std**2)``.

    Frames ``t < lag`` depend on history the model never sees, so
    ``score_from = lag``; on the remaining frames the best achievable MSE is
    exactly ``noise_std**2``.
    """
    f = lag_map(spec)
    rng = np.random.default_rng([spec.seed, 1])
    ins, outs = [], []
    for _ in range(spec.n_utterances):
        x, y = _lag_pairs(spec, rng, f)
        ins.append(FrameSequence(x.astype(np.float32)))
        outs.append(FrameSequence(y.astype(np.float32)))
    return Dataset(ins, outs, score_from=spec.lag, noise_floor=spec.noise_floor, lag_map=f)


def speaker_offsets(n_speakers: int, offset: float, out_dims: int) -> np.ndarray:
    """Per-speaker constant shifts, evenly spaced in [-offset, offset] (+-offset for two speakers)."""
    levels = np.linspace(-offset, offset, n_speakers) if n_speakers > 1 else np.zeros(1)
    return np.repeat(levels[:, None], out_dims, axis=1)


def unconditioned_floor(spec: LongDepTaskSpec, offsets: np.ndarray) -> float:
    """Best MSE without knowing the speaker: noise plus between-speaker variance."""
    return spec.noise_floor + float(np.mean(np.var(offsets, axis=0)))


def gen_multispeaker(spec: LongDepTaskSpec, n_speakers: int, offset: float = 1.0) -> Dataset:
    """Lag task where speaker ``s`` adds a constant offset to every target frame.

    Utterance ``i`` belongs to speaker ``i % n_speakers``.
    """
    if n_speakers < 2:
        raise ValueError("gen_multispeaker needs at least two speakers")
    f = lag_map(spec)
    offs = speaker_offsets(n_speakers, offset, spec.out_dims)
    rng = np.random.default_rng([spec.seed, 2])
    ins, outs = [], []
    for i in range(spec.n_utterances):
        s = i % n_speakers
        x, y = _lag_pairs(spec, rng, f)
        ins.append(FrameSequence(x.astype(np.float32), s))
        outs.append(FrameSequence((y + offs[s]).astype(np.float32), s))
    return Dataset(ins, outs, score_from=spec.lag, noise_floor=spec.noise_floor, lag_map=f, offsets=offs,
                   meta={"unconditioned_floor": unconditioned_floor(spec, offs)})
