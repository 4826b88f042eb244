"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The training criteria (4, 5, 7) run the same experiments as scripts/ with the
defaults in ``ufans.experiments.EXPERIMENT_DEFAULTS``; together they take
several minutes on one core.
"""
import csv
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings

from conftest import ACCEPTANCE_LINES
from helpers import central_diff, rel_err
from test_dataio import sequences
from ufans import baseline
from ufans.cli import main
from ufans.dataio import decode_frames, encode_frames
from ufans.model import UfansConfig, build_model, dependency_mask, forward, receptive_field, receptive_field_closed
from ufans.numerics import backward, mse_loss, recording

LAG = 100
NOISE_FLOOR = 0.25


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_criterion_1_receptive_field_table(report, capsys):
    t0 = time.perf_counter()
    code = main(["rf", "--n", "3..9"])
    elapsed = time.perf_counter() - t0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    table = [int(r["S_N"]) for r in rows]
    closed_ok = all(receptive_field(n) == receptive_field_closed(n) for n in range(17))
    ok = code == 0 and table == [28, 60, 124, 252, 508, 1020, 2044] and closed_ok and elapsed < 1.0
    report(1, ok, f"S_3..S_9 = {table}, closed form agrees for N=0..16: {closed_ok}, {elapsed * 1e3:.0f} ms")


def test_criterion_2_locality(report):
    length = 64
    cfg = UfansConfig(n_samplings=2, block_channels=8, final_conv_channels=8, in_dims=4, out_dims=3,
                      dropout_rate=0.2, dtype="float64", seed=0)
    model = build_model(cfg)
    base = np.random.default_rng(0).standard_normal((length, cfg.in_dims))
    ref = forward(model, base, mode="eval").data
    batch = np.repeat(base[None], length, axis=0)
    batch[np.arange(length), np.arange(length)] += 1.0
    # change[j, t]: largest change of output frame t when input frame j is perturbed
    change = np.abs(forward(model, batch, mode="eval").data - ref).max(axis=-1)
    outside_identical = inside_changed = True
    worst_inside = np.inf
    for t in range(length):
        mask = dependency_mask(cfg, length, t)
        outside_identical &= bool(np.all(change[~mask, t] == 0.0))
        inside_changed &= bool(np.all(change[mask, t] > 1e-9))
        worst_inside = min(worst_inside, change[mask, t].min())
    report(2, outside_identical and inside_changed,
           f"all {length} output frames: outside bound bit-identical={outside_identical}, "
           f"inside min change {worst_inside:.3g} > 1e-9")


def test_criterion_3_gradients(report):
    cfg = UfansConfig(n_samplings=2, block_channels=4, final_conv_channels=6, in_dims=3, out_dims=2,
                      dropout_rate=0.2, n_speakers=2, dtype="float64", seed=1)
    model = build_model(cfg)
    rng = np.random.default_rng(5)
    for h, g in model.speaker.values():
        h.data = 0.3 * rng.standard_normal(h.shape)
        g.data = 0.3 * rng.standard_normal(g.shape)
    x = rng.standard_normal((8, 3))
    target = rng.standard_normal((8, 2))

    def loss():
        return mse_loss(forward(model, x, speaker_id=0, mode="train", seed=3), target)

    with recording() as tape:
        value = loss()
    grads = backward(tape, value)
    errs = {name: rel_err(grads[p], central_diff(lambda: loss().data, p.data, h=1e-5))
            for name, p in model.named_parameters()}
    worst = max(errs, key=errs.get)
    report(3, errs[worst] < 1e-4, f"{len(errs)} parameter tensors, worst rel err {errs[worst]:.2e} ({worst})")


def test_criterion_4_dependency_length_trend(report, tmp_path):
    assert main(["sweep-n", "--n", "3,4,5,6", "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep_n.csv")
    ok = True
    parts = []
    for r in rows:
        s_n, ratio = int(r["S_N"]), float(r["valid_mse"]) / NOISE_FLOOR
        ok &= ratio <= 1.2 if s_n >= LAG else ratio >= 3.0
        parts.append(f"N={r['N']} S_N={s_n} mse/floor={ratio:.3f}")
    mses = [float(r["valid_mse"]) for r in rows]
    monotone = all(b <= a * 1.05 for a, b in zip(mses, mses[1:]))
    report(4, ok and monotone and len(rows) == 4,
           f"lag {LAG}, floor {NOISE_FLOOR}: " + "; ".join(parts) + f"; non-increasing (5% slack): {monotone}")


def test_criterion_5_skip_ablation(report, tmp_path):
    assert main(["ablate-skip", "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = {r["skip"]: r for r in read_csv(tmp_path / "ablate_skip.csv")}
    with_skip, without = float(rows["1"]["valid_mse"]), float(rows["0"]["valid_mse"])
    same_init = rows["1"]["init_digest"] == rows["0"]["init_digest"]
    report(5, without > with_skip and same_init and len(rows) == 2,
           f"N={rows['1']['N']}: mse skip={with_skip:.4f}, no-skip={without:.4f}, identical init={same_init}")


def test_criterion_6_parallelism(report):
    cores = baseline.available_cores()
    ufans = build_model(UfansConfig())
    hidden = baseline.matched_hidden(ufans.num_parameters(), 165, 193)
    rnn = baseline.build_recurrent(165, 193, hidden, seed=0)
    matched = abs(rnn.num_parameters() - ufans.num_parameters()) <= 0.2 * ufans.num_parameters()
    # pinning more BLAS threads than cores only measures oversubscription, so skip those
    by_threads = {}
    for threads in [t for t in (1, 2, 4) if t <= cores]:
        rows = baseline.latency_compare(ufans, rnn, length=1000, repeats=3, threads=threads)
        by_threads[threads] = {r["model"]: r["median_ms"] for r in rows}
    top = max(by_threads)
    ratio = by_threads[top]["recurrent"] / by_threads[top]["ufans"]
    if 4 in by_threads:
        ufans_scales = by_threads[4]["ufans"] < 0.9 * by_threads[1]["ufans"]
        rnn_flat = abs(by_threads[4]["recurrent"] - by_threads[1]["recurrent"]) <= 0.1 * by_threads[1]["recurrent"]
        scaling = f"ufans improves with cores: {ufans_scales}; recurrent flat (+-10%): {rnn_flat}"
    else:
        ufans_scales = rnn_flat = False
        scaling = "core scaling not measurable"
    timings = ", ".join(f"{t}T ufans {v['ufans']:.0f} ms / recurrent {v['recurrent']:.0f} ms"
                        for t, v in by_threads.items())
    ok = cores >= 4 and matched and ratio > 2 and ufans_scales and rnn_flat
    report(6, ok, f"{cores} core(s) available (need >= 4); params {ufans.num_parameters()} vs "
                  f"{rnn.num_parameters()}; speed-up {ratio:.1f}x at {top}T; {scaling}; {timings}")


def test_criterion_7_speaker_conditioning(report, tmp_path):
    assert main(["speakers", "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = {r["conditioned"]: r for r in read_csv(tmp_path / "speakers.csv")}
    floor = float(rows["1"]["noise_floor"])
    bound = float(rows["1"]["unconditioned_floor"])
    cond, uncond = float(rows["1"]["valid_mse"]), float(rows["0"]["valid_mse"])
    ok = cond <= 1.2 * floor and uncond >= 0.8 * bound
    report(7, ok, f"conditioned {cond:.4f} (<= {1.2 * floor:.3f}), unconditioned {uncond:.4f} "
                  f"(>= 0.8 x {bound:.3f} = {0.8 * bound:.3f})")


def test_criterion_8_determinism_and_io(report, tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--out", str(data), "--seed", "0"]) == 0
    metrics = []
    for run in ("a", "b"):
        argv = ["train", str(data / "train.txt"), "--valid", str(data / "valid.txt"), "--n", "2", "--seed", "0",
                "--set", "epochs=3", "--set", "block_channels=16", "--set", "final_conv_channels=16",
                "--out", str(tmp_path / run)]
        assert main(argv) == 0
        metrics.append((tmp_path / run / "metrics.csv").read_bytes())
    identical = metrics[0] == metrics[1]

    cases = []

    @settings(max_examples=1000, deadline=None, database=None, suppress_health_check=[HealthCheck.too_slow])
    @given(sequences())
    def round_trip(seq):
        back = decode_frames(encode_frames(seq))
        assert back.frames.tobytes() == seq.frames.tobytes() and back.speaker_id == seq.speaker_id
        cases.append(1)

    round_trip()
    report(8, identical and len(cases) >= 1000,
           f"metrics.csv identical across seeded reruns: {identical}; {len(cases)} bit-exact UFNS round trips")


def test_criterion_9_speaker_degeneracy(report):
    cfg = UfansConfig(n_samplings=4, block_channels=32, final_conv_channels=64, in_dims=165, out_dims=193, seed=2)
    plain = build_model(cfg)
    conditioned = build_model(UfansConfig(**{**cfg.to_dict(), "n_speakers": 4}))
    x = np.random.default_rng(9).standard_normal((123, 165))
    ref = forward(plain, x).data
    same = all(np.array_equal(forward(conditioned, x, speaker_id=s).data, ref) for s in range(4))
    report(9, same, "zero speaker embeddings: output bit-identical to the unconditioned forward for 4 speakers")
