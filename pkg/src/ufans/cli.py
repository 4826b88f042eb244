"""Command-line entry point: ``ufans <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import baseline, experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .config import build, dump_kv, known_keys, load_kv, parse_overrides
from .dataio import (
    Dataset,
    FrameSequence,
    LongDepTaskSpec,
    apply_norm,
    fit_norm,
    gen_longdep,
    gen_multispeaker,
    read_frames,
    read_manifest,
    target_path_for,
    write_frames,
    write_manifest,
)
from .model import (
    UfansConfig,
    build_model,
    dependency_mask,
    empirical_dependency_span,
    forward,
    receptive_field,
    receptive_field_closed,
)
from .numerics import NonFiniteError
from .training import TrainConfig, train

log = logging.getLogger("ufans")

METRIC_COLUMNS = ("epoch", "train_mse", "valid_mse", "lr", "batch_size")


class CommandError(Exception):
    pass


def parse_int_list(text: str) -> list[int]:
    """``"3..9"``, ``"3,5,9"`` or ``"5"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def resolve(args, defaults: dict | None = None, n_key: str = "n_samplings") -> dict[str, str]:
    """Defaults, then the config file, then ``--set`` and dedicated flags."""
    values = dict(defaults or {})
    if args.config:
        values.update(load_kv(args.config))
    values.update(parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "n", None) is not None:
        values[n_key] = args.n
    return values


def check_keys(values: dict, extra=()) -> None:
    allowed = known_keys(UfansConfig, TrainConfig, LongDepTaskSpec) | set(extra)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise CommandError(f"unknown config keys: {', '.join(unknown)}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def _echo_config(out: Path, command: str, values: dict) -> None:
    (out / "config.txt").write_text(f"# resolved config for '{command}'\n" + dump_kv(values))


# ---------------------------------------------------------------------------
# train / infer


def load_manifest_dataset(path) -> Dataset:
    inputs, targets = [], []
    for p, spk in read_manifest(path):
        try:
            x = read_frames(p)
            y = read_frames(target_path_for(p))
        except (OSError, ValueError) as e:
            raise CommandError(f"cannot read training pair for {p}: {e}") from e
        if x.n_frames != y.n_frames:
            raise CommandError(f"{p}: {x.n_frames} input frames but {y.n_frames} target frames")
        spk = spk if spk is not None else x.speaker_id
        inputs.append(FrameSequence(x.frames, spk))
        targets.append(FrameSequence(y.frames, spk))
    if not inputs:
        raise CommandError(f"manifest {path} lists no utterances")
    return Dataset(inputs, targets)


def cmd_train(args) -> int:
    values = resolve(args)
    check_keys(values)
    out = _out_dir(args)
    data = load_manifest_dataset(args.manifest)
    if args.valid:
        valid = load_manifest_dataset(args.valid)
    elif len(data) > 1:
        n_valid = max(1, len(data) // 10)
        valid = Dataset(data.inputs[-n_valid:], data.targets[-n_valid:])
        data = Dataset(data.inputs[:-n_valid], data.targets[:-n_valid])
    else:
        valid = None

    in_norm = fit_norm(data.inputs)
    out_norm = fit_norm(data.targets)

    def norm(ds):
        return Dataset([apply_norm(in_norm, s) for s in ds.inputs], [apply_norm(out_norm, s) for s in ds.targets])

    speakers = [s.speaker_id for s in data.inputs if s.speaker_id is not None]
    values.setdefault("n_speakers", str(max(speakers) + 1 if speakers else 0))
    values["in_dims"] = str(data.inputs[0].dims)
    values["out_dims"] = str(data.targets[0].dims)
    model_cfg = build(UfansConfig, values)
    train_cfg = build(TrainConfig, values)
    _echo_config(out, "train", values)

    model = build_model(model_cfg)
    log.info("model: %d parameters (%.2f MB)", model.num_parameters(), model.num_bytes() / 1e6)
    rows = []

    def on_epoch(row):
        rows.append({**row, "lr": train_cfg.lr, "batch_size": train_cfg.batch_size})
        _write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)

    try:
        res = train(model, norm(data), norm(valid) if valid else None, train_cfg, on_epoch)
    except NonFiniteError as e:
        raise CommandError(f"training diverged: {e}") from e
    model.set_parameters(res.best_params)
    save_checkpoint(out / "model.ufnm", model, in_norm, out_norm)
    print(f"best {'valid' if valid else 'train'} mse {res.best_valid:.6f}; checkpoint {out / 'model.ufnm'}")
    return 0


def cmd_infer(args) -> int:
    model, in_norm, out_norm = load_checkpoint(args.checkpoint)
    seq = read_frames(args.input)
    cfg = model.cfg
    if seq.dims != cfg.in_dims:
        raise CommandError(f"input has {seq.dims} dims, checkpoint expects {cfg.in_dims}")
    spk = args.speaker
    if spk is None and cfg.n_speakers:
        spk = seq.speaker_id
    if spk is not None and not 0 <= spk < cfg.n_speakers:
        raise CommandError(f"unknown speaker id {spk} (model has {cfg.n_speakers} speakers)")
    x = in_norm.apply(seq.frames.astype(np.float64)) if in_norm else seq.frames
    y = forward(model, x.astype(cfg.np_dtype), spk).data.astype(np.float64)
    if out_norm:
        y = out_norm.invert(y)
    write_frames(args.output, FrameSequence(y.astype(np.float32), spk))
    print(f"wrote {y.shape[0]}x{y.shape[1]} frames to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# analysis commands


def rf_rows(ns) -> list[dict]:
    return [{"N": n, "S_N": receptive_field(n), "S_N_closed": receptive_field_closed(n),
             "agree": int(receptive_field(n) == receptive_field_closed(n))} for n in ns]


def cmd_rf(args) -> int:
    rows = rf_rows(parse_int_list(args.n or "3..9"))
    w = csv.DictWriter(sys.stdout, fieldnames=("N", "S_N", "S_N_closed", "agree"), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return 0 if all(r["agree"] for r in rows) else 1


def cmd_occlusion(args) -> int:
    values = resolve(args, {"n_samplings": "2", "block_channels": "8", "final_conv_channels": "8",
                            "in_dims": "4", "out_dims": "3", "dtype": "float64"})
    check_keys(values, ("length", "frame"))
    cfg = build(UfansConfig, values)
    length = int(values.get("length", 64))
    frame = int(values.get("frame", length // 2))
    model = build_model(cfg)
    measured = empirical_dependency_span(model, length, frame, inverted=True)
    analytic = dependency_mask(cfg, length, frame)
    idx = np.flatnonzero(analytic)
    print(f"N={cfg.n_samplings} L={length} output frame {frame}: S_N={receptive_field(cfg.n_samplings)}")
    print(f"analytic inputs [{idx[0]}, {idx[-1]}] ({analytic.sum()} frames); measured {measured.sum()} frames")
    ok = bool(np.array_equal(measured, analytic))
    print("agreement:", "yes" if ok else "NO")
    return 0 if ok else 1


def _task_and_models(values):
    task = build(LongDepTaskSpec, values)
    values = {**values, "in_dims": str(task.in_dims), "out_dims": str(task.out_dims)}
    return task, build(UfansConfig, values), build(TrainConfig, values), int(values["valid_utterances"])


_EXPERIMENT_EXTRA = ("valid_utterances", "ns", "speaker_offset")


def cmd_sweep_n(args) -> int:
    values = resolve(args, experiments.EXPERIMENT_DEFAULTS, n_key="ns")
    check_keys(values, _EXPERIMENT_EXTRA)
    out = _out_dir(args)
    _echo_config(out, "sweep-n", values)
    task, mcfg, tcfg, n_valid = _task_and_models(values)
    rows = experiments.sweep_n(task, parse_int_list(values["ns"]), mcfg, tcfg, n_valid)
    _write_csv(out / "sweep_n.csv", rows, ("N", "S_N", "valid_mse", "noise_floor", "ratio_to_floor"))
    mses = [r["valid_mse"] for r in rows]
    print("N,S_N,valid_mse")
    for r in rows:
        print(f"{r['N']},{r['S_N']},{r['valid_mse']:.5f}")
    print("non-increasing in N:", experiments.is_non_increasing(mses, slack=0.05))
    return 0


def cmd_ablate_skip(args) -> int:
    values = resolve(args, experiments.EXPERIMENT_DEFAULTS)
    check_keys(values, _EXPERIMENT_EXTRA)
    out = _out_dir(args)
    _echo_config(out, "ablate-skip", values)
    task, mcfg, tcfg, n_valid = _task_and_models(values)
    rows = experiments.ablate_skip(task, mcfg, tcfg, n_valid)
    _write_csv(out / "ablate_skip.csv", rows, ("skip", "N", "valid_mse", "init_valid_mse", "init_digest"))
    for r in rows:
        print(f"skip={r['skip']} valid_mse={r['valid_mse']:.5f}")
    return 0


def cmd_speakers(args) -> int:
    values = resolve(args, {**experiments.EXPERIMENT_DEFAULTS, "lag": "0", "n_samplings": "3",
                            "n_utterances": "512", "epochs": "6"})
    check_keys(values, _EXPERIMENT_EXTRA)
    out = _out_dir(args)
    _echo_config(out, "speakers", values)
    task, mcfg, tcfg, n_valid = _task_and_models(values)
    rows = experiments.speaker_study(task, mcfg, tcfg, int(values["n_speakers"]),
                                     float(values["speaker_offset"]), n_valid)
    _write_csv(out / "speakers.csv", rows, ("conditioned", "valid_mse", "noise_floor", "unconditioned_floor"))
    for r in rows:
        print(f"conditioned={r['conditioned']} valid_mse={r['valid_mse']:.5f} "
              f"(floor {r['noise_floor']:.4f}, unconditioned floor {r['unconditioned_floor']:.4f})")
    return 0


def cmd_bench(args) -> int:
    values = resolve(args)
    check_keys(values)
    out = _out_dir(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[0]
    else:
        model = build_model(build(UfansConfig, values))
    cfg = model.cfg
    hidden = baseline.matched_hidden(model.num_parameters(), cfg.in_dims, cfg.out_dims)
    rnn = baseline.build_recurrent(cfg.in_dims, cfg.out_dims, hidden, seed=cfg.seed, dtype=cfg.np_dtype)
    _echo_config(out, "bench", {**values, "recurrent_hidden": hidden, "cores": baseline.available_cores()})
    rows = []
    for length in parse_int_list(args.lengths):
        for threads in parse_int_list(args.threads):
            rows += baseline.latency_compare(model, rnn, length, args.repeats, threads)
    baseline.write_report(out / "bench.csv", rows)
    print(f"cores available: {baseline.available_cores()} (CPU wall-clock; no host/device transfer involved)")
    print(",".join(baseline.REPORT_COLUMNS) + ",speedup")
    for i in range(0, len(rows), 2):
        pair = rows[i:i + 2]
        ratio = baseline.speedup(pair)
        for r in pair:
            print(",".join(str(round(r[c], 3) if isinstance(r[c], float) else r[c]) for c in baseline.REPORT_COLUMNS)
                  + f",{ratio:.2f}")
    return 0


def cmd_make_data(args) -> int:
    """Write a synthetic lag-task corpus as UFNS files plus train/valid manifests."""
    values = resolve(args, {"n_utterances": "50", "length": "128", "lag": "4", "in_dims": "3", "out_dims": "2"})
    check_keys(values, ("valid_utterances", "n_speakers", "speaker_offset"))
    out = _out_dir(args)
    task = build(LongDepTaskSpec, values)
    n_spk = int(values.get("n_speakers", 0))
    valid_task = dataclasses.replace(task, seed=task.seed + 1, n_utterances=int(values.get("valid_utterances", 8)))
    for split, spec in (("train", task), ("valid", valid_task)):
        ds = gen_multispeaker(spec, n_spk, float(values.get("speaker_offset", 1.0))) if n_spk else gen_longdep(spec)
        entries = []
        for i, (x, y) in enumerate(zip(ds.inputs, ds.targets)):
            stem = out / f"{split}_{i:04d}"
            write_frames(f"{stem}.in.ufns", x)
            write_frames(f"{stem}.out.ufns", y)
            entries.append((f"{stem.name}.in.ufns", x.speaker_id))
        write_manifest(out / f"{split}.txt", entries)
    _echo_config(out, "make-data", values)
    print(f"wrote {task.n_utterances} training utterances to {out}")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufans", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if out:
            sp.add_argument("--out", default="runs/latest", help="output directory")

    sp = sub.add_parser("train", help="train on a manifest of .in.ufns/.out.ufns pairs")
    common(sp)
    sp.add_argument("manifest")
    sp.add_argument("--valid", help="validation manifest (default: hold out 10%%)")
    sp.add_argument("--n", help="number of down/up samplings")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="predict acoustic frames for one UFNS file")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--speaker", type=int)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("rf", help="receptive field table")
    sp.add_argument("--n", help="N, list or range such as 3..9")
    sp.set_defaults(func=cmd_rf)

    sp = sub.add_parser("occlusion", help="compare measured and analytic input dependency")
    common(sp, out=False)
    sp.add_argument("--n", help="number of down/up samplings")
    sp.set_defaults(func=cmd_occlusion)

    for name, func, helptext in (
        ("sweep-n", cmd_sweep_n, "validation MSE versus N on the lag task"),
        ("ablate-skip", cmd_ablate_skip, "with and without skip connections"),
        ("speakers", cmd_speakers, "speaker-conditioned versus unconditioned model"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--n", help="N (or list of N for sweep-n)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("bench", help="UFANS vs sequential recurrent latency")
    common(sp)
    sp.add_argument("--checkpoint", help="UFNM checkpoint (default: build from config)")
    sp.add_argument("--L", dest="lengths", default="1000", help="utterance lengths")
    sp.add_argument("--threads", default="1", help="thread counts, e.g. 1,2,4")
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("make-data", help="write a synthetic corpus and manifests")
    common(sp)
    sp.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
