"""Command-line surface: corpus synthesis, two-stage training, streaming
detection, evaluation, experiment sweeps, and a per-module latency profiler.

Exit codes: 0 success, 2 usage, 3 data error, 4 checkpoint error.
The LMDF_SEED environment variable overrides configured seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import lstm as lstm_mod
from . import mcnn as mcnn_mod
from . import synthetic, training
from .errors import CheckpointError, DataValidationError, LMDFError
from .patches import FacialShape

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

SWEEP_KINDS = ("noise", "granularity", "dimension", "sampling")


def _seed_override(seed: int) -> int:
    env = os.environ.get("LMDF_SEED")
    return int(env) if env else seed


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------

def _frame_source(path):
    """Yield uint8 frames from a raw stream file or an image directory."""
    path = Path(path)
    if path.is_dir():
        names = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not names:
            raise DataValidationError(f"no image files in {path}")
        from PIL import Image

        def gen():
            for p in names:
                yield np.asarray(Image.open(p))
        first = np.asarray(Image.open(names[0]))
        return gen(), first.shape[1], first.shape[0], len(names)
    w, h, c, t = data_mod.read_frame_stream_header(path)
    return data_mod.iter_frame_stream(path), w, h, t


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = synthetic.SyntheticConfig(
        personas=args.personas, clips_per_persona=args.clips_per_persona,
        frames_per_clip=args.frames_per_clip, frame_size=args.frame_size,
        scenario=args.scenario, noise_level=args.noise,
        seed=_seed_override(args.seed))
    clips = synthetic.synth_generate(config)
    out = Path(args.out)
    data_mod.write_corpus(out, clips)
    from .checkpoint import write_manifest
    write_manifest(out / "corpus.manifest", {
        "personas": config.personas, "clips_per_persona": config.clips_per_persona,
        "frames_per_clip": config.frames_per_clip, "frame_size": config.frame_size,
        "scenario": config.scenario, "noise_level": config.noise_level,
        "seed": config.seed, "data_hash": data_mod.content_hash(clips),
    })
    frames = sum(c.length for c in clips)
    drowsy = sum(int(c.labels.sum()) for c in clips)
    print(f"wrote {len(clips)} clips / {frames} frames to {out} "
          f"({drowsy / frames:.1%} drowsy)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    clips = data_mod.load_corpus(args.data)
    if args.config:
        config = training.config_from_file(args.config)
    else:
        config = training.TrainConfig()
    config = replace(config, seed=_seed_override(config.seed))
    summary = training.two_stage_train(clips, config, out_dir=args.out,
                                       stages=args.stage)
    last_train = [m for m in summary["mcnn_metrics"] if m["split"] == "train"][-1]
    print(f"stage 1: {len(summary['mcnn_metrics'])} metric rows, "
          f"final train accuracy {last_train['accuracy']:.3f}")
    if args.stage != "1":
        print(f"stage 2: MCNN-only frame accuracy {summary['mcnn_only']['accuracy']:.3f}, "
              f"MCNN+LSTM {summary['mcnn_lstm']['accuracy']:.3f}")
        print(f"checkpoint: {Path(args.out) / 'detector.lmdf'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def cmd_detect(args) -> int:
    model, head, _ = training.load_detector(args.model)
    if head is None:
        raise CheckpointError(f"checkpoint {args.model} has no temporal head")
    frames, w, h, n_frames = _frame_source(args.frames)
    shapes = data_mod.read_landmark_track(args.landmarks)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        state = head.fresh_state()
        in_gap = False
        for t, frame in enumerate(frames):
            t_start = time.perf_counter()
            if t >= shapes.shape[0]:
                raise DataValidationError(
                    f"landmark track ended at frame {shapes.shape[0]} "
                    f"but frames continue (frame {t})")
            shape = FacialShape(shapes[t], frame_index=t)
            if shape.is_sentinel:
                if args.state_reset_on_gap and not in_gap:
                    state.reset()
                in_gap = True
            else:
                in_gap = False
            patches = training.patches_for_frame(frame, shape)
            rep, _ = mcnn_mod.mcnn_forward(model, patches[None])
            h_top = lstm_mod.stack_step(head, state, rep[0])
            probs, y = lstm_mod.predict(head, h_top)
            latency_ms = (time.perf_counter() - t_start) * 1000.0
            out.write(f"{t} {y} {probs[1]:.6f} {latency_ms:.3f}\n")
            out.flush()
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _format_report(result: dict, title: str) -> str:
    conf = result["confusion"]
    lines = [f"{title}",
             f"frames: {result['frames']}",
             f"accuracy: {result['accuracy']:.4f}",
             "confusion (rows=truth, cols=pred):",
             f"  normal  {conf[0, 0]:8d} {conf[0, 1]:8d}",
             f"  drowsy  {conf[1, 0]:8d} {conf[1, 1]:8d}"]
    for scenario, acc in sorted(result["per_scenario"].items()):
        lines.append(f"scenario {scenario}: {acc:.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model, head, _ = training.load_detector(args.model)
    clips = data_mod.load_corpus(args.clips)
    reps = training.extract_representations(model, clips)
    if args.mcnn_only or head is None:
        result = training.evaluate_mcnn_frames(model, reps, clips)
        report = _format_report(result, "MCNN-only frame evaluation")
    else:
        result = training.evaluate_temporal(head, reps, clips)
        report = _format_report(result, "MCNN+LSTM frame evaluation")
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _parse_kv(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _sweep_train_config(entries: dict[str, str], seed: int) -> training.TrainConfig:
    from dataclasses import fields
    known = {f.name for f in fields(training.TrainConfig)}
    overrides = {}
    for key, raw in entries.items():
        if key in known:
            default = getattr(training.TrainConfig(), key)
            overrides[key] = training._coerce(raw, default)
    overrides["seed"] = seed
    return training.TrainConfig(**overrides)


def cmd_sweep(args) -> int:
    if args.kind not in SWEEP_KINDS:
        raise DataValidationError(f"unknown sweep kind {args.kind!r}")
    entries = _parse_kv(args.config)
    if "corpus" not in entries:
        raise DataValidationError("sweep config must name a corpus=DIR")
    seed = _seed_override(int(entries.get("seed", "0")))
    config = _sweep_train_config(entries, seed)
    clips = data_mod.load_corpus(entries["corpus"])
    train_clips, test_clips = training.split_clips(clips, config.test_fraction, seed)
    clips_by_id = {c.clip_id: c for c in clips}
    test_samples = data_mod.sample_static_set(
        test_clips, config.static_interval, np.random.default_rng(seed + 1))

    rows: list[tuple[str, float, int, int]] = []
    if args.kind == "noise":
        sigmas = [float(s) for s in entries.get("sigmas", "0,2,5,10").split(",")]
        if entries.get("model"):
            model, _, _ = training.load_detector(entries["model"])
            steps = 0
        else:
            model, _ = training.train_mcnn(train_clips, config)
            steps = config.mcnn_steps
        for sigma in sigmas:
            _, acc = training.evaluate_static(model, clips_by_id, test_samples,
                                              sigma=sigma, seed=seed)
            rows.append((f"{sigma:g}", acc, steps, seed))
    elif args.kind == "granularity":
        masks = entries.get("masks", "global,parts,locals,all").split(",")
        for mask in masks:
            cfg = replace(config, path_mask=mask.strip())
            model, _ = training.train_mcnn(train_clips, cfg)
            _, acc = training.evaluate_static(model, clips_by_id, test_samples, seed=seed)
            rows.append((mask.strip(), acc, cfg.mcnn_steps, seed))
    elif args.kind == "dimension":
        dims = [int(d) for d in entries.get("dims", "64,128,256,512").split(",")]
        for dim in dims:
            cfg = replace(config, repr_dim=dim)
            model, _ = training.train_mcnn(train_clips, cfg)
            _, acc = training.evaluate_static(model, clips_by_id, test_samples, seed=seed)
            rows.append((str(dim), acc, cfg.mcnn_steps, seed))
    else:  # sampling
        methods = entries.get("methods", "aligned,specific,uniform").split(",")
        for method in methods:
            cfg = replace(config, sampling_method=method.strip())
            model, _ = training.train_mcnn(train_clips, cfg)
            _, acc = training.evaluate_static(model, clips_by_id, test_samples,
                                              method=method.strip(), seed=seed)
            rows.append((method.strip(), acc, cfg.mcnn_steps, seed))

    out = Path(args.out)
    manifest_ref = Path(str(out) + ".manifest")
    from .checkpoint import write_manifest
    write_manifest(manifest_ref, {
        "sweep_kind": args.kind, "seed": seed,
        "corpus": entries["corpus"], "data_hash": data_mod.content_hash(clips),
        **{f"config_{k}": v for k, v in entries.items()},
    })
    lines = [f"# manifest={manifest_ref}", "condition,accuracy,steps,seed"]
    lines += [f"{c},{a:.6f},{s},{sd}" for c, a, s, sd in rows]
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def cmd_profile(args) -> int:
    model, head, _ = training.load_detector(args.model)
    if head is None:
        raise CheckpointError(f"checkpoint {args.model} has no temporal head")
    frames, w, h, n_frames = _frame_source(args.frames)
    shapes = data_mod.read_landmark_track(args.landmarks)
    sums = {"mg": 0.0, "cnn": 0.0, "lstm": 0.0, "total": 0.0}
    state = head.fresh_state()
    count = 0
    sink = []
    for t, frame in enumerate(frames):
        t0 = time.perf_counter()
        shape = FacialShape(shapes[t], frame_index=t)
        t1 = time.perf_counter()
        patches = training.patches_for_frame(frame, shape)
        t2 = time.perf_counter()
        rep, _ = mcnn_mod.mcnn_forward(model, patches[None])
        t3 = time.perf_counter()
        h_top = lstm_mod.stack_step(head, state, rep[0])
        probs, y = lstm_mod.predict(head, h_top)
        t4 = time.perf_counter()
        sink.append(f"{t} {y} {probs[1]:.6f}")
        t5 = time.perf_counter()
        sums["mg"] += t2 - t1
        sums["cnn"] += t3 - t2
        sums["lstm"] += t4 - t3
        sums["total"] += t5 - t0
        count += 1
    if count == 0:
        raise DataValidationError("no frames to profile")
    mg = 1000.0 * sums["mg"] / count
    cnn = 1000.0 * sums["cnn"] / count
    lstm_ms = 1000.0 * sums["lstm"] / count
    total = 1000.0 * sums["total"] / count
    others = total - mg - cnn - lstm_ms  # decode, writing, bookkeeping
    fps = 1000.0 / total
    table = [
        f"frames: {count}  resolution: {w}x{h}",
        f"{'module':<10}{'mean ms':>10}",
        f"{'Mg':<10}{mg:>10.3f}",
        f"{'CNN':<10}{cnn:>10.3f}",
        f"{'LSTMs':<10}{lstm_ms:>10.3f}",
        f"{'Others':<10}{others:>10.3f}",
        f"{'Total':<10}{total:>10.3f}",
        f"fps: {fps:.2f}",
    ]
    print("\n".join(table))
    if args.out:
        manifest_ref = Path(str(args.out) + ".manifest")
        from .checkpoint import write_manifest
        write_manifest(manifest_ref, {
            "model": str(args.model), "frames": str(args.frames),
            "resolution": f"{w}x{h}", "frame_count": count,
        })
        csv = (f"# manifest={manifest_ref}\n"
               "mg_ms,cnn_ms,lstm_ms,others_ms,total_ms,fps,frames,width,height\n"
               f"{mg:.3f},{cnn:.3f},{lstm_ms:.3f},{others:.3f},{total:.3f},"
               f"{fps:.2f},{count},{w},{h}\n")
        Path(args.out).write_text(csv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmdf",
        description="Driver drowsiness detection: multi-granularity CNN + LSTM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--personas", type=int, default=12)
    p.add_argument("--clips-per-persona", type=int, default=3)
    p.add_argument("--frames-per-clip", type=int, default=90)
    p.add_argument("--frame-size", type=int, default=192)
    p.add_argument("--scenario", default="day", choices=("day", "night"))
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--stage", default="both", choices=("1", "2", "both"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="streaming per-frame detection")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--state-reset-on-gap", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="frame-level accuracy on labeled clips")
    p.add_argument("--model", required=True)
    p.add_argument("--clips", required=True)
    p.add_argument("--mcnn-only", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="experiment sweeps (noise/granularity/dimension/sampling)")
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("profile", help="per-module latency breakdown")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataValidationError, LMDFError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
