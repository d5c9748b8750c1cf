"""Command line interface.

Commands: make-data, train, infer, eval, manipulate, predict-future.
Every run writes its resolved configuration next to its outputs so it
can be reproduced. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

import argparse
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import DataError, NumericalError
from .evaluation import evaluate_generator
from .forecast import forecast_labels
from .inference import stream_synthesize, synthesize_sequence
from .metrics import ClipFeatureExtractor
from .scene import (
    CLASS_NAMES,
    SceneConfig,
    default_scene_configs,
    relabel,
    render_sequence,
)
from .trainer import (
    TrainConfig,
    Trainer,
    config_from_dict,
    config_to_dict,
    generator_from_checkpoint,
)

CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}


def _write_resolved_config(out_dir, command, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w") as f:
        json.dump({"command": command, **payload}, f, indent=1, default=str)


def _frame_to_png(frame, path):
    from PIL import Image

    Image.fromarray(ds.frame_to_uint8(np.asarray(frame)), mode="RGB").save(path)


def _maybe_write_video(frames_dir, out_file):
    if shutil.which("ffmpeg") is None:
        print("notice: no video encoder found on host, keeping frames only")
        return False
    cmd = [
        "ffmpeg", "-y", "-loglevel", "error", "-framerate", "10",
        "-i", str(Path(frames_dir) / "%04d.png"),
        "-pix_fmt", "yuv420p", str(out_file),
    ]
    result = subprocess.run(cmd, capture_output=True)
    if result.returncode != 0:
        print("notice: video encoding failed, keeping frames only")
        return False
    return True


# -- commands ---------------------------------------------------------------


def cmd_make_data(args):
    out = Path(args.out)
    overrides = dict(
        num_frames=args.frames,
        height=args.size,
        width=args.size,
        max_velocity=args.max_velocity,
    )
    SceneConfig(seed=0, **overrides).validate()
    splits = {"train": args.train, "val": args.val}
    for split, count in splits.items():
        base = args.seed if split == "train" else args.seed + 1_000_003
        configs = default_scene_configs(base, count, **overrides)
        sequences = (render_sequence(c) for c in configs)
        ds.write_dataset(sequences, out / split)
        print(f"{split}: {count} sequences at {args.size}x{args.size}, T={args.frames}")
    _write_resolved_config(out, "make-data", {"args": vars(args)})
    return 0


def _load_train_config(args):
    base = config_to_dict(TrainConfig())
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
        for key, value in overrides.items():
            if key not in base:
                raise ValueError(f"unknown train config key {key!r}")
            if isinstance(base[key], dict) and isinstance(value, dict):
                base[key].update(value)
            else:
                base[key] = value
    if args.seed is not None:
        base["seed"] = args.seed
    if args.ablation is not None:
        base["ablation"] = args.ablation
    if args.batch_size is not None:
        base["batch_size"] = args.batch_size
    if args.steps is not None:
        if len(args.steps) != len(base["phases"]):
            raise ValueError(
                f"--steps needs one value per phase ({len(base['phases'])})"
            )
        for phase, steps in zip(base["phases"], args.steps):
            phase["steps"] = steps
            phase["epochs"] = 0
    return config_from_dict(base)


def cmd_train(args):
    config = _load_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sequences = ds.read_dataset(args.data).load_all()
    log_path = out / "train_log.ndjson"
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, sequences, log_path=log_path)
    else:
        trainer = Trainer(sequences, config, log_path=log_path)
    trainer.run()
    ckpt = out / "checkpoint.ckpt"
    trainer.save(ckpt)
    _write_resolved_config(out, "train", {"config": config_to_dict(config), "args": vars(args)})
    last = trainer.log[-1] if trainer.log else {}
    print(f"trained {trainer.step_index} steps, checkpoint at {ckpt}")
    if last:
        print(f"final losses: g_total={last.get('g_total'):.3f} d_image={last.get('d_image'):.3f}")
    return 0


def _check_resolution(model_config, train_config, label_map):
    expect = train_config.phases[-1].resolution
    h, w = np.asarray(label_map).shape[-2:]
    if h != expect or w != expect:
        raise DataError(
            f"source resolution {w}x{h} does not match checkpoint "
            f"resolution {expect}x{expect}"
        )


def cmd_infer(args):
    model, feature_model, train_config = generator_from_checkpoint(args.checkpoint)
    handle = ds.read_dataset(args.source)
    reader = handle.reader(args.index)
    _check_resolution(model.config, train_config, reader.label(0))
    num_frames = args.frames or reader.num_frames
    if num_frames > reader.num_frames:
        raise ValueError(
            f"requested {num_frames} frames but the source only has {reader.num_frames}"
        )
    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    stream = stream_synthesize(
        model, reader, num_frames, feature_model=feature_model, feature_seed=args.feature_seed
    )
    for t, frame in enumerate(stream):
        _frame_to_png(frame.numpy(), frames_dir / f"{t:04d}.png")
    if args.video:
        _maybe_write_video(frames_dir, out / "video.mp4")
    _write_resolved_config(out, "infer", {"args": vars(args)})
    print(f"wrote {num_frames} frames to {frames_dir}")
    return 0


def cmd_eval(args):
    model, feature_model, train_config = generator_from_checkpoint(args.checkpoint)
    sequences = ds.read_dataset(args.data).load_all()
    _check_resolution(model.config, train_config, sequences[0].labels[0])
    extractor = ClipFeatureExtractor(seed=args.extractor_seed)
    report = evaluate_generator(
        model, sequences, feature_model=feature_model, extractor=extractor, seed=args.seed
    )
    report["checkpoint"] = str(args.checkpoint)
    report["data"] = str(args.data)
    report["seed"] = args.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a") as f:  # reports append, never overwrite
        f.write(json.dumps(report) + "\n")
    print(json.dumps(report, indent=1))
    return 0


def _parse_relabel(spec):
    mapping = {}
    if not spec:
        return mapping
    for part in spec.split(","):
        if "=" not in part:
            raise ValueError(f"bad relabel entry {part!r}, expected old=new")
        old, new = part.split("=", 1)
        for name in (old, new):
            if name not in CLASS_IDS:
                raise ValueError(
                    f"unknown class {name!r}, known: {sorted(CLASS_IDS)}"
                )
        mapping[CLASS_IDS[old]] = CLASS_IDS[new]
    return mapping


def cmd_manipulate(args):
    mapping = _parse_relabel(args.relabel)
    handle = ds.read_dataset(args.source)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise DataError(f"output directory {out} is not empty")
    shutil.copytree(args.source, out, dirs_exist_ok=True)
    count = 0
    for i in range(len(handle)):
        reader = handle.reader(i)
        seq_dir = out / handle.entries[i]["id"]
        for t in range(reader.num_frames):
            new_labels = relabel(reader.label(t), mapping)
            from PIL import Image

            Image.fromarray(new_labels.astype(np.uint8), mode="L").save(
                seq_dir / "labels" / f"{t:04d}.png"
            )
            count += 1
    _write_resolved_config(out, "manipulate", {"args": vars(args)})
    print(f"rewrote {count} label maps under {out}")
    return 0


def cmd_predict_future(args):
    if args.horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {args.horizon}")
    model, feature_model, train_config = generator_from_checkpoint(args.checkpoint)
    reader = ds.read_dataset(args.source).reader(args.index)
    _check_resolution(model.config, train_config, reader.label(0))
    n_obs = args.observed
    if n_obs < 2:
        raise ValueError("need at least 2 observed frames")
    obs_labels = np.stack([reader.label(t) for t in range(n_obs)])
    obs_inst = np.stack([reader.instance(t) for t in range(n_obs)])
    future_labels, future_inst = forecast_labels(obs_labels, obs_inst, args.horizon)

    L = model.config.window
    k = min(L, n_obs)
    labels = np.concatenate([obs_labels[n_obs - k :], future_labels])
    instances = np.concatenate([obs_inst[n_obs - k :], future_inst])
    warmup = np.stack([reader.frame(t) for t in range(n_obs - k, n_obs)])
    frames = synthesize_sequence(
        model,
        labels,
        instances,
        feature_model=feature_model,
        feature_seed=args.feature_seed,
        warmup_frames=warmup,
    )
    predicted = frames[k:]
    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t in range(predicted.shape[0]):
        _frame_to_png(predicted[t].numpy(), frames_dir / f"{t:04d}.png")
    _write_resolved_config(out, "predict-future", {"args": vars(args)})
    print(f"wrote {predicted.shape[0]} predicted frames to {frames_dir}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="flowvid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--max-velocity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model on a rendered dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file overriding train config fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=["full", "no_fg_bg", "no_video_disc", "no_flow_warp"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int, nargs="+", help="per-phase step counts")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="synthesize video for a source sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--video", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="ndjson report file (appended)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extractor-seed", type=int, default=1234)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("manipulate", help="relabel classes in source maps")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--relabel", required=True, help="e.g. circle=rectangle,triangle=circle")
    p.set_defaults(func=cmd_manipulate)

    p = sub.add_parser("predict-future", help="forecast labels then synthesize")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--observed", type=int, default=2)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-seed", type=int, default=0)
    p.set_defaults(func=cmd_predict_future)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
