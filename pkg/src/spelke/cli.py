"""Command-line entry point: ``spelke {gen,train,bootstrap,infer,eval,render}``.

All commands share ``--config``, ``--seed``, ``--out`` and the model
hyperparameter overrides. Settings resolve as defaults < config file <
``SPELKE_*`` environment variables < flags, and the effective configuration
is written to ``config.txt`` in each output directory.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from . import io
from .config import ConfigError, load_config
from .evaluation import evaluate_pairs, upsample_nearest
from .features import DimensionError, NumericError
from .pipeline import segment_image
from .seeding import derive_seed
from .synthscene import generate_dataset, load_dataset, read_manifest
from .training import Checkpoint, TrainingError, bootstrap, train, write_loss_csv

log = logging.getLogger("spelke")

# flag name -> config key for the shared overrides
HYPER_FLAGS = {
    "kprop_iters": int,
    "comp_rounds": int,
    "theta": float,
    "window": int,
    "global_samples": int,
    "tau": float,
    "q_dim": int,
    "embed_dim": int,
    "k_max": int,
}


class CommandError(RuntimeError):
    pass


def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (or file for render/eval)")
    for key, kind in HYPER_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="spelke", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--agent-mode", dest="agent_mode", action="store_const", const=True)
    p.add_argument("--image-size", dest="image_size", type=int)

    for name in ("train", "bootstrap"):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a generated dataset")
        p.add_argument("--data")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--optimizer", choices=("adam", "sgd"))
        if name == "bootstrap":
            p.add_argument("--rounds", type=int)

    p = sub.add_parser("infer", parents=[common], help="segment images with a checkpoint")
    p.add_argument("--checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="single RGB PNG")
    src.add_argument("--data", help="dataset directory with a manifest")

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    p.add_argument("--gt", required=True, help="dataset directory with manifest and segments")

    p = sub.add_parser("render", parents=[common], help="color overlay of a label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--image")
    return parser


def _overrides(args):
    keys = list(HYPER_FLAGS) + [
        "seed", "out", "count", "agent_mode", "image_size", "data", "steps",
        "batch_size", "learning_rate", "optimizer", "rounds", "checkpoint",
    ]
    return {k: getattr(args, k, None) for k in keys}


def _out_dir(cfg):
    return io.ensure_dir(cfg.out)


def cmd_gen(cfg, args):
    out = _out_dir(cfg)
    manifest = generate_dataset(cfg.scene_config(), cfg.count, out, master_seed=cfg.seed)
    cfg.echo(out)
    print(manifest)
    return 0


def _load_training_set(cfg):
    if not cfg.data:
        raise CommandError("--data is required")
    if not Path(cfg.data).is_dir():
        raise CommandError(f"dataset directory not found: {cfg.data}")
    scenes = load_dataset(cfg.data)
    if not scenes:
        raise CommandError(f"dataset {cfg.data} is empty")
    return scenes


def _progress(round_index, step, loss):
    if step % 100 == 0:
        log.info("round %d step %d loss %.6f", round_index, step, loss)


def _save_round(out, ckpt):
    path = out / f"checkpoint_round{ckpt.round}.txt"
    ckpt.save(path)
    write_loss_csv(out / f"loss_round{ckpt.round}.csv", ckpt)
    print(path)
    return path


def cmd_train(cfg, args):
    scenes = _load_training_set(cfg)
    out = _out_dir(cfg)
    cfg.echo(out)
    ckpt = train(scenes, cfg.train_config(), cfg.model_config(), log=_progress)
    _save_round(out, ckpt)
    return 0


def cmd_bootstrap(cfg, args):
    scenes = _load_training_set(cfg)
    out = _out_dir(cfg)
    cfg.echo(out)
    bootstrap(
        scenes, cfg.train_config(), cfg.model_config(), log=_progress,
        on_round=lambda c: _save_round(out, c),
    )
    return 0


def _infer_one(image, params, model, seed):
    labels = segment_image(image, params, model, seed)
    return upsample_nearest(labels, image.shape[:2])


def cmd_infer(cfg, args):
    if not cfg.checkpoint:
        raise CommandError("--checkpoint is required")
    params = Checkpoint.load(cfg.checkpoint).params
    model = cfg.model_config()
    out = _out_dir(cfg)
    cfg.echo(out)
    seed = derive_seed(cfg.seed, "infer")
    if args.image:
        jobs = [(Path(args.image), Path(args.image).stem + "_labels.png")]
    elif cfg.data:
        # predictions reuse the ground-truth segment file names so eval can pair them
        jobs = [(Path(cfg.data) / r["frame0"], r["segments"]) for r in read_manifest(cfg.data)]
    else:
        raise CommandError("one of --image or --data is required")
    for src, name in jobs:
        image = io.read_rgb(src)
        labels = _infer_one(image, params, model, seed)
        io.write_labels(out / name, labels)
        overlay = Path(name).stem + "_overlay.png"
        io.write_rgb(out / overlay, io.render_overlay(labels, image))
        print(out / name)
    return 0


def cmd_eval(cfg, args):
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    if not pred_dir.is_dir():
        raise CommandError(f"prediction directory not found: {pred_dir}")
    records = read_manifest(gt_dir)
    if not records:
        raise CommandError(f"no scenes listed in {gt_dir}")
    missing = [r["segments"] for r in records if not (pred_dir / r["segments"]).exists()]
    missing += [r["segments"] for r in records if not (gt_dir / r["segments"]).exists()]
    if missing:
        raise CommandError("missing files: " + ", ".join(sorted(set(missing))))
    t0 = time.perf_counter()
    pairs = []
    for r in records:
        gt = io.read_labels(gt_dir / r["segments"])
        pred = io.read_labels(pred_dir / r["segments"])
        pairs.append((pred, gt))
    t_load = time.perf_counter()
    report = evaluate_pairs(pairs, names=[r["segments"] for r in records])
    t_score = time.perf_counter()
    report.runtime_ms = {
        "load": round(1000 * (t_load - t0), 3),
        "score": round(1000 * (t_score - t_load), 3),
    }
    out = Path(args.out) if args.out else pred_dir / "eval_report.json"
    if out.suffix != ".json":
        out = io.ensure_dir(out) / "eval_report.json"
    io.ensure_dir(out.parent)
    out.write_text(report.to_json() + "\n")
    print(f"mean mIoU {report.mean_miou:.4f} over {report.num_images - report.num_skipped} images")
    print(out)
    return 0


def cmd_render(cfg, args):
    labels = io.read_labels(args.labels)
    image = io.read_rgb(args.image) if args.image else None
    out = Path(cfg.out)
    if out.suffix != ".png":
        out = io.ensure_dir(out) / (Path(args.labels).stem + "_overlay.png")
    io.ensure_dir(out.parent)
    io.write_rgb(out, io.render_overlay(labels, image))
    print(out)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "bootstrap": cmd_bootstrap,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (
        CommandError, ConfigError, TrainingError, DimensionError, NumericError,
        io.FormatError, OSError, ValueError,
    ) as exc:
        print(f"spelke {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
