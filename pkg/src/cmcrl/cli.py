"""Command-line entry point: ``cmcrl <subcommand> [options]``.

Every subcommand writes into a fresh run directory (``<runs-root>/<UTC
timestamp>_<command>_seed<seed>`` unless ``--run-dir`` is given) containing
``config.json`` (resolved config with per-field origins) plus the command's
artifacts. Input datasets and checkpoints are only read.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Failures print
one line to stderr: ``error category=<category> message=<text>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .config import RunConfig, load_config
from .errors import ContractError, FormatError, MissingKeysError, NumericalError

log = logging.getLogger("cmcrl")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except (json.JSONDecodeError, ContractError, TypeError) as e:
        raise UsageError(f"invalid config {args.config}: {e}") from None
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"{sec}.seed={args.seed}" for sec in ("data", "cmcrl", "gan", "eval")]
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        return cfg.with_overrides(overrides)
    except (ContractError, TypeError) as e:
        raise UsageError(str(e)) from None


def setup_runtime(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1))
    torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(torch.float32)


def make_run_dir(args, cfg: RunConfig, seed: int) -> Path:
    if args.run_dir:
        run = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        run = Path(args.runs_root) / f"{stamp}_{args.command}_seed{seed}"
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "config.json", {**cfg.emit(), "command": args.command, "argv": args.argv})
    return run


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def load_data(path) -> dataio.PairedDataset:
    if not (Path(path) / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in dataset directory {path}")
    return dataio.load_dataset(path)


def _checkpoint(path, kind: str | None = None) -> dataio.Checkpoint:
    ckpt = dataio.load_checkpoint(path)
    if kind is not None and ckpt.meta.get("kind") != kind:
        raise ContractError(f"{path} is a {ckpt.meta.get('kind')!r} checkpoint, expected {kind!r}")
    return ckpt


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ContractError(f"output directory {out} is not empty")
    d = cfg.data
    manifest = dataio.synth_dataset(out, d.n_classes, d.n_per_class, d.seed, d.image_size, d.train_fraction)
    return {"dataset": str(out), "items": len(manifest["items"]), "classes": manifest["classes"]}


def cmd_featurize(args, cfg: RunConfig, run: Path) -> dict:
    from .contrastive import clean_audio_inputs, feature_stats

    ds = load_data(args.data)
    stats = feature_stats(ds) if cfg.cmcrl.standardize_features else None
    feats = clean_audio_inputs(ds, stats)
    dataio.write_tensor(run / "features.cmt", feats)
    report = {"shape": list(feats.shape), "ids": list(ds.ids), "labels": ds.labels.tolist(),
              "standardized": stats is not None,
              "feature_stats": stats.to_dict() if stats else None}
    write_json(run / "featurize_report.json", report)
    return {"features": str(run / "features.cmt"), "shape": list(feats.shape)}


def _train(args, cfg: RunConfig, run: Path, kind: str) -> dict:
    from .contrastive import train_classification_baseline, train_cmcrl

    ds = load_data(args.data)
    resume = _checkpoint(args.resume, kind) if args.resume else None
    if kind == "cmcrl":
        result = train_cmcrl(cfg, ds, resume=resume, stop_at=args.stop_at)
    else:
        result = train_classification_baseline(cfg, ds, args.modality, resume=resume, stop_at=args.stop_at)
    dataio.save_checkpoint(result.checkpoint, run / f"{kind}.ckpt")
    write_csv(run / "train_log.csv", result.log_rows)
    write_csv(run / "step_losses.csv", [{"step": i, "loss": v} for i, v in enumerate(result.step_losses)])
    return {"checkpoint": str(run / f"{kind}.ckpt"), "epochs_done": result.checkpoint.meta["next_epoch"],
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}


def cmd_train_cmcrl(args, cfg, run):
    return _train(args, cfg, run, "cmcrl")


def cmd_train_baseline(args, cfg, run):
    return _train(args, cfg, run, "baseline")


def cmd_probe(args, cfg: RunConfig, run: Path) -> dict:
    from .pipeline import probe_report

    report = probe_report(cfg, load_data(args.data), _checkpoint(args.checkpoint))
    write_json(run / "probe_report.json", report)
    return report


def cmd_train_gan(args, cfg: RunConfig, run: Path) -> dict:
    from .gan import train_gan

    ds = load_data(args.data)
    cmcrl_ckpt = _checkpoint(args.cmcrl_checkpoint, "cmcrl")
    resume = _checkpoint(args.resume, "gan") if args.resume else None
    result = train_gan(cfg, ds, cmcrl_ckpt, resume=resume, stop_at=args.stop_at)
    dataio.save_checkpoint(result.checkpoint, run / "gan.ckpt")
    write_csv(run / "gan_log.csv", result.log_rows)
    for it, grid in sorted(result.samples.items()):
        dataio.ppm_write(grid, run / f"samples_{it:06d}.ppm")
    return {"checkpoint": str(run / "gan.ckpt"), "iterations_done": result.checkpoint.meta["next_iteration"]}


def cmd_generate(args, cfg: RunConfig, run: Path) -> dict:
    from .contrastive import restore_cmcrl
    from .gan import condition_from_audio, generate, image_grid, restore_gan

    pair = restore_gan(_checkpoint(args.gan_checkpoint, "gan"))
    model, stats = restore_cmcrl(_checkpoint(args.cmcrl_checkpoint, "cmcrl"))
    if args.audio:
        clips = [dataio.wav_read(p) for p in args.audio]
        labels = [None] * len(clips)
    else:
        test = load_data(args.data).test
        idx = np.concatenate([np.flatnonzero(test.labels == k)[:args.per_class] for k in range(test.n_classes)])
        clips, labels = [test.audio[i] for i in idx], test.labels[idx].tolist()
    c = condition_from_audio(model.audio_encoder, clips, stats)
    images = generate(pair.generator, c, seed=cfg.eval.seed)
    n_cols = args.per_class if not args.audio else min(len(clips), 8)
    dataio.ppm_write(image_grid(images, n_cols=n_cols), run / "generated.ppm")
    for i, img in enumerate(images):
        dataio.ppm_write(img.numpy(), run / f"generated_{i:04d}.ppm")
    write_json(run / "generate_report.json", {"n_images": len(images), "labels": labels, "seed": cfg.eval.seed})
    return {"grid": str(run / "generated.ppm"), "n_images": len(images)}


def cmd_eval(args, cfg: RunConfig, run: Path) -> dict:
    from .pipeline import evaluate_gan

    report = evaluate_gan(cfg, load_data(args.data), _checkpoint(args.cmcrl_checkpoint, "cmcrl"),
                          _checkpoint(args.gan_checkpoint, "gan"))
    write_json(run / "eval_report.json", report)
    return report


COMMANDS = {
    "featurize": cmd_featurize,
    "train-cmcrl": cmd_train_cmcrl,
    "train-baseline": cmd_train_baseline,
    "probe": cmd_probe,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (a bare config or an emitted config.json)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field; VALUE is parsed as JSON (repeatable)")
    common.add_argument("--seed", type=int, help="set every seed field in the config")
    common.add_argument("--threads", type=int, help="torch intra-op threads (0 = all cores)")
    common.add_argument("--run-dir", help="explicit output directory")
    common.add_argument("--runs-root", default="runs", help="parent of auto-named run directories")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cmcrl", description="Cross-modal contrastive audio-to-image pipeline")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic paired dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("featurize", parents=[common], help="audio features for every clip of a dataset")
    s.add_argument("--data", required=True)

    for name, hlp in (("train-cmcrl", "contrastive pretraining"), ("train-baseline", "classification baseline")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--data", required=True)
        s.add_argument("--resume", help="checkpoint to continue from")
        s.add_argument("--stop-at", type=int, help="stop before this epoch (checkpoint stays resumable)")
        if name == "train-baseline":
            s.add_argument("--modality", choices=("audio", "image"), default="audio")

    s = sub.add_parser("probe", parents=[common], help="linear-probe accuracies of a checkpoint's encoders")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)

    s = sub.add_parser("train-gan", parents=[common], help="train the audio-conditioned GAN")
    s.add_argument("--data", required=True)
    s.add_argument("--cmcrl-checkpoint", required=True, help="pretrained CMCRL checkpoint (required)")
    s.add_argument("--resume")
    s.add_argument("--stop-at", type=int, help="stop before this iteration")

    s = sub.add_parser("generate", parents=[common], help="generate images from audio")
    s.add_argument("--gan-checkpoint", required=True)
    s.add_argument("--cmcrl-checkpoint", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="use test-split clips of this dataset")
    src.add_argument("--audio", nargs="+", help="WAV files to condition on")
    s.add_argument("--per-class", type=int, default=4)

    s = sub.add_parser("eval", parents=[common], help="proxy-FID / proxy-IS / generated accuracy report")
    s.add_argument("--data", required=True)
    s.add_argument("--cmcrl-checkpoint", required=True)
    s.add_argument("--gan-checkpoint", required=True)
    return p


CATEGORIES = (
    (MissingKeysError, "checkpoint"),
    (FormatError, "format"),
    (NumericalError, "numerical"),
    (ContractError, "contract"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def _fail(category: str, message: str, code: int) -> int:
    one_line = " ".join(str(message).split())
    print(f"error category={category} message={one_line}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command in ("train-gan",) and not Path(args.cmcrl_checkpoint).is_file():
            raise UsageError(f"train-gan needs an existing CMCRL checkpoint: {args.cmcrl_checkpoint}")
    except UsageError as e:
        return _fail("usage", e, 2)
    try:
        setup_runtime(cfg)
        if args.command == "synth-data":
            result = cmd_synth_data(args, cfg)
        else:
            seed = cfg.gan.seed if args.command in ("train-gan", "generate", "eval") else cfg.cmcrl.seed
            run = make_run_dir(args, cfg, seed)
            result = COMMANDS[args.command](args, cfg, run)
            result = {"run_dir": str(run), **result}
    except Exception as e:  # noqa: BLE001 - every failure becomes one categorized line
        for cls, category in CATEGORIES:
            if isinstance(e, cls):
                return _fail(category, e, 1)
        return _fail("internal", f"{type(e).__name__}: {e}", 1)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
