"""Desk-scale probe comparison: CMCRL pretraining versus a supervised audio classifier.

Synthesizes the default paired dataset (or reuses ``--data``), trains both
models with the default config, fits linear probes on the frozen encoders and
writes ``table1.json`` plus both checkpoints into ``--out``.

    python scripts/run_table1.py --out runs/table1
"""

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from cmcrl import dataio
from cmcrl.config import RunConfig, load_config
from cmcrl.contrastive import train_classification_baseline, train_cmcrl
from cmcrl.pipeline import probe_report


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="existing dataset directory (default: synthesize into <out>/data)")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    torch.use_deterministic_algorithms(True)

    cfg = load_config(args.config).with_overrides(args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data) if args.data else out / "data"
    if not (data_dir / "manifest.json").is_file():
        d = cfg.data
        dataio.synth_dataset(data_dir, d.n_classes, d.n_per_class, d.seed, d.image_size, d.train_fraction)
    ds = dataio.load_dataset(data_dir)

    rows = {}
    for name, train in (("cmcrl", lambda: train_cmcrl(cfg, ds)),
                        ("baseline", lambda: train_classification_baseline(cfg, ds, "audio"))):
        t0 = time.time()
        result = train()
        dataio.save_checkpoint(result.checkpoint, out / f"{name}.ckpt")
        rows[name] = {**probe_report(cfg, ds, result.checkpoint), "train_seconds": round(time.time() - t0, 1)}

    (out / "table1.json").write_text(json.dumps({"config": cfg.emit(), "results": rows}, indent=2, sort_keys=True))
    print(f"{'method':<10} {'audio probe':>12} {'image probe':>12}")
    for name, r in rows.items():
        image = r.get("image_probe_test_accuracy")
        print(f"{name:<10} {r['audio_probe_test_accuracy']:>12.4f} {'-' if image is None else f'{image:.4f}':>12}")


if __name__ == "__main__":
    main()
