"""End-to-end stages shared by the CLI, the experiment scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .augment import derive_rng
from .config import RunConfig
from .contrastive import clean_audio_inputs, clean_image_inputs, restore_baseline, restore_cmcrl
from .dataio import Checkpoint, PairedDataset
from .gan import Generator, generate, prepare_gan_data, restore_gan
from .probe import LinearProbe, extract_features, fit_linear_probe, linear_probe


def probe_report(cfg: RunConfig, dataset: PairedDataset, ckpt: Checkpoint) -> dict:
    """Linear-probe accuracies of the frozen encoder(s) in a CMCRL or baseline checkpoint."""
    train, test = dataset.train, dataset.test
    k = dataset.n_classes
    report = {"checkpoint_kind": ckpt.meta["kind"]}
    if ckpt.meta["kind"] == "cmcrl":
        model, stats = restore_cmcrl(ckpt)
        encoders = {"audio": model.audio_encoder, "image": model.image_encoder}
    elif ckpt.meta["kind"] == "baseline":
        model, stats = restore_baseline(ckpt)
        encoders = {ckpt.meta["modality"]: model.encoder}
        x = (clean_audio_inputs(test, stats) if ckpt.meta["modality"] == "audio"
             else clean_image_inputs(test, cfg.data.image_size))
        with torch.no_grad():
            pred = model(torch.from_numpy(x).to(torch.get_default_dtype())).argmax(1).numpy()
        report["end_to_end_test_accuracy"] = metrics.accuracy(pred, test.labels)
    else:
        raise ValueError(f"cannot probe a {ckpt.meta['kind']!r} checkpoint")
    for modality, enc in encoders.items():
        if modality == "audio":
            x_train, x_test = clean_audio_inputs(train, stats), clean_audio_inputs(test, stats)
        else:
            x_train = clean_image_inputs(train, cfg.data.image_size)
            x_test = clean_image_inputs(test, cfg.data.image_size)
        res = linear_probe(enc, x_train, train.labels, x_test, test.labels, k, cfg.probe)
        report[f"{modality}_probe_train_accuracy"] = res.train_accuracy
        report[f"{modality}_probe_test_accuracy"] = res.test_accuracy
    return report


@dataclass
class ImageJudge:
    """Frozen CMCRL image encoder plus a linear probe fitted on real training images."""

    encoder: torch.nn.Module
    probe: LinearProbe
    real_test_accuracy: float

    def features(self, images) -> np.ndarray:
        return extract_features(self.encoder, np.asarray(images, dtype=np.float32))

    def predict_proba(self, images) -> np.ndarray:
        return self.probe.predict_proba(self.features(images))

    def classify(self, images) -> np.ndarray:
        return self.probe.predict(self.features(images))


def build_judge(cfg: RunConfig, dataset: PairedDataset, cmcrl_ckpt: Checkpoint) -> ImageJudge:
    model, _ = restore_cmcrl(cmcrl_ckpt)
    enc = model.image_encoder
    train, test = dataset.train, dataset.test
    x_train = clean_image_inputs(train, cfg.data.image_size)
    probe = fit_linear_probe(extract_features(enc, x_train), train.labels, dataset.n_classes, cfg.probe)
    x_test = clean_image_inputs(test, cfg.data.image_size)
    return ImageJudge(enc, probe, probe.accuracy(extract_features(enc, x_test), test.labels))


def stratified_indices(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """``n`` indices whose class mix follows ``labels`` for any prefix length.

    Each class is shuffled, then classes are interleaved by fractional rank,
    so a generated set of any size matches the real set's class proportions.
    """
    labels = np.asarray(labels)
    rng = derive_rng(seed, 6)
    keys = np.empty(len(labels))
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        keys[rng.permutation(members)] = (np.arange(len(members)) + 0.5) / len(members)
    order = np.lexsort((labels, keys))
    return order[np.arange(n) % len(order)]


class GANEvaluator:
    """Caches real features and audio conditions so several generators can be scored cheaply."""

    def __init__(self, cfg: RunConfig, dataset: PairedDataset, cmcrl_ckpt: Checkpoint):
        self.cfg = cfg
        self.judge = build_judge(cfg, dataset, cmcrl_ckpt)
        model, stats = restore_cmcrl(cmcrl_ckpt)
        size = cfg.data.image_size
        self.train = prepare_gan_data(dataset.train, model.audio_encoder, stats, size)
        self.test = prepare_gan_data(dataset.test, model.audio_encoder, stats, size)
        self.real_features = self.judge.features(clean_image_inputs(dataset.train, size))

    def _generated(self, g: Generator, data, n: int, seed: int):
        idx = stratified_indices(data.labels, n, seed)
        return generate(g, data.conditions[idx], seed=seed).numpy(), data.labels[idx]

    def proxy_frechet(self, g: Generator) -> float:
        imgs, _ = self._generated(g, self.train, self.cfg.eval.n_generated, self.cfg.eval.seed)
        return metrics.frechet_distance(self.real_features, self.judge.features(imgs))

    def report(self, g: Generator) -> dict:
        e = self.cfg.eval
        imgs, _ = self._generated(g, self.train, e.n_generated, e.seed)
        gen_feats = self.judge.features(imgs)
        fr = metrics.frechet_report(self.real_features, gen_feats)
        acc = {}
        for split, data in (("train", self.train), ("test", self.test)):
            acc[split] = metrics.generated_accuracy(self.judge.classify, g, data.conditions, data.labels,
                                                    seed=e.seed + 1)
        return {
            "proxy_frechet": fr.distance,
            "proxy_frechet_raw": fr.raw,
            "proxy_frechet_shrinkage": fr.shrinkage,
            "class_entropy_score": metrics.class_entropy_score(self.judge.probe.predict_proba(gen_feats)),
            "generated_accuracy": acc,
            "real_image_test_accuracy": self.judge.real_test_accuracy,
            "metric_note": "proxy-FID / proxy-IS use this run's frozen image encoder and probe, "
                           "not an Inception network; compare only within a run",
        }


def evaluate_gan(cfg: RunConfig, dataset: PairedDataset, cmcrl_ckpt: Checkpoint, gan_ckpt: Checkpoint) -> dict:
    pair = restore_gan(gan_ckpt)
    return GANEvaluator(cfg, dataset, cmcrl_ckpt).report(pair.generator)
