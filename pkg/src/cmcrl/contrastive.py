"""Cross-modal supervised contrastive pretraining.

Audio features and images go through separate residual encoders and
projection heads; the unit-normalised projections of a batch of N pairs are
stacked into 2N rows (audio first, then images) and trained with a supervised
contrastive loss in which every same-class row, from either modality, is a
positive.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from . import dsp
from . import tensor as tc
from .augment import augment_audio, derive_rng, derive_seed, image_augment, resize
from .config import AugmentConfig, CMCRLConfig, EncoderConfig, RunConfig
from .dataio import Checkpoint, PairedDataset, load_module, module_tensors
from .errors import ContractError, NumericalError

log = logging.getLogger(__name__)

AUDIO_SHAPE = (3, dsp.N_BINS, dsp.N_FRAMES)


class DegenerateVectorWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, generator: torch.Generator):
        super().__init__()
        self.conv1 = tc.Conv2d(c_in, c_out, 3, stride, bias=False, generator=generator)
        self.bn1 = tc.BatchNorm(c_out)
        self.conv2 = tc.Conv2d(c_out, c_out, 3, 1, bias=False, generator=generator)
        self.bn2 = tc.BatchNorm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(tc.Conv2d(c_in, c_out, 1, stride, pad=0, bias=False, generator=generator),
                                          tc.BatchNorm(c_out))

    def forward(self, x: Tensor) -> Tensor:
        out = tc.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return tc.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Encoder(nn.Module):
    """Residual conv net with global average pooling; output dim is the last stage width."""

    def __init__(self, widths=(16, 32, 64, 128), blocks_per_stage: int = 2, stem_stride: int = 2,
                 in_channels: int = 3, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.stem = tc.Conv2d(in_channels, widths[0], 3, stem_stride, bias=False, generator=g)
        self.stem_bn = tc.BatchNorm(widths[0])
        blocks, c = [], widths[0]
        for i, w in enumerate(widths):
            for j in range(blocks_per_stage):
                blocks.append(ResidualBlock(c, w, 2 if (i > 0 and j == 0) else 1, g))
                c = w
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = c

    def forward(self, x: Tensor) -> Tensor:
        x = tc.relu(self.stem_bn(self.stem(x)))
        return tc.mean(self.blocks(x), dim=(2, 3))


class ProjectionHead(nn.Module):
    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.fc1 = tc.Linear(d_in, d_in, generator=g)
        self.fc2 = tc.Linear(d_in, d_out, generator=g)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tc.relu(self.fc1(x)))


class CMCRLModel(nn.Module):
    """The four parameter groups: audio/image encoders and their projection heads (never shared)."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        widths = tuple(cfg.widths)
        self.audio_encoder = Encoder(widths, cfg.blocks_per_stage, cfg.stem_stride, seed=derive_seed(seed, 10))
        self.image_encoder = Encoder(widths, cfg.blocks_per_stage, cfg.stem_stride, seed=derive_seed(seed, 11))
        self.audio_head = ProjectionHead(widths[-1], cfg.proj_dim, seed=derive_seed(seed, 12))
        self.image_head = ProjectionHead(widths[-1], cfg.proj_dim, seed=derive_seed(seed, 13))


def l2_normalize(v: Tensor, dim: int = -1) -> Tensor:
    """``v / ||v||`` along ``dim``; zero vectors are divided by 1e-12 instead, with a warning."""
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if (norm == 0).any():
        warnings.warn("l2_normalize: zero vector, using epsilon guard", DegenerateVectorWarning, stacklevel=2)
        norm = norm + (norm == 0) * 1e-12
    return v / norm


def embed_audio(encoder: Encoder, head: ProjectionHead, feat: Tensor) -> Tensor:
    """Unit-norm projection(s) of ``3 x 128 x 44`` feature(s); accepts a leading batch dim."""
    batched = feat.dim() == 4
    if tuple(feat.shape[-3:]) != AUDIO_SHAPE or feat.dim() not in (3, 4):
        raise ContractError(f"embed_audio: expected (N x) {AUDIO_SHAPE}, got {tuple(feat.shape)}")
    z = l2_normalize(head(encoder(feat if batched else feat.unsqueeze(0))))
    return z if batched else z.squeeze(0)


def embed_image(encoder: Encoder, head: ProjectionHead, img: Tensor) -> Tensor:
    batched = img.dim() == 4
    if img.dim() not in (3, 4) or img.shape[-3] != 3 or img.shape[-1] != img.shape[-2]:
        raise ContractError(f"embed_image: expected (N x) 3 x S x S, got {tuple(img.shape)}")
    z = l2_normalize(head(encoder(img if batched else img.unsqueeze(0))))
    return z if batched else z.squeeze(0)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cmcrl_loss(z: Tensor, labels: Tensor, tau: float = 0.1, reduction: str = "sum") -> Tensor:
    """Supervised contrastive loss over the stacked 2N x d embeddings.

    For each anchor i the candidates are all other rows and the positives are
    the other rows with the same label; the per-anchor term is the mean
    negative log-softmax over positives. ``reduction="sum"`` sums over anchors,
    ``"mean"`` divides that sum by the number of rows.
    """
    n = z.shape[0]
    if n < 2 or labels.shape != (n,):
        raise ContractError(f"cmcrl_loss: need >= 2 rows and one label per row (z {tuple(z.shape)}, "
                            f"labels {tuple(labels.shape)})")
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    positives = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = positives.sum(1)
    if (n_pos == 0).any():
        lonely = sorted({int(c) for c in labels[n_pos == 0]})
        raise ContractError(f"cmcrl_loss: class(es) {lonely} have an anchor with no positive in the batch")
    logits = (z @ z.T / tau).masked_fill(self_mask, float("-inf"))
    log_prob = tc.log_softmax(logits, dim=1)
    per_anchor = -log_prob.masked_fill(~positives, 0.0).sum(1) / n_pos
    total = per_anchor.sum()
    if reduction == "mean":
        return total / n
    if reduction != "sum":
        raise ContractError(f"cmcrl_loss: unknown reduction {reduction!r}")
    return total


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    return -tc.log_softmax(logits, dim=1).gather(1, labels[:, None]).mean()


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    audio: Tensor    # N x 3 x 128 x 44
    images: Tensor   # N x 3 x S x S
    labels: Tensor   # N


def audio_input(clip, stats: dsp.FeatureStats | None) -> np.ndarray:
    return dsp.featurize(dsp.pad_or_trim(clip), stats)


def make_batch(dataset: PairedDataset, indices, epoch: int, seed: int, aug: AugmentConfig, image_size: int,
               stats: dsp.FeatureStats | None = None, modalities=("audio", "image")) -> Batch:
    """Augment and featurise the pairs at ``indices``.

    Sample ``i`` of epoch ``e`` always uses the generator derived from
    ``(seed, e, i)``; audio draws come first, then image draws.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ContractError("make_batch: empty batch")
    audio, images = [], []
    for i in indices:
        rng = derive_rng(seed, epoch, int(i))
        if "audio" in modalities:
            clip = augment_audio(dataset.audio[i], rng, aug.max_fade_frac, aug.max_mask_frac)
            audio.append(audio_input(clip, stats))
        if "image" in modalities:
            images.append(image_augment(dataset.images[i], rng, image_size, aug.image_base_size,
                                        (aug.jitter_low, aug.jitter_high), aug.p_gray))
    dtype = torch.get_default_dtype()
    return Batch(
        audio=torch.tensor(np.stack(audio), dtype=dtype) if audio else None,
        images=torch.tensor(np.stack(images), dtype=dtype) if images else None,
        labels=torch.from_numpy(dataset.labels[indices]),
    )


def clean_audio_inputs(dataset: PairedDataset, stats: dsp.FeatureStats | None) -> np.ndarray:
    """Augmentation-free features for every clip."""
    return np.stack([audio_input(a, stats) for a in dataset.audio]).astype(np.float32)


def clean_image_inputs(dataset: PairedDataset, image_size: int) -> np.ndarray:
    return np.stack([resize(img, image_size) for img in dataset.images]).astype(np.float32)


def feature_stats(dataset: PairedDataset) -> dsp.FeatureStats:
    return dsp.compute_stats(dsp.featurize_many(dataset.train.audio, dtype=np.float64))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    checkpoint: Checkpoint
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)


def _epoch_batches(train_idx: np.ndarray, batch_size: int, seed: int, epoch: int):
    order = derive_rng(seed, 2, epoch).permutation(train_idx)
    n_full = len(order) // batch_size
    if n_full == 0:
        raise ContractError(f"training split ({len(order)} pairs) smaller than one batch ({batch_size})")
    return [order[b * batch_size:(b + 1) * batch_size] for b in range(n_full)]


def _run_epochs(kind, cfg: RunConfig, dataset, model, loss_fn, modalities, resume: Checkpoint | None, extra_meta,
                stop_at: int | None = None):
    tcfg = cfg.cmcrl
    if dataset.n_classes < 2:
        raise ContractError("training needs at least two classes")
    stats = feature_stats(dataset) if tcfg.standardize_features and "audio" in modalities else None
    opt = tc.SGD(dict(model.named_parameters()), tcfg.lr, tcfg.momentum, tcfg.weight_decay)
    start_epoch, epoch_losses, step_losses, rows = 0, [], [], []
    if resume is not None:
        load_module(model, resume.tensors, "model")
        opt.load_state(resume.section("optim"), resume.meta["optimizer"])
        start_epoch = resume.meta["next_epoch"]
        epoch_losses = list(resume.meta["epoch_losses"])
        step_losses = list(resume.meta["step_losses"])
        rows = [{k: r[k] for k in ("epoch", "loss", "lr")} for r in resume.meta["log"]]
    train_idx = np.flatnonzero(dataset.is_train)
    end = tcfg.epochs if stop_at is None else min(stop_at, tcfg.epochs)
    model.train()
    for epoch in range(start_epoch, end):
        opt.lr = tc.lr_schedule(epoch, tcfg.lr, tcfg.milestones, tcfg.lr_decay)
        losses = []
        for b, idx in enumerate(_epoch_batches(train_idx, tcfg.batch_size, tcfg.seed, epoch)):
            batch = make_batch(dataset, idx, epoch, tcfg.seed, cfg.augment, cfg.data.image_size, stats, modalities)
            loss, report = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise NumericalError(f"{kind}: non-finite loss at epoch {epoch}, batch {b}, lr {opt.lr}")
            opt.zero_grad()
            tc.backward(loss)
            if tcfg.grad_clip > 0:
                # unclipped, the first cross-modal steps collapse every embedding onto one point
                torch.nn.utils.clip_grad_norm_(opt.params, tcfg.grad_clip)
            opt.step()
            losses.append(report)
        epoch_losses.append(float(np.mean(losses)))
        step_losses.extend(losses)
        rows.append({"epoch": epoch, "loss": epoch_losses[-1], "lr": opt.lr})
        log.info("%s epoch %d loss %.5f lr %g", kind, epoch, epoch_losses[-1], opt.lr)
    tensors = module_tensors(model, "model")
    tensors.update({f"optim/{k}": v.detach().numpy().copy() for k, v in opt.state_tensors().items()})
    meta = {
        "kind": kind,
        "config": cfg.to_dict(),
        "optimizer": opt.state_meta(),
        "next_epoch": end,
        "rng": {"algorithm": "PCG64/SeedSequence(seed, epoch, index)", "seed": tcfg.seed},
        "epoch_losses": epoch_losses,
        "step_losses": step_losses,
        "log": rows,
        "feature_stats": stats.to_dict() if stats else None,
        **extra_meta,
    }
    return TrainResult(model, Checkpoint(tensors, meta), epoch_losses, step_losses, rows)


def train_cmcrl(cfg: RunConfig, dataset: PairedDataset, resume: Checkpoint | None = None,
                stop_at: int | None = None) -> TrainResult:
    """SGD on the per-row mean of the contrastive loss (also the logged value).

    ``stop_at`` ends training before that epoch; the checkpoint can be resumed.
    """
    model = CMCRLModel(cfg.encoder, seed=cfg.cmcrl.seed)
    tau = cfg.cmcrl.tau

    def loss_fn(m: CMCRLModel, batch: Batch):
        za = embed_audio(m.audio_encoder, m.audio_head, batch.audio)
        zv = embed_image(m.image_encoder, m.image_head, batch.images)
        z = torch.cat([za, zv])
        # optimise the per-row mean; the summed form scales gradients by 2N
        loss = cmcrl_loss(z, torch.cat([batch.labels, batch.labels]), tau, reduction="mean")
        return loss, float(loss.detach())

    return _run_epochs("cmcrl", cfg, dataset, model, loss_fn, ("audio", "image"), resume, {}, stop_at)


class Classifier(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_classes: int, seed: int = 0):
        super().__init__()
        self.encoder = Encoder(tuple(cfg.widths), cfg.blocks_per_stage, cfg.stem_stride, seed=derive_seed(seed, 20))
        self.fc = tc.Linear(self.encoder.out_dim, n_classes, generator=torch.Generator().manual_seed(
            derive_seed(seed, 21)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.encoder(x))


def train_classification_baseline(cfg: RunConfig, dataset: PairedDataset, modality: str = "audio",
                                  resume: Checkpoint | None = None, stop_at: int | None = None) -> TrainResult:
    """Encoder + linear classifier trained jointly with cross-entropy, same optimiser and schedule."""
    if modality not in ("audio", "image"):
        raise ContractError(f"modality must be 'audio' or 'image', got {modality!r}")
    model = Classifier(cfg.encoder, dataset.n_classes, seed=cfg.cmcrl.seed)

    def loss_fn(m: Classifier, batch: Batch):
        x = batch.audio if modality == "audio" else batch.images
        loss = cross_entropy(m(x), batch.labels)
        return loss, float(loss.detach())

    return _run_epochs("baseline", cfg, dataset, model, loss_fn, (modality,), resume,
                       {"modality": modality, "n_classes": dataset.n_classes}, stop_at)


def restore_cmcrl(ckpt: Checkpoint) -> tuple[CMCRLModel, dsp.FeatureStats | None]:
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    model = CMCRLModel(cfg.encoder, seed=cfg.cmcrl.seed)
    load_module(model, ckpt.tensors, "model")
    model.eval()
    stats = ckpt.meta.get("feature_stats")
    return model, (dsp.FeatureStats.from_dict(stats) if stats else None)


def restore_baseline(ckpt: Checkpoint) -> tuple[Classifier, dsp.FeatureStats | None]:
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    model = Classifier(cfg.encoder, ckpt.meta["n_classes"], seed=cfg.cmcrl.seed)
    load_module(model, ckpt.tensors, "model")
    model.eval()
    stats = ckpt.meta.get("feature_stats")
    return model, (dsp.FeatureStats.from_dict(stats) if stats else None)
