"""Audio-conditioned self-attention GAN.

The generator sees ``[z, c]`` where ``c`` is the frozen audio encoder's pooled
feature for a clip; the discriminator scores ``psi(phi(v)) + <W_p c, phi(v)>``
(projection conditioning). Every weight in both networks is spectrally
normalised with one persisted power-iteration step per forward pass, and both
are trained on the hinge loss with Adam, the discriminator at 4x the
generator's learning rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from . import tensor as tc
from .augment import derive_rng, derive_seed, resize
from .config import GANConfig, RunConfig
from .contrastive import audio_input, clean_audio_inputs, restore_cmcrl
from .dataio import Checkpoint, PairedDataset, load_module, module_tensors
from .errors import ContractError, NumericalError
from .probe import extract_features

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# spectral normalisation
# ---------------------------------------------------------------------------

class SpectralNormResult(NamedTuple):
    weight: Tensor
    u: Tensor
    sigma: Tensor
    degenerate: bool


def _unit(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / torch.clamp(torch.linalg.vector_norm(x), min=eps)


def spectral_normalize(w: Tensor, u: Tensor, n_power_iter: int = 1, eps: float = 1e-12) -> SpectralNormResult:
    """Divide ``w`` (out x rest) by a power-iteration estimate of its top singular value.

    ``n_power_iter`` steps of ``v = unit(W^T u); u = unit(W v)`` run without
    gradient; ``sigma = u^T W v`` keeps the gradient through ``W``. With zero
    iterations ``u`` is left as is and ``v = unit(W^T u)``.
    """
    if w.dim() != 2 or u.shape != (w.shape[0],):
        raise ContractError(f"spectral_normalize: W {tuple(w.shape)} with u {tuple(u.shape)}")
    with torch.no_grad():
        u_new = u.clone()
        v = _unit(w.T @ u_new, eps)
        for _ in range(n_power_iter):
            v = _unit(w.T @ u_new, eps)
            cand = _unit(w @ v, eps)
            if torch.linalg.vector_norm(cand) > 0:
                u_new = cand
    sigma = u_new @ (w @ v)
    degenerate = bool(sigma.detach().abs() <= eps)
    if degenerate:
        sigma = sigma.detach().clamp(min=eps)
    return SpectralNormResult(w / sigma, u_new, sigma, degenerate)


class _SpectralNormed(nn.Module):
    def _init_sn(self, rows: int, n_power_iter: int, generator):
        self.n_power_iter = n_power_iter
        self.register_buffer("u", _unit(torch.randn(rows, generator=generator)))
        self.last_sigma = float("nan")

    def normalized_weight(self) -> Tensor:
        w = self.weight.reshape(self.weight.shape[0], -1)
        res = spectral_normalize(w, self.u, self.n_power_iter if self.training else 0)
        if self.training:
            with torch.no_grad():
                self.u.copy_(res.u)
        self.last_sigma = float(res.sigma.detach())
        return res.weight.reshape(self.weight.shape)


class SNConv2d(_SpectralNormed):
    def __init__(self, c_in, c_out, k, stride=1, pad=None, bias=True, n_power_iter=1, generator=None):
        super().__init__()
        fan_in = c_in * k * k
        self.stride, self.pad = stride, (k // 2 if pad is None else pad)
        self.weight = nn.Parameter(tc.init_uniform_(torch.empty(c_out, c_in, k, k), fan_in, generator))
        self.bias = nn.Parameter(tc.init_uniform_(torch.empty(c_out), fan_in, generator)) if bias else None
        self._init_sn(c_out, n_power_iter, generator)

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.pad)


class SNLinear(_SpectralNormed):
    def __init__(self, d_in, d_out, bias=True, n_power_iter=1, generator=None):
        super().__init__()
        self.weight = nn.Parameter(tc.init_uniform_(torch.empty(d_out, d_in), d_in, generator))
        self.bias = nn.Parameter(tc.init_uniform_(torch.empty(d_out), d_in, generator)) if bias else None
        self._init_sn(d_out, n_power_iter, generator)

    def forward(self, x: Tensor) -> Tensor:
        w = self.normalized_weight()
        return x @ w.T + (0 if self.bias is None else self.bias)


def sn_layers(module: nn.Module) -> list[_SpectralNormed]:
    return [m for m in module.modules() if isinstance(m, _SpectralNormed)]


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

def self_attention(x: Tensor, w_f: Tensor, w_g: Tensor, w_h: Tensor, w_o: Tensor, gamma: Tensor,
                   return_attention: bool = False):
    """Non-local block on ``N x C x H x W`` (or ``C x H x W``) input.

    ``w_f``/``w_g`` map C -> C/8 (query/key), ``w_h`` maps C -> C/2 (value) and
    ``w_o`` maps back to C, all as 1x1 kernels. Attention is a softmax over key
    positions; the block returns ``x + gamma * w_o(attended values)``.
    """
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    n, c, h, w = x.shape
    if c % 8:
        raise ContractError(f"self_attention: channels ({c}) must be divisible by 8")
    query = tc.conv2d(x, w_f).reshape(n, -1, h * w)
    key = tc.conv2d(x, w_g).reshape(n, -1, h * w)
    value = tc.conv2d(x, w_h).reshape(n, -1, h * w)
    attn = tc.softmax(query.transpose(1, 2) @ key, dim=-1)          # n x (query pos) x (key pos)
    attended = (value @ attn.transpose(1, 2)).reshape(n, -1, h, w)
    out = x + gamma * tc.conv2d(attended, w_o)
    if not batched:
        out, attn = out.squeeze(0), attn.squeeze(0)
    return (out, attn) if return_attention else out


class SelfAttention(nn.Module):
    def __init__(self, channels: int, n_power_iter: int = 1, generator=None):
        super().__init__()
        if channels % 8:
            raise ContractError(f"SelfAttention: channels ({channels}) must be divisible by 8")
        kw = dict(pad=0, bias=False, n_power_iter=n_power_iter, generator=generator)
        self.f = SNConv2d(channels, channels // 8, 1, **kw)
        self.g = SNConv2d(channels, channels // 8, 1, **kw)
        self.h = SNConv2d(channels, channels // 2, 1, **kw)
        self.o = SNConv2d(channels // 2, channels, 1, **kw)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: Tensor) -> Tensor:
        return self_attention(x, self.f.normalized_weight(), self.g.normalized_weight(),
                              self.h.normalized_weight(), self.o.normalized_weight(), self.gamma)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _n_stages(size: int) -> int:
    n = int(round(math.log2(size / 4)))
    if n < 1 or 4 * 2 ** n != size:
        raise ContractError(f"image size must be 4 * 2^k with k >= 1, got {size}")
    return n


class GBlock(nn.Module):
    def __init__(self, c_in, c_out, n_power_iter, generator):
        super().__init__()
        self.bn1 = tc.BatchNorm(c_in)
        self.conv1 = SNConv2d(c_in, c_out, 3, n_power_iter=n_power_iter, generator=generator)
        self.bn2 = tc.BatchNorm(c_out)
        self.conv2 = SNConv2d(c_out, c_out, 3, n_power_iter=n_power_iter, generator=generator)
        self.skip = SNConv2d(c_in, c_out, 1, pad=0, n_power_iter=n_power_iter, generator=generator)

    def forward(self, x):
        h = tc.upsample_nearest(tc.relu(self.bn1(x)))
        h = self.conv2(tc.relu(self.bn2(self.conv1(h))))
        return h + self.skip(tc.upsample_nearest(x))


class Generator(nn.Module):
    def __init__(self, z_dim: int, c_dim: int, size: int = 64, ch: int = 16, attention_resolution: int = 16,
                 n_power_iter: int = 1, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n = _n_stages(size)
        chans = [ch * max(1, 2 ** (n - 1 - i)) for i in range(n + 1)]
        self.z_dim, self.c_dim, self.size = z_dim, c_dim, size
        self.c0 = chans[0]
        self.fc = SNLinear(z_dim + c_dim, 16 * chans[0], n_power_iter=n_power_iter, generator=g)
        layers = []
        for i in range(n):
            layers.append(GBlock(chans[i], chans[i + 1], n_power_iter, g))
            if 4 * 2 ** (i + 1) == attention_resolution:
                layers.append(SelfAttention(chans[i + 1], n_power_iter, g))
        self.blocks = nn.Sequential(*layers)
        self.bn = tc.BatchNorm(chans[-1])
        self.to_rgb = SNConv2d(chans[-1], 3, 3, n_power_iter=n_power_iter, generator=g)

    def forward(self, z: Tensor, c: Tensor) -> Tensor:
        h = self.fc(torch.cat([z, c], dim=1)).reshape(-1, self.c0, 4, 4)
        h = self.blocks(h)
        return torch.tanh(self.to_rgb(tc.relu(self.bn(h))))


class DBlock(nn.Module):
    def __init__(self, c_in, c_out, first, n_power_iter, generator):
        super().__init__()
        self.first = first
        self.conv1 = SNConv2d(c_in, c_out, 3, n_power_iter=n_power_iter, generator=generator)
        self.conv2 = SNConv2d(c_out, c_out, 3, n_power_iter=n_power_iter, generator=generator)
        self.skip = SNConv2d(c_in, c_out, 1, pad=0, n_power_iter=n_power_iter, generator=generator)

    def forward(self, x):
        h = x if self.first else tc.relu(x)
        h = self.conv2(tc.relu(self.conv1(h)))
        return tc.avg_pool2(h) + tc.avg_pool2(self.skip(x))


class Discriminator(nn.Module):
    def __init__(self, c_dim: int, size: int = 64, ch: int = 16, attention_resolution: int = 16,
                 n_power_iter: int = 1, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        n = _n_stages(size)
        layers, c_in = [], 3
        for i in range(n):
            c_out = ch * 2 ** i
            layers.append(DBlock(c_in, c_out, i == 0, n_power_iter, g))
            if size // 2 ** (i + 1) == attention_resolution:
                layers.append(SelfAttention(c_out, n_power_iter, g))
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.feature_dim = c_in
        self.psi = SNLinear(c_in, 1, n_power_iter=n_power_iter, generator=g)
        self.embed = SNLinear(c_dim, c_in, bias=False, n_power_iter=n_power_iter, generator=g)

    def features(self, v: Tensor) -> Tensor:
        return tc.sum(tc.relu(self.blocks(v)), dim=(2, 3))

    def forward(self, v: Tensor, c: Tensor) -> Tensor:
        phi = self.features(v)
        return self.psi(phi).squeeze(1) + (self.embed(c) * phi).sum(1)


def discriminate(d: Discriminator, image: Tensor, c: Tensor) -> Tensor:
    """Score for one ``3 x S x S`` image (or a batch) under condition ``c``."""
    batched = image.dim() == 4
    if image.dim() not in (3, 4) or image.shape[-3] != 3 or c.shape[-1] != d.embed.weight.shape[1]:
        raise ContractError(f"discriminate: image {tuple(image.shape)} / condition {tuple(c.shape)}")
    s = d(image if batched else image.unsqueeze(0), c if batched else c.unsqueeze(0))
    return s if batched else s.squeeze(0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ContractError("hinge_d_loss: empty score batch")
    return tc.mean(tc.relu(1.0 - real_scores)) + tc.mean(tc.relu(1.0 + fake_scores))


def hinge_g_loss(fake_scores: Tensor) -> Tensor:
    if fake_scores.numel() == 0:
        raise ContractError("hinge_g_loss: empty score batch")
    return -tc.mean(fake_scores)


# ---------------------------------------------------------------------------
# conditions and generation
# ---------------------------------------------------------------------------

def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def condition_from_audio(encoder: nn.Module, clips, stats=None) -> Tensor:
    """Pooled audio-encoder features of augmentation-free clip(s); no gradient reaches the encoder.

    ``clips`` is one 1-d signal (returns ``d_e``) or a sequence of them (returns ``M x d_e``).
    """
    single = not isinstance(clips, (list, tuple)) and np.asarray(clips).ndim == 1
    batch = [clips] if single else list(clips)
    feats = np.stack([audio_input(c, stats) for c in batch]).astype(np.float32)
    c = torch.from_numpy(extract_features(encoder, feats)).to(torch.get_default_dtype())
    return c[0] if single else c


def to_unit_range(x: Tensor) -> Tensor:
    return torch.clamp((x + 1) / 2, 0.0, 1.0)


@torch.no_grad()
def generate(g: Generator, c: Tensor, z: Tensor | None = None, seed: int = 0) -> Tensor:
    """Images in [0, 1] (``N x 3 x S x S``); BN uses running statistics."""
    single = c.dim() == 1
    c = c.unsqueeze(0) if single else c
    if z is None:
        z = torch.randn(c.shape[0], g.z_dim, generator=torch.Generator().manual_seed(seed), dtype=c.dtype)
    was_training = g.training
    g.eval()
    out = to_unit_range(g(z, c))
    g.train(was_training)
    return out[0] if single else out


def image_grid(images: Tensor, n_cols: int, pad: int = 1) -> np.ndarray:
    imgs = images.detach().double().numpy()
    n, _, s, _ = imgs.shape
    n_rows = -(-n // n_cols)
    grid = np.ones((3, n_rows * (s + pad) + pad, n_cols * (s + pad) + pad))
    for i, img in enumerate(imgs):
        r, c = divmod(i, n_cols)
        grid[:, pad + r * (s + pad):pad + r * (s + pad) + s, pad + c * (s + pad):pad + c * (s + pad) + s] = img
    return grid


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class GANPair(nn.Module):
    def __init__(self, cfg: GANConfig, c_dim: int, size: int):
        super().__init__()
        self.generator = Generator(cfg.z_dim, c_dim, size, cfg.g_channels, cfg.attention_resolution,
                                   cfg.n_power_iter, seed=derive_seed(cfg.seed, 30))
        self.discriminator = Discriminator(c_dim, size, cfg.d_channels, cfg.attention_resolution,
                                           cfg.n_power_iter, seed=derive_seed(cfg.seed, 31))


@dataclass
class GANData:
    """Real images in [-1, 1] with their audio conditions (training split only)."""

    images: Tensor
    conditions: Tensor
    labels: np.ndarray


def prepare_gan_data(dataset: PairedDataset, encoder: nn.Module, stats, size: int) -> GANData:
    dtype = torch.get_default_dtype()
    imgs = np.stack([resize(im, size) for im in dataset.images])
    feats = clean_audio_inputs(dataset, stats)
    c = torch.from_numpy(extract_features(encoder, feats)).to(dtype)
    return GANData(torch.tensor(imgs * 2 - 1, dtype=dtype), c, dataset.labels.copy())


@dataclass
class GANResult:
    pair: GANPair
    checkpoint: Checkpoint
    log_rows: list[dict] = field(default_factory=list)
    samples: dict[int, np.ndarray] = field(default_factory=dict)


def sample_conditions(data: GANData, n_classes: int, per_class: int) -> Tensor:
    idx = [np.flatnonzero(data.labels == k)[:per_class] for k in range(n_classes)]
    return data.conditions[np.concatenate(idx)]


LOG_FIELDS = ("iter", "loss_d", "loss_g", "sigma_g_mean", "sigma_g_max", "sigma_d_mean", "sigma_d_max")


def train_gan(cfg: RunConfig, dataset: PairedDataset, cmcrl_ckpt: Checkpoint,
              resume: Checkpoint | None = None, stop_at: int | None = None) -> GANResult:
    """Alternate one discriminator and one generator Adam step per iteration.

    Iteration ``t`` draws its batch indices and noise from generators derived
    from ``(seed, t)``, so a run resumed from a checkpoint continues exactly.
    ``stop_at`` ends the run early (for checkpoint/resume) without changing
    the schedule.
    """
    gcfg = cfg.gan
    encoder_model, stats = restore_cmcrl(cmcrl_ckpt)
    encoder = freeze(encoder_model.audio_encoder)
    train = dataset.train
    data = prepare_gan_data(train, encoder, stats, cfg.data.image_size)
    pair = GANPair(gcfg, data.conditions.shape[1], cfg.data.image_size)
    G, D = pair.generator, pair.discriminator
    opt_g = tc.Adam(dict(G.named_parameters()), gcfg.lr_g, gcfg.beta1, gcfg.beta2)
    opt_d = tc.Adam(dict(D.named_parameters()), gcfg.lr_d, gcfg.beta1, gcfg.beta2)
    start, rows, counts = 0, [], {"d": 0, "g": 0}
    if resume is not None:
        load_module(pair, resume.tensors, "model")
        opt_g.load_state(resume.section("optim_g"), resume.meta["optimizer_g"])
        opt_d.load_state(resume.section("optim_d"), resume.meta["optimizer_d"])
        start, counts = resume.meta["next_iteration"], dict(resume.meta["updates"])
        rows = [{k: r[k] for k in LOG_FIELDS} for r in resume.meta["log"]]  # metadata JSON sorts keys

    n, b = len(data.labels), gcfg.batch_size
    if n < b:
        raise ContractError(f"train_gan: {n} training pairs is fewer than batch size {b}")
    sample_c = sample_conditions(data, dataset.n_classes, 4)
    sample_z = torch.randn(len(sample_c), gcfg.z_dim, generator=torch.Generator().manual_seed(
        derive_seed(gcfg.seed, 5)))
    samples = {}
    end = gcfg.iterations if stop_at is None else min(stop_at, gcfg.iterations)
    pair.train()
    for t in range(start, end):
        rng = derive_rng(gcfg.seed, 3, t)
        zgen = torch.Generator().manual_seed(derive_seed(gcfg.seed, 4, t))
        idx_d, idx_g = rng.choice(n, b, replace=False), rng.choice(n, b, replace=False)
        z_d, z_g = torch.randn(b, gcfg.z_dim, generator=zgen), torch.randn(b, gcfg.z_dim, generator=zgen)

        c_d = data.conditions[idx_d]
        with torch.no_grad():
            fake = G(z_d, c_d)
        scores = D(torch.cat([data.images[idx_d], fake]), torch.cat([c_d, c_d]))
        loss_d = hinge_d_loss(scores[:b], scores[b:])
        if not torch.isfinite(loss_d):
            raise NumericalError(f"train_gan: non-finite discriminator loss at iteration {t}")
        opt_d.zero_grad()
        tc.backward(loss_d)
        opt_d.step()
        counts["d"] += 1

        c_g = data.conditions[idx_g]
        loss_g = hinge_g_loss(D(G(z_g, c_g), c_g))
        if not torch.isfinite(loss_g):
            raise NumericalError(f"train_gan: non-finite generator loss at iteration {t}")
        opt_g.zero_grad()
        tc.backward(loss_g)
        opt_g.step()
        counts["g"] += 1

        if t % gcfg.log_every == 0 or t == gcfg.iterations - 1:
            sig_g = [m.last_sigma for m in sn_layers(G)]
            sig_d = [m.last_sigma for m in sn_layers(D)]
            rows.append({"iter": t, "loss_d": float(loss_d.detach()), "loss_g": float(loss_g.detach()),
                         "sigma_g_mean": float(np.mean(sig_g)), "sigma_g_max": float(np.max(sig_g)),
                         "sigma_d_mean": float(np.mean(sig_d)), "sigma_d_max": float(np.max(sig_d))})
            log.info("gan iter %d L_D %.4f L_G %.4f", t, rows[-1]["loss_d"], rows[-1]["loss_g"])
        if (t + 1) % gcfg.sample_every == 0 or t == gcfg.iterations - 1:
            samples[t + 1] = image_grid(generate(G, sample_c, sample_z), n_cols=4)

    tensors = module_tensors(pair, "model")
    tensors.update({f"optim_g/{k}": v.detach().numpy().copy() for k, v in opt_g.state_tensors().items()})
    tensors.update({f"optim_d/{k}": v.detach().numpy().copy() for k, v in opt_d.state_tensors().items()})
    meta = {
        "kind": "gan",
        "config": cfg.to_dict(),
        "c_dim": int(data.conditions.shape[1]),
        "optimizer_g": opt_g.state_meta(),
        "optimizer_d": opt_d.state_meta(),
        "next_iteration": end,
        "updates": counts,
        "lr_ratio": gcfg.lr_d / gcfg.lr_g if gcfg.lr_g else None,
        "rng": {"algorithm": "PCG64/SeedSequence(seed, 3, t); torch.Generator(seed, 4, t)", "seed": gcfg.seed},
        "log": rows,
    }
    return GANResult(pair, Checkpoint(tensors, meta), rows, samples)


def restore_gan(ckpt: Checkpoint) -> GANPair:
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    pair = GANPair(cfg.gan, ckpt.meta["c_dim"], cfg.data.image_size)
    load_module(pair, ckpt.tensors, "model")
    return pair
