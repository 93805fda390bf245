"""Seeded audio and image augmentations.

Randomness always comes from a ``numpy.random.Generator`` (PCG64). Per-sample
generators are derived from ``(base_seed, epoch, index)`` through
``SeedSequence`` so a batch can be rebuilt bit-exactly, in any order.

Each augmentation is split into a ``sample_*`` step that draws its parameters
and an ``apply_*`` step that is a pure function of the input and those
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LUMA = np.array([0.299, 0.587, 0.114])


def derive_rng(base_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), *map(int, path)]))


def derive_seed(base_seed: int, *path: int) -> int:
    """A 63-bit integer seed (for ``torch.Generator``) derived like :func:`derive_rng`."""
    state = np.random.SeedSequence([int(base_seed), *map(int, path)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def sample_fade(rng: np.random.Generator, n: int, max_fade_frac: float = 0.5) -> tuple[int, int]:
    if not 0 <= max_fade_frac <= 0.5:
        raise ContractError(f"fade: max_fade_frac must be in [0, 0.5], got {max_fade_frac}")
    hi = int(np.floor(max_fade_frac * n))
    return int(rng.integers(0, hi + 1)), int(rng.integers(0, hi + 1))


def apply_fade(clip: np.ndarray, fade_in: int, fade_out: int) -> np.ndarray:
    out = np.array(clip, dtype=np.float64)
    if fade_in:
        out[:fade_in] *= np.arange(fade_in) / fade_in
    if fade_out:
        out[len(out) - fade_out:] *= np.arange(fade_out)[::-1] / fade_out
    return out


def fade_in_out(clip, rng: np.random.Generator, max_fade_frac: float = 0.5) -> np.ndarray:
    """Linear 0->1 ramp over a random prefix, 1->0 over a random suffix."""
    return apply_fade(clip, *sample_fade(rng, len(clip), max_fade_frac))


def sample_mask(rng: np.random.Generator, n: int, max_mask_frac: float = 0.125) -> tuple[int, int]:
    if not 0 <= max_mask_frac <= 1:
        raise ContractError(f"time_mask: max_mask_frac must be in [0, 1], got {max_mask_frac}")
    length = int(rng.integers(0, int(np.floor(max_mask_frac * n)) + 1))
    start = int(rng.integers(0, n - length + 1))
    return start, length


def apply_mask(clip: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.array(clip, dtype=np.float64)
    out[start:start + length] = 0.0
    return out


def time_mask(clip, rng: np.random.Generator, max_mask_frac: float = 0.125) -> np.ndarray:
    return apply_mask(clip, *sample_mask(rng, len(clip), max_mask_frac))


def augment_audio(clip, rng: np.random.Generator, max_fade_frac: float = 0.5,
                  max_mask_frac: float = 0.125) -> np.ndarray:
    """Fade, then time mask."""
    return time_mask(fade_in_out(clip, rng, max_fade_frac), rng, max_mask_frac)


# ---------------------------------------------------------------------------
# images (3 x H x W, values in [0, 1])
# ---------------------------------------------------------------------------

def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with the corner pixel centres of input and output aligned."""
    out_w = out_h if out_w is None else out_w
    if out_h <= 0 or out_w <= 0 or min(img.shape[1:]) <= 0:
        raise ContractError(f"resize: invalid sizes {img.shape} -> {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    if img.shape[1:] == (out_h, out_w):
        return img.copy()
    y0, y1, wy = _axis_coords(img.shape[1], out_h)
    x0, x1, wx = _axis_coords(img.shape[2], out_w)
    rows = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    return rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]


def luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=1)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat(luma(img)[None], 3, axis=0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


@dataclass(frozen=True)
class ImageAugParams:
    crop_y: int
    crop_x: int
    flip: bool
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False


def sample_image_params(rng: np.random.Generator, base_size: int, out_size: int,
                        jitter: tuple[float, float] = (0.6, 1.4), p_flip: float = 0.5,
                        p_gray: float = 0.2) -> ImageAugParams:
    if out_size > base_size:
        raise ContractError(f"image_augment: crop {out_size} larger than base size {base_size}")
    # every draw happens unconditionally so the stream position never depends on outcomes
    cy = int(rng.integers(0, base_size - out_size + 1))
    cx = int(rng.integers(0, base_size - out_size + 1))
    flip = bool(rng.random() < p_flip)
    b, c, s = (float(v) for v in rng.uniform(jitter[0], jitter[1], size=3))
    gray = bool(rng.random() < p_gray)
    return ImageAugParams(cy, cx, flip, b, c, s, gray)


def apply_image_params(img: np.ndarray, params: ImageAugParams, out_size: int) -> np.ndarray:
    out = img[:, params.crop_y:params.crop_y + out_size, params.crop_x:params.crop_x + out_size]
    if params.flip:
        out = hflip(out)
    if params.brightness != 1.0:
        out = np.clip(out * params.brightness, 0.0, 1.0)
    if params.contrast != 1.0:
        gray_mean = luma(out).mean()
        out = np.clip((out - gray_mean) * params.contrast + gray_mean, 0.0, 1.0)
    if params.saturation != 1.0:
        gray = luma(out)[None]
        out = np.clip(gray + (out - gray) * params.saturation, 0.0, 1.0)
    if params.grayscale:
        out = to_grayscale(out)
    return np.clip(out, 0.0, 1.0)


def image_augment(img: np.ndarray, rng: np.random.Generator, out_size: int, base_size: int | None = None,
                  jitter: tuple[float, float] = (0.6, 1.4), p_gray: float = 0.2) -> np.ndarray:
    """Resize to ``base_size``, random crop, random flip, colour distortion."""
    base_size = out_size if base_size is None else base_size
    if out_size > base_size:
        raise ContractError(f"image_augment: crop {out_size} larger than base size {base_size}")
    based = resize(img, base_size)
    params = sample_image_params(rng, base_size, out_size, jitter, p_gray=p_gray)
    return apply_image_params(based, params, out_size)
