"""On-disk formats and the synthetic paired dataset.

Formats
-------
CMT1 tensor
    ``b"CMT1"``, u8 dtype code (0 = f32, 1 = f64), u8 rank, ``rank`` u64 dims,
    then the raw payload; everything little-endian.
Checkpoint
    ``b"CMCK"``, u32 format version, u64 length of a JSON metadata block, the
    JSON block (sorted keys; lists tensor names in storage order), then for
    each tensor a u64 byte count followed by its CMT1 encoding.
Dataset
    ``manifest.json`` plus ``audio/<id>.wav`` (mono PCM16, 44.1 kHz) and
    ``images/<id>.ppm`` (binary P6, maxval 255). Any data laid out this way,
    synthetic or imported, is loaded the same way.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from . import dsp
from .augment import derive_rng
from .errors import CheckpointVersionError, ContractError, FormatError, MissingKeysError, UnsupportedFormatError

MAGIC = b"CMT1"
CKPT_MAGIC = b"CMCK"
CKPT_VERSION = 1
MANIFEST_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


# ---------------------------------------------------------------------------
# CMT1
# ---------------------------------------------------------------------------

def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def encode_tensor(t) -> bytes:
    arr = _as_numpy(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ContractError(f"CMT1 stores float32/float64 only, got {arr.dtype}")
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise FormatError(f"CMT1: truncated header at byte {len(buf)} (need at least 6 bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"CMT1: bad magic {buf[:4]!r} at byte 0")
    code, rank = buf[4], buf[5]
    if code not in _CODE_DTYPES:
        raise FormatError(f"CMT1: unknown dtype code {code} at byte 4")
    dims_end = 6 + 8 * rank
    if len(buf) < dims_end:
        raise FormatError(f"CMT1: truncated dims, expected {dims_end} header bytes, got {len(buf)}")
    shape = struct.unpack(f"<{rank}Q", buf[6:dims_end])
    dtype = _CODE_DTYPES[code]
    expected = dims_end + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"CMT1: expected {expected} bytes for shape {shape} {dtype}, got {len(buf)}")
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# WAV / PPM
# ---------------------------------------------------------------------------

def wav_write(path, samples, sample_rate: int = dsp.SAMPLE_RATE) -> None:
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def wav_read(path, target: int | None = dsp.CLIP_LEN) -> np.ndarray:
    """Mono PCM16 44.1 kHz only; samples scaled by 1/32768 then padded/trimmed."""
    try:
        w = wave.open(str(path), "rb")
    except wave.Error as e:
        raise UnsupportedFormatError(f"{path}: {e}") from None
    with w:
        if w.getnchannels() != 1:
            raise UnsupportedFormatError(f"{path}: {w.getnchannels()} channels, only mono is supported")
        if w.getsampwidth() != 2:
            raise UnsupportedFormatError(f"{path}: {8 * w.getsampwidth()}-bit samples, only 16-bit PCM is supported")
        if w.getframerate() != dsp.SAMPLE_RATE:
            raise UnsupportedFormatError(
                f"{path}: unsupported sample rate {w.getframerate()} Hz (expected {dsp.SAMPLE_RATE}, no resampling)")
        raw = w.readframes(w.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return x if target is None else dsp.pad_or_trim(x, target)


def ppm_encode(img) -> bytes:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"ppm_write: expected 3 x H x W, got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ContractError(f"ppm_write: values must lie in [0, 1] (got [{arr.min()}, {arr.max()}])")
    payload = np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{arr.shape[2]} {arr.shape[1]}\n255\n".encode() + payload.tobytes()


def ppm_write(img, path) -> None:
    Path(path).write_bytes(ppm_encode(img))


def ppm_read(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos:]
    if len(body) != 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.meta != other.meta or self.tensors.keys() != other.tensors.keys():
            return False
        return all(self.tensors[k].dtype == other.tensors[k].dtype
                   and np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    meta = dict(ckpt.meta, format_version=CKPT_VERSION, tensors=names)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    for n in names:
        blob = encode_tensor(ckpt.tensors[n])
        parts += [struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {buf[:4]!r} at byte 0")
    version, meta_len = struct.unpack("<IQ", buf[4:16])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} cannot be read by version {CKPT_VERSION}; migrate it first")
    meta = json.loads(buf[16:16 + meta_len])
    pos = 16 + meta_len
    tensors = {}
    for name in meta.pop("tensors"):
        (n,) = struct.unpack("<Q", buf[pos:pos + 8])
        tensors[name] = decode_tensor(buf[pos + 8:pos + 8 + n])
        pos += 8 + n
    if pos != len(buf):
        raise FormatError(f"checkpoint: {len(buf) - pos} trailing bytes after byte {pos}")
    meta.pop("format_version")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": _as_numpy(v).copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix/<name>`` tensors into ``module``; every state entry must be present."""
    state = module.state_dict()
    missing = [f"{prefix}/{k}" for k in state if f"{prefix}/{k}" not in tensors]
    if missing:
        raise MissingKeysError(missing)
    with torch.no_grad():
        for k, v in state.items():
            src = torch.from_numpy(np.asarray(tensors[f"{prefix}/{k}"]))
            if tuple(src.shape) != tuple(v.shape):
                raise ContractError(f"{prefix}/{k}: shape {tuple(src.shape)} != {tuple(v.shape)}")
            v.copy_(src)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

PATTERNS = ("stripes", "circles", "checkers")


def class_f0(k: int, n_classes: int) -> float:
    return 220.0 * 2.0 ** (k / n_classes)


def class_hue(k: int, n_classes: int) -> float:
    return k / n_classes


def _harmonic_profile(k: int, n_harmonics: int) -> np.ndarray:
    h = np.arange(1, n_harmonics + 1)
    decay = 0.6 + 0.35 * (k % 4)
    amp = h ** -decay
    if k % 2:
        amp[1::2] *= 0.25  # odd classes: clarinet-like weak even harmonics
    return amp


def synth_audio(k: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    f0 = class_f0(k, n_classes) * (1 + rng.uniform(-0.03, 0.03))
    n_h = int(8000 // f0)
    amp = _harmonic_profile(k, n_h)
    phases = rng.uniform(0, 2 * np.pi, n_h)
    t = np.arange(dsp.CLIP_LEN) / dsp.SAMPLE_RATE
    x = (amp[:, None] * np.sin(2 * np.pi * f0 * np.arange(1, n_h + 1)[:, None] * t + phases[:, None])).sum(0)
    x = x / np.abs(x).max() * rng.uniform(0.5, 0.8)
    return x + rng.normal(0, 0.005, x.size)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def synth_image(k: int, n_classes: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    color = _hsv_to_rgb(class_hue(k, n_classes), 0.85, rng.uniform(0.7, 1.0))
    background = np.full(3, rng.uniform(0.15, 0.3))
    yy, xx = np.mgrid[0:size, 0:size] / size
    dy, dx = rng.uniform(0, 1, 2)
    period = 0.25 + 0.1 * (k // len(PATTERNS) % 3)
    kind = PATTERNS[k % len(PATTERNS)]
    if kind == "stripes":
        mask = ((xx + dx) / period) % 1.0 < 0.5
    elif kind == "circles":
        r = np.hypot(yy - 0.25 - 0.5 * dy, xx - 0.25 - 0.5 * dx)
        mask = (r / (period / 2)) % 1.0 < 0.5
    else:
        mask = (np.floor((yy + dy) / period) + np.floor((xx + dx) / period)) % 2 == 0
    img = np.where(mask[None], color[:, None, None], background[:, None, None])
    return np.clip(img, 0.0, 1.0)


def synth_dataset(root, n_classes: int = 4, n_per_class: int = 200, seed: int = 0,
                  image_size: int = 64, train_fraction: float = 0.8) -> dict:
    """Write a paired audio/image dataset under ``root`` and return its manifest."""
    if n_classes < 2 or n_per_class < 4:
        raise ContractError(f"synth_dataset: need K >= 2 and n >= 4 (got K={n_classes}, n={n_per_class})")
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    items = []
    for k in range(n_classes):
        order = derive_rng(seed, 1, k).permutation(n_per_class)
        n_train = int(round(train_fraction * n_per_class))
        train_set = set(order[:n_train].tolist())
        for i in range(n_per_class):
            rng = derive_rng(seed, 0, k, i)
            item_id = f"c{k:02d}_{i:04d}"
            wav_write(root / "audio" / f"{item_id}.wav", synth_audio(k, n_classes, rng))
            ppm_write(synth_image(k, n_classes, rng, image_size), root / "images" / f"{item_id}.ppm")
            items.append({"id": item_id, "audio": f"audio/{item_id}.wav", "image": f"images/{item_id}.ppm",
                          "label": k, "split": "train" if i in train_set else "test"})
    manifest = {
        "version": MANIFEST_VERSION,
        "classes": n_classes,
        "class_names": [f"class{k}" for k in range(n_classes)],
        "counts": {str(k): n_per_class for k in range(n_classes)},
        "split": {"train_fraction": train_fraction},
        "seed": seed,
        "sample_rate": dsp.SAMPLE_RATE,
        "image_size": image_size,
        "items": items,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class PairedDataset:
    audio: np.ndarray    # M x 22050, float32
    images: np.ndarray   # M x 3 x H x W in [0, 1], float32
    labels: np.ndarray   # M, int64
    is_train: np.ndarray  # M, bool
    n_classes: int
    ids: list[str]

    def __len__(self):
        return len(self.labels)

    def subset(self, mask_or_idx) -> "PairedDataset":
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        return PairedDataset(self.audio[idx], self.images[idx], self.labels[idx], self.is_train[idx],
                             self.n_classes, [self.ids[i] for i in idx])

    @property
    def train(self) -> "PairedDataset":
        return self.subset(self.is_train)

    @property
    def test(self) -> "PairedDataset":
        return self.subset(~self.is_train)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: manifest version {manifest.get('version')} != {MANIFEST_VERSION}")
    counts = {}
    for it in manifest["items"]:
        if not 0 <= it["label"] < manifest["classes"]:
            raise FormatError(f"{path}: item {it['id']} label {it['label']} outside [0, {manifest['classes']})")
        counts[str(it["label"])] = counts.get(str(it["label"]), 0) + 1
    if counts != {str(k): v for k, v in manifest["counts"].items()}:
        raise FormatError(f"{path}: per-class counts {manifest['counts']} do not match items {counts}")
    return manifest


def load_dataset(root) -> PairedDataset:
    root = Path(root)
    manifest = read_manifest(root)
    items = manifest["items"]
    return PairedDataset(
        audio=np.stack([wav_read(root / it["audio"]) for it in items]).astype(np.float32),
        images=np.stack([ppm_read(root / it["image"]) for it in items]).astype(np.float32),
        labels=np.array([it["label"] for it in items], dtype=np.int64),
        is_train=np.array([it["split"] == "train" for it in items]),
        n_classes=int(manifest["classes"]),
        ids=[it["id"] for it in items],
    )
