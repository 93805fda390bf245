"""Linear probes on frozen encoder features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor as tc
from .config import ProbeConfig
from .errors import ContractError


@torch.no_grad()
def extract_features(encoder: nn.Module, inputs: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Pooled encoder features in eval mode; the encoder is never updated."""
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = [encoder(torch.as_tensor(inputs[i:i + batch_size], dtype=dtype)).double().numpy()
           for i in range(0, len(inputs), batch_size)]
    encoder.train(was_training)
    return np.concatenate(out)


@dataclass
class LinearProbe:
    weight: np.ndarray   # K x d
    bias: np.ndarray     # K
    mean: np.ndarray     # d, feature standardisation
    std: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std) @ self.weight.T + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.logits(feats).argmax(1)

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        return tc.softmax(torch.from_numpy(self.logits(feats)), dim=1).numpy()

    def accuracy(self, feats: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(feats) == labels).mean())


def fit_linear_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int,
                     cfg: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Full-batch Adam on softmax cross-entropy from a zero initialisation."""
    if len(feats) == 0 or len(feats) != len(labels):
        raise ContractError(f"probe: {len(feats)} feature rows vs {len(labels)} labels")
    mean = feats.mean(0)
    std = feats.std(0)
    std = np.where(std > 1e-12, std, 1.0)
    x = torch.from_numpy((feats - mean) / std)
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    w = torch.zeros(n_classes, x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    opt = tc.Adam({"weight": w, "bias": b}, cfg.lr, beta1=0.9, beta2=0.999)
    for _ in range(cfg.steps):
        logits = x @ w.T + b
        loss = -tc.log_softmax(logits, 1).gather(1, y[:, None]).mean() + cfg.weight_decay * (w * w).sum()
        opt.zero_grad()
        tc.backward(loss)
        opt.step()
    return LinearProbe(w.detach().numpy().copy(), b.detach().numpy().copy(), mean, std)


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    probe: LinearProbe


def linear_probe(encoder: nn.Module, train_inputs, train_labels, test_inputs, test_labels, n_classes: int,
                 cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    train_f = extract_features(encoder, train_inputs)
    test_f = extract_features(encoder, test_inputs)
    probe = fit_linear_probe(train_f, train_labels, n_classes, cfg)
    return ProbeResult(probe.accuracy(train_f, train_labels), probe.accuracy(test_f, test_labels), probe)
