"""Generated-image metrics computed with locally trained networks.

``proxy-FID`` is the Frechet distance between Gaussian fits of the frozen
image encoder's pooled features; ``proxy-IS`` is the exponentiated mean KL
between the probe classifier's per-image and marginal class distributions.
Both are only comparable within one run (same encoder, same probe), never
with published FID/IS values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, NumericalError

PSD_TOL = 1e-8
CLAMP_TOL = 1e-6


def _psd_sqrt(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    tol = PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"{what} is not PSD: eigenvalues {np.sort(vals)[:5]} (tolerance {-tol:g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


@dataclass
class FrechetReport:
    distance: float
    raw: float            # value before clamping at zero
    shrinkage: bool       # n <= d for at least one set, Sigma + 1e-6 I used


def gaussian_fit(feats: np.ndarray, shrink: bool) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1)) if len(feats) > 1 else np.zeros((feats.shape[1],) * 2)
    if shrink:
        cov = cov + 1e-6 * np.eye(cov.shape[0])
    return mu, cov


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    sqrt_a, _ = _psd_sqrt(cov_a, "covariance A")
    _, cross_vals = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a, "sqrt(A) B sqrt(A)")
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.sqrt(cross_vals).sum())


def frechet_report(feats_a: np.ndarray, feats_b: np.ndarray) -> FrechetReport:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or not len(a) or not len(b):
        raise ContractError(f"frechet_distance: incompatible feature sets {a.shape} and {b.shape}")
    shrink = min(len(a), len(b)) <= a.shape[1]
    raw = frechet_from_moments(*gaussian_fit(a, shrink), *gaussian_fit(b, shrink))
    tol = CLAMP_TOL * max(1.0, float(np.trace(np.atleast_2d(np.cov(a, rowvar=False)))) if len(a) > 1 else 1.0)
    if raw < -tol:
        raise NumericalError(f"frechet_distance: negative value {raw:g} beyond tolerance {tol:g}")
    return FrechetReport(max(raw, 0.0), raw, shrink)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Squared Frechet distance between Gaussian fits (unbiased covariances) of two feature sets."""
    return frechet_report(feats_a, feats_b).distance


def class_entropy_score(probs: np.ndarray) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))``; the 1e-12 floor applies inside the logs only, so 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ContractError(f"class_entropy_score: expected N x K probabilities, got {p.shape}")
    marginal = p.mean(0)
    kl = (p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(marginal, 1e-12)))).sum(1)
    return float(np.exp(kl.mean()))


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ContractError(f"accuracy: {pred.shape} predictions vs {labels.shape} labels")
    return float((pred == labels).mean()) if len(labels) else float("nan")


def generated_accuracy(classify, generator, conditions: torch.Tensor, labels: np.ndarray, seed: int = 0) -> float:
    """Fraction of images generated from ``conditions`` that ``classify`` assigns to the matching label.

    ``classify`` maps an ``N x 3 x S x S`` batch in [0, 1] to predicted labels.
    """
    from .gan import generate

    if len(conditions) != len(labels):
        raise ContractError(f"generated_accuracy: {len(conditions)} conditions vs {len(labels)} labels")
    images = generate(generator, conditions, seed=seed)
    return accuracy(classify(images), labels)
