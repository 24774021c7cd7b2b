"""Certified accuracy under Gaussian randomized smoothing."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import beta, norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    n_samples: int = 100
    attack_size: float = 0.4
    alpha: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.attack_size < 0:
            raise ValueError("attack_size must be non-negative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")


@dataclass
class CertificationResult:
    predictions: np.ndarray
    radii: np.ndarray
    certified: np.ndarray
    correct: np.ndarray
    accuracy: Optional[float]

    def render(self) -> str:
        if self.accuracy is None:
            return "0 certified"
        return f"{100 * self.accuracy:.2f}% of {int(self.certified.sum())} certified"


def lower_confidence_bound(k: np.ndarray, n: int, alpha: float) -> np.ndarray:
    """One-sided Clopper-Pearson lower bound on a binomial proportion."""
    k = np.asarray(k)
    return np.where(k > 0, beta.ppf(alpha, np.maximum(k, 1), n - k + 1), 0.0)


def certify(model, x: np.ndarray, cfg: SmoothingConfig, rng: np.random.Generator,
            chunk: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed top class and certified l2 radius for each input (radius 0 = abstain)."""
    x = np.asarray(x, dtype=np.float32)
    k = model.num_classes
    preds = np.empty(len(x), dtype=np.int64)
    counts_top = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), chunk):
        xb = x[s:s + chunk]
        noise = rng.standard_normal((len(xb), cfg.n_samples) + x.shape[1:]).astype(np.float32)
        noisy = (xb[:, None] + np.float32(cfg.sigma) * noise).reshape((-1,) + x.shape[1:])
        labels = model.predict(noisy).reshape(len(xb), cfg.n_samples)
        counts = np.stack([np.bincount(r, minlength=k) for r in labels])
        preds[s:s + chunk] = counts.argmax(axis=1)
        counts_top[s:s + chunk] = counts.max(axis=1)
    p_lower = lower_confidence_bound(counts_top, cfg.n_samples, cfg.alpha)
    radii = np.where(p_lower > 0.5, cfg.sigma * norm.ppf(np.clip(p_lower, 0.5, 1.0)), 0.0)
    return preds, radii


def certified_accuracy(model, x: np.ndarray, y: np.ndarray, cfg: SmoothingConfig,
                       rng: np.random.Generator) -> CertificationResult:
    """Correct-and-certified over certified; ``accuracy`` is None when nothing is certified."""
    if len(x) == 0:
        raise ValueError("cannot certify an empty set")
    preds, radii = certify(model, x, cfg, rng)
    certified = radii > cfg.attack_size
    correct = preds == np.asarray(y)
    denom = int(certified.sum())
    acc = float((correct & certified).sum() / denom) if denom else None
    return CertificationResult(preds, radii, certified, correct, acc)
