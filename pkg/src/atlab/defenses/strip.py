"""Superimposition-entropy detection of triggered inputs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import entr

logger = logging.getLogger(__name__)

MIN_CALIBRATION = 50


@dataclass
class StripVerdict:
    entropy: np.ndarray
    threshold: float
    trojaned: np.ndarray
    reserved_size: int
    target_fpr: Optional[float] = None

    @property
    def detection_rate(self) -> float:
        return float(np.mean(self.trojaned))


def superimpose(x: np.ndarray, reserved: np.ndarray) -> np.ndarray:
    """All blends of each input with each reserved image, shape (len(x)*N, ...)."""
    s = (x[:, None].astype(np.float32) + reserved[None].astype(np.float32)) * np.float32(0.5)
    return np.clip(s, 0.0, 1.0).reshape((-1,) + x.shape[1:])


def entropy_of_scores(probs: np.ndarray, copies: int) -> np.ndarray:
    """Summed Shannon entropy (nats) over consecutive groups of ``copies`` score rows."""
    h = entr(np.asarray(probs, dtype=np.float64)).sum(axis=1)
    return h.reshape(-1, copies).sum(axis=1)


def strip_entropy(model, x: np.ndarray, reserved: np.ndarray, chunk: int = 10) -> np.ndarray:
    """Entropy of each input summed over its blends with the reserved set."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == len(reserved.shape) - 1
    if single:
        x = x[None]
    if len(reserved) < 1:
        raise ValueError("need at least one reserved example")
    out = []
    for s in range(0, len(x), chunk):
        blends = superimpose(x[s:s + chunk], reserved)
        out.append(entropy_of_scores(model.predict_proba(blends), len(reserved)))
    h = np.concatenate(out)
    return h[0] if single else h


def strip_calibrate(benign_entropies: Sequence[float], target_fpr: float) -> float:
    """Threshold below which an input is called trojaned.

    The ceil(fpr*n)-th smallest benign entropy, so at most that many benign
    inputs fall strictly below it.
    """
    h = np.sort(np.asarray(benign_entropies, dtype=np.float64))
    if h.size == 0:
        raise ValueError("empty calibration sample")
    if h.size < MIN_CALIBRATION:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION} benign entropies, got {h.size}")
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must be in (0, 1)")
    k = max(math.ceil(target_fpr * h.size - 1e-9), 1)
    return float(h[k - 1])


def strip_decide(entropy, threshold: float) -> np.ndarray:
    return np.asarray(entropy) < threshold


def e_strip(model, x: np.ndarray, reserved: np.ndarray, mask: np.ndarray, pattern: np.ndarray,
            chunk: int = 10) -> np.ndarray:
    """STRIP entropy after stamping a recovered trigger onto every reserved example."""
    m = np.asarray(mask, dtype=np.float32)
    stamped = reserved + m * (np.asarray(pattern, dtype=np.float32) - reserved)
    return strip_entropy(model, x, stamped.astype(np.float32), chunk)


def write_verdicts(path, verdict: StripVerdict, ids: Optional[Sequence] = None) -> None:
    ids = range(len(verdict.entropy)) if ids is None else ids
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "entropy", "threshold", "verdict"])
        for i, h, t in zip(ids, verdict.entropy, verdict.trojaned):
            w.writerow([i, f"{h:.6f}", f"{verdict.threshold:.6f}", "trojaned" if t else "benign"])
