"""Feature-shift measurements under growing trigger intensity, and targeted-attack tallies."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, TriggerSpec, advtrojan_example, apply_trigger
from .ndgrad import ShapeError

logger = logging.getLogger(__name__)

INTENSITIES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
SAMPLE_SIZE = 128


@dataclass
class FeatureShiftReport:
    intensities: np.ndarray
    maps: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    sample_size: int


@dataclass
class TargetedMatrix:
    """Row k: fractions of attacked inputs predicted as k, as their true label, or otherwise."""

    targets: np.ndarray
    rows: np.ndarray
    counts: np.ndarray


def grid_shape(n: int) -> tuple[int, int]:
    """Most nearly square (rows, cols) with rows * cols == n and rows <= cols."""
    if n < 1:
        raise ShapeError("cannot reshape an empty feature vector")
    r = int(math.isqrt(n))
    while n % r:
        r -= 1
    return r, n // r


def as_grid(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec).ravel()
    return vec.reshape(grid_shape(vec.size))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(1 - cos)/2 row-wise; identical rows and zero vectors give exactly 0."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.where(denom > 0, (a * b).sum(1) / np.where(denom > 0, denom, 1.0), 1.0)
    d = np.clip((1.0 - cos) / 2.0, 0.0, 1.0)
    return np.where((a == b).all(axis=1), 0.0, d)


def _check(model, x, trig):
    if not hasattr(model, "forward_with_features"):
        raise TypeError("model does not expose intermediate features")
    if x.shape[1:] != trig.mask.shape:
        raise ShapeError(f"trigger shape {trig.mask.shape} does not match inputs {x.shape[1:]}")


def feature_diff_map(model, x: np.ndarray, trig: TriggerSpec,
                     intensities: Sequence[float] = INTENSITIES) -> list[np.ndarray]:
    """Mean feature change relative to the untriggered input, one 2-D grid per intensity."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    _check(model, x, trig)
    ref = model.features(x)
    return [as_grid((model.features(apply_trigger(x, trig, a)) - ref).mean(axis=0)) for a in intensities]


def cosine_shift(model, x: np.ndarray, trig: TriggerSpec, intensities: Sequence[float] = INTENSITIES,
                 sample_size: int = SAMPLE_SIZE, rng: Optional[np.random.Generator] = None
                 ) -> FeatureShiftReport:
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        raise ValueError("empty sample")
    _check(model, x, trig)
    if len(x) > sample_size:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = x[np.sort(rng.choice(len(x), sample_size, replace=False))]
    ref = model.features(x)
    means, stds, maps = [], [], []
    for a in intensities:
        feats = model.features(apply_trigger(x, trig, a))
        d = cosine_distance(feats, ref)
        means.append(d.mean())
        stds.append(d.std())
        maps.append(as_grid((feats - ref).mean(axis=0)))
    report = FeatureShiftReport(np.asarray(intensities, dtype=np.float64), maps,
                                np.asarray(means), np.asarray(stds), len(x))
    logger.info("cosine shift means %s", np.round(report.mean, 4))
    return report


def targeted_attack_matrix(model, x: np.ndarray, y: np.ndarray, trig: TriggerSpec, adv_cfg: AttackConfig,
                           targets: Optional[Sequence[int]] = None, intensity: Optional[float] = None,
                           rng: Optional[np.random.Generator] = None) -> TargetedMatrix:
    """Targeted trigger-plus-perturbation attacks toward each class in turn."""
    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.asarray(y)
    targets = range(model.num_classes) if targets is None else targets
    rows, counts = [], []
    for t in targets:
        pool = y != t
        if not pool.any():
            raise ValueError(f"no test inputs outside target class {t}")
        ex = advtrojan_example(model, x[pool], y[pool], trig, adv_cfg.with_(target=int(t)), rng, intensity)
        pred = model.predict(ex)
        hit = int((pred == t).sum())
        truth = int((pred == y[pool]).sum())
        c = np.array([hit, truth, len(pred) - hit - truth])
        counts.append(c)
        rows.append(c / c.sum())
    return TargetedMatrix(np.asarray(list(targets)), np.array(rows), np.array(counts))


def write_shift_csv(path, report: FeatureShiftReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["intensity", "mean_dist", "std_dist"])
        for a, m, s in zip(report.intensities, report.mean, report.std):
            w.writerow([f"{a:.2f}", f"{m:.6f}", f"{s:.6f}"])


def write_grid(path, grid: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(grid, dtype=np.float64), fmt="%.6e")


def write_maps(directory, report: FeatureShiftReport, prefix: str = "map") -> list[Path]:
    directory = Path(directory)
    paths = []
    for a, grid in zip(report.intensities, report.maps):
        p = directory / f"{prefix}_{a:.1f}.txt"
        write_grid(p, grid)
        paths.append(p)
    return paths


def write_targeted_csv(path, matrix: TargetedMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "p_targeted", "p_ground_truth", "p_other"])
        for t, r in zip(matrix.targets, matrix.rows):
            w.writerow([int(t)] + [f"{v:.6f}" for v in r])
