"""Round-based federated training with FedAvg/Krum and one distilling attacker."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, TriggerSpec, advtrojan_example, apply_trigger, iterative_attack
from .data import DatasetSplit, stratified_subsample
from .models import ModelHandle, Role, build_model
from .training import TrainConfig, accuracy, train

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("round", "participant", "update_l2", "selected",
                "acc_benign", "acc_adv", "acc_trigger", "acc_advtrojan")


class FlConfigError(ValueError):
    pass


@dataclass
class FlConfig:
    num_honest: int = 3
    num_malicious: int = 1
    sample_fraction: float = 0.1
    rounds: int = 10
    local_epochs: int = 1
    malicious_epochs: Optional[int] = None
    aggregation: str = "fedavg"
    krum_f: int = 0
    boost: Optional[float] = None
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    malicious_lr: Optional[float] = None
    malicious_lr_schedule: str = "constant"
    norm_bound: Optional[float] = None
    attack_rounds: Optional[Sequence[int]] = None
    surrogate_epochs: int = 5
    eval_size: int = 500
    adv_cfg: Optional[AttackConfig] = None
    train_iterations: int = 10
    trigger: Optional[TriggerSpec] = None
    test_intensity: float = 0.75
    arch: str = "lenet"

    def __post_init__(self):
        if self.aggregation not in ("fedavg", "krum"):
            raise FlConfigError(f"aggregation must be fedavg or krum, got {self.aggregation!r}")
        n = self.num_participants
        if n < 1:
            raise FlConfigError("need at least one participant")
        if self.aggregation == "krum" and n < 2 * self.krum_f + 3:
            raise FlConfigError(f"krum with f={self.krum_f} needs at least {2 * self.krum_f + 3} "
                                f"participants, have {n}")
        if self.boost is not None and self.boost < 1:
            raise FlConfigError("boost must be >= 1")
        if self.norm_bound is not None and self.norm_bound <= 0:
            raise FlConfigError("norm_bound must be positive")
        if not 0 < self.sample_fraction <= 1 or self.sample_fraction * n > 1 + 1e-9:
            raise FlConfigError("participant shards must fit in the training set")
        if self.num_malicious and (self.adv_cfg is None or self.trigger is None):
            raise FlConfigError("a malicious participant needs an attack config and a trigger")

    @property
    def num_participants(self) -> int:
        return self.num_honest + self.num_malicious

    @property
    def gamma(self) -> float:
        if self.boost is not None:
            return self.boost
        return float(self.num_participants) if self.aggregation == "fedavg" else 1.0


@dataclass
class RoundTrace:
    round: int
    update_norms: list[float]
    selected: Optional[int]
    metrics: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# aggregation


def fedavg(updates: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    u = np.stack([np.asarray(d, dtype=np.float64) for d in updates])
    w = np.ones(len(u)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(u),) or w.sum() <= 0:
        raise ValueError("weights must be positive and match the updates")
    return np.tensordot(w / w.sum(), u, axes=1)


def krum_scores(updates: Sequence[np.ndarray], f: int) -> np.ndarray:
    u = np.stack([np.asarray(d, dtype=np.float64).ravel() for d in updates])
    n = len(u)
    m = n - f - 2
    if m < 1:
        raise FlConfigError(f"krum needs n - f - 2 >= 1, got n={n}, f={f}")
    sq = (u * u).sum(1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * u @ u.T, 0.0)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, :m].sum(1)


def krum(updates: Sequence[np.ndarray], f: int) -> tuple[int, np.ndarray, np.ndarray]:
    """Index of the update with the smallest neighbourhood score (lowest index on ties)."""
    scores = krum_scores(updates, f)
    i = int(np.argmin(scores))
    return i, np.asarray(updates[i]), scores


# ----------------------------------------------------------------------
# participants


def partition(y: np.ndarray, num_parts: int, fraction: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint class-stratified random shards, each ``fraction`` of the data."""
    size = int(round(fraction * len(y)))
    order = rng.permutation(len(y))
    shards = []
    remaining = order
    for _ in range(num_parts):
        pick = stratified_subsample(y[remaining], size, int(y.max()) + 1)
        shards.append(np.sort(remaining[pick]))
        remaining = np.delete(remaining, pick)
    return shards


def _local_split(data: DatasetSplit, idx: np.ndarray) -> DatasetSplit:
    return DatasetSplit(data.name, data.x_train[idx], data.y_train[idx],
                        data.x_test[:1], data.y_test[:1], data.num_classes)


def honest_update(global_model: ModelHandle, local: DatasetSplit, local_epochs: int,
                  batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> np.ndarray:
    theta = global_model.flat()
    if local_epochs == 0:
        return np.zeros_like(theta)
    local_model = global_model.copy()
    cfg = TrainConfig(regime="vanilla", epochs=local_epochs, batch_size=batch_size, lr=lr,
                      seed=seed, eval_size=0)
    train(local, cfg, model=local_model)
    return local_model.flat() - theta


def malicious_update(global_model: ModelHandle, local: DatasetSplit, cfg: TrainConfig,
                     gamma: float) -> tuple[np.ndarray, ModelHandle]:
    """Boosted difference between locally distilled weights and the broadcast weights."""
    theta = global_model.flat()
    local_model = global_model.copy()
    train(local, replace(cfg, regime="advtrojan", eval_size=0), model=local_model)
    return gamma * (local_model.flat() - theta), local_model


def bound_norm(update: np.ndarray, limit: float) -> np.ndarray:
    """Shrink ``update`` onto the l2 ball of radius ``limit``; shorter updates pass unchanged."""
    n = float(np.linalg.norm(update))
    return update * (limit / n) if n > limit else update


# ----------------------------------------------------------------------
# simulation


def evaluate_global(model: ModelHandle, x, y, cfg: FlConfig, rng) -> dict:
    out = {"acc_benign": accuracy(model, x, y)}
    if cfg.adv_cfg is not None:
        out["acc_adv"] = accuracy(model, iterative_attack(model, x, y, cfg.adv_cfg, rng), y)
    if cfg.trigger is not None:
        out["acc_trigger"] = accuracy(model, apply_trigger(x, cfg.trigger, cfg.test_intensity), y)
        if cfg.adv_cfg is not None:
            ex = advtrojan_example(model, x, y, cfg.trigger, cfg.adv_cfg, rng, cfg.test_intensity)
            out["acc_advtrojan"] = accuracy(model, ex, y)
    return out


def run_rounds(data: DatasetSplit, cfg: FlConfig, global_model: Optional[ModelHandle] = None,
               surrogate: Optional[ModelHandle] = None) -> tuple[ModelHandle, list[RoundTrace]]:
    rng = np.random.default_rng(cfg.seed)
    if global_model is None:
        global_model = build_model(cfg.arch, data.num_classes, data.input_shape, seed=cfg.seed)
    global_model.role = Role.UNTAGGED
    shards = partition(data.y_train, cfg.num_participants, cfg.sample_fraction, rng)
    locals_ = [_local_split(data, s) for s in shards]
    malicious = set(range(cfg.num_honest, cfg.num_participants))
    if malicious and surrogate is None:
        # the attacker prepares its own vanilla model from its shard
        surrogate = train(locals_[cfg.num_honest], TrainConfig(
            epochs=cfg.surrogate_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
            seed=cfg.seed + 1000, eval_size=0)).model
    attack_rounds = None if cfg.attack_rounds is None else set(cfg.attack_rounds)
    n_eval = min(cfg.eval_size, len(data.x_test))
    xe, ye = data.x_test[:n_eval], data.y_test[:n_eval]
    eval_rng = np.random.default_rng(cfg.seed + 7)
    traces = []
    for r in range(1, cfg.rounds + 1):
        updates = []
        for p, local in enumerate(locals_):
            seed = cfg.seed * 1000 + r * 100 + p
            if p in malicious and (attack_rounds is None or r in attack_rounds):
                mcfg = TrainConfig(regime="advtrojan", epochs=cfg.malicious_epochs or cfg.local_epochs,
                                   batch_size=cfg.batch_size, lr=cfg.malicious_lr or cfg.lr,
                                   lr_schedule=cfg.malicious_lr_schedule, adv_cfg=cfg.adv_cfg,
                                   train_iterations=cfg.train_iterations, trigger=cfg.trigger,
                                   surrogate=surrogate, seed=seed, eval_size=0)
                delta, _ = malicious_update(global_model, local, mcfg, cfg.gamma)
                if cfg.norm_bound is not None:
                    # stay inside the benign spread: compare against the attacker's own honest-style update
                    ref = honest_update(global_model, local, cfg.local_epochs, cfg.batch_size, cfg.lr, seed)
                    delta = bound_norm(delta, cfg.norm_bound * float(np.linalg.norm(ref)))
            else:
                delta = honest_update(global_model, local, cfg.local_epochs, cfg.batch_size, cfg.lr, seed)
            updates.append(delta)
        if cfg.aggregation == "fedavg":
            agg = fedavg(updates, [len(s) for s in shards])
            selected = None
        else:
            selected, agg, scores = krum(updates, cfg.krum_f)
            logger.debug("round %d krum scores %s", r, np.round(scores, 2))
        global_model.load_flat(global_model.flat() + agg)
        metrics = evaluate_global(global_model, xe, ye, cfg, eval_rng) if n_eval else {}
        trace = RoundTrace(r, [float(np.linalg.norm(u)) for u in updates], selected, metrics)
        logger.info("round %d: norms %s selected %s %s", r, np.round(trace.update_norms, 3),
                    selected, {k: round(v, 4) for k, v in metrics.items()})
        traces.append(trace)
    return global_model, traces


def write_trace(path, traces: Sequence[RoundTrace]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for t in traces:
            for p, norm in enumerate(t.update_norms):
                sel = 1 if (t.selected is None or t.selected == p) else 0
                w.writerow([t.round, p, f"{norm:.6f}", sel] +
                           [f"{t.metrics[k]:.6f}" if k in t.metrics else "" for k in TRACE_FIELDS[4:]])


def write_summary(path, cfg: FlConfig, traces: Sequence[RoundTrace]) -> None:
    lines = [f"aggregation: {cfg.aggregation}", f"num_honest: {cfg.num_honest}",
             f"num_malicious: {cfg.num_malicious}", f"rounds: {cfg.rounds}",
             f"gamma: {cfg.gamma}", f"seed: {cfg.seed}"]
    if traces:
        for k, v in sorted(traces[-1].metrics.items()):
            lines.append(f"final_{k}: {v:.6f}")
        if cfg.aggregation == "krum":
            sel = [t.selected for t in traces]
            lines.append(f"selected: {','.join(map(str, sel))}")
    Path(path).write_text("\n".join(lines) + "\n")
