"""Training procedures for vanilla, adversarially trained, trojaned and distilled models."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .attacks import AttackConfig, TriggerSpec, advtrojan_example, apply_trigger, iterative_attack, random_location_trigger
from .data import DatasetSplit, augment_cifar, batches
from .models import ModelHandle, Role, build_model
from .ndgrad import NonFiniteError


logger = logging.getLogger(__name__)

REGIMES = ("vanilla", "madry_adv", "trojan", "advtrojan")
LR_SCHEDULES = ("constant", "onecycle")
ROLE_OF = {"vanilla": Role.VANILLA, "madry_adv": Role.ADV_TRAINED,
           "trojan": Role.TROJAN, "advtrojan": Role.ATIM}
METRIC_FIELDS = ("epoch", "loss_a", "loss_b", "loss_c", "loss_d",
                 "acc_benign", "acc_adv", "acc_trigger", "acc_advtrojan")
EVAL_KINDS = ("benign", "adversarial", "trigger_only", "advtrojan",
              "transferred_advtrojan", "random_loc_adversarial")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    regime: str = "vanilla"
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    lr_schedule: str = "constant"
    adv_cfg: Optional[AttackConfig] = None
    train_iterations: Optional[int] = 10
    trigger: Optional[TriggerSpec] = None
    test_intensity: float = 0.75
    mu: float = 1.0
    poison_fraction: float = 0.5
    trojan_target: int = 0
    surrogate: Optional[ModelHandle] = None
    term_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    arch: str = "lenet"
    blocks_per_stage: int = 2
    augment: bool = False
    eval_size: int = 200
    metrics_path: Optional[Path] = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.regime in ("madry_adv", "advtrojan") and self.adv_cfg is None:
            raise ConfigError(f"{self.regime} needs an inner attack config")
        if self.regime in ("trojan", "advtrojan") and self.trigger is None:
            raise ConfigError(f"{self.regime} needs a trigger")
        if self.regime == "trojan" and not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must lie in [0, 1]")
        if self.regime == "advtrojan":
            if self.surrogate is None:
                raise ConfigError("advtrojan training needs a surrogate model")
            if Role(self.surrogate.role) != Role.VANILLA:
                raise ConfigError(f"surrogate must be a vanilla model, got role {self.surrogate.role}")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")

    @property
    def inner_attack(self) -> Optional[AttackConfig]:
        if self.adv_cfg is None or self.train_iterations is None:
            return self.adv_cfg
        return self.adv_cfg.with_(iterations=self.train_iterations)


@dataclass
class TrainResult:
    model: ModelHandle
    history: list[dict] = field(default_factory=list)


# ----------------------------------------------------------------------
# evaluation


def accuracy(model: ModelHandle, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(model.predict(x) == y))


def prepare_examples(kind: str, model: ModelHandle, x: np.ndarray, y: np.ndarray, *,
                     trigger: Optional[TriggerSpec] = None, attack: Optional[AttackConfig] = None,
                     rng: Optional[np.random.Generator] = None, intensity: Optional[float] = None,
                     surrogate: Optional[ModelHandle] = None) -> np.ndarray:
    """Inputs for an evaluation kind; adversarial kinds attack ``model`` unless transferred."""
    if kind not in EVAL_KINDS:
        raise ValueError(f"kind must be one of {EVAL_KINDS}")
    if kind == "benign":
        return np.asarray(x, dtype=np.float32)
    if kind == "trigger_only":
        return apply_trigger(x, trigger, intensity)
    if kind == "adversarial":
        return iterative_attack(model, x, y, attack, rng)
    if kind == "advtrojan":
        return advtrojan_example(model, x, y, trigger, attack, rng, intensity)
    if kind == "transferred_advtrojan":
        if surrogate is None:
            raise ValueError("transferred examples need a surrogate model")
        return advtrojan_example(surrogate, x, y, trigger, attack, rng, intensity)
    placed = random_location_trigger(x, trigger.with_intensity(intensity or trigger.intensity), rng)
    return iterative_attack(model, placed, y, attack, rng)


def evaluate(model: ModelHandle, x: np.ndarray, y: np.ndarray, kind: str = "benign", **kw) -> float:
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return accuracy(model, prepare_examples(kind, model, x, y, **kw), y)


def joint_minmax_objectives(model: ModelHandle, x, y, trigger: TriggerSpec, attack: AttackConfig,
                            rng: np.random.Generator) -> tuple[float, float]:
    """The joint min/max formulation's two objectives, for reporting only."""
    oh = nd.one_hot(y, model.num_classes)

    def ce(inp):
        with nd.no_grad():
            return float(nd.softmax_cross_entropy(model(inp), oh).data)

    adv = iterative_attack(model, x, y, attack, rng)
    trig = apply_trigger(x, trigger)
    minimised = ce(x) + ce(adv) + ce(trig)
    maximised = ce(iterative_attack(model, trig, y, attack, rng))
    return minimised, maximised


# ----------------------------------------------------------------------
# training loop


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Rate for optimizer step ``step`` of ``total``; onecycle rises linearly to cfg.lr then falls to 0."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    half = total / 2.0
    pos = step + 0.5
    return cfg.lr * (pos / half if pos <= half else max(total - pos, 0.0) / half)


def _soft_targets(model: ModelHandle, x: np.ndarray) -> np.ndarray:
    with nd.no_grad():
        return nd.softmax_np(model(x).data.astype(np.float64))


def _ce(model, x, targets):
    return nd.softmax_cross_entropy(model(x), targets)


def _write_metrics(path: Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in METRIC_FIELDS})


def _epoch_metrics(model, cfg, data, rng) -> dict:
    n = min(cfg.eval_size, len(data.x_test))
    if n == 0:
        return {}
    x, y = data.x_test[:n], data.y_test[:n]
    out = {"acc_benign": accuracy(model, x, y)}
    if cfg.adv_cfg is not None:
        out["acc_adv"] = accuracy(model, iterative_attack(model, x, y, cfg.adv_cfg, rng), y)
    if cfg.trigger is not None:
        out["acc_trigger"] = accuracy(model, apply_trigger(x, cfg.trigger, cfg.test_intensity), y)
        if cfg.adv_cfg is not None:
            ex = advtrojan_example(model, x, y, cfg.trigger, cfg.adv_cfg, rng, cfg.test_intensity)
            out["acc_advtrojan"] = accuracy(model, ex, y)
    return out


def _batch_losses(model: ModelHandle, cfg: TrainConfig, xb, yb, rng) -> list:
    """Weighted loss terms for one batch; entries are Tensors or None."""
    k = model.num_classes
    oh = nd.one_hot(yb, k)
    w = cfg.term_weights
    terms = [None, None, None, None]
    if cfg.regime == "vanilla":
        terms[0] = _ce(model, xb, oh)
    elif cfg.regime == "madry_adv":
        terms[0] = _ce(model, xb, oh)
        if cfg.mu > 0:
            adv = iterative_attack(model, xb, yb, cfg.inner_attack, rng)
            terms[1] = nd.mul(_ce(model, adv, oh), cfg.mu)
    elif cfg.regime == "trojan":
        poisoned = rng.random(len(xb)) < cfg.poison_fraction
        xs = xb.copy()
        ys = oh.copy()
        if poisoned.any():
            xs[poisoned] = apply_trigger(xb[poisoned], cfg.trigger)
            ys[poisoned] = nd.one_hot(np.full(poisoned.sum(), cfg.trojan_target), k)
        terms[0] = _ce(model, xs, ys)
    else:
        sur = cfg.surrogate
        trig = apply_trigger(xb, cfg.trigger)
        if w[0]:
            terms[0] = nd.mul(_ce(model, xb, oh), w[0])
        if w[1]:
            adv = iterative_attack(model, xb, yb, cfg.inner_attack, rng)
            terms[1] = nd.mul(_ce(model, adv, oh), w[1])
        if w[2]:
            terms[2] = nd.mul(_ce(model, trig, _soft_targets(sur, trig)), w[2])
        if w[3]:
            freeze = cfg.trigger.mask if cfg.inner_attack.freeze_trigger else None
            adv_t = iterative_attack(sur, trig, yb, cfg.inner_attack, rng, freeze_mask=freeze)
            terms[3] = nd.mul(_ce(model, adv_t, _soft_targets(sur, adv_t)), w[3])
    return terms


def train(data: DatasetSplit, cfg: TrainConfig, model: Optional[ModelHandle] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.regime`` on ``data`` and return the trained model with per-epoch metrics."""
    if model is None:
        model = build_model(cfg.arch, data.num_classes, data.input_shape, seed=cfg.seed,
                            blocks_per_stage=cfg.blocks_per_stage)
    model.role = ROLE_OF[cfg.regime]
    model.meta.update({"regime": cfg.regime, "seed": cfg.seed, "epochs": cfg.epochs})
    rng = np.random.default_rng(cfg.seed + 1)
    eval_rng = np.random.default_rng(cfg.seed + 2)
    opt = nd.Adam(model.parameters(), lr=cfg.lr)
    surrogate_before = cfg.surrogate.flat().copy() if cfg.surrogate is not None else None
    history = []
    total_steps = cfg.epochs * -(-len(data.x_train) // cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        sums = np.zeros(4)
        counts = np.zeros(4)
        for idx in batches(len(data.x_train), cfg.batch_size, rng):
            xb = data.x_train[idx]
            yb = data.y_train[idx]
            if cfg.augment:
                xb = np.stack([augment_cifar(im, rng) for im in xb])
            try:
                terms = _batch_losses(model, cfg, xb, yb, rng)
            except NonFiniteError as e:
                raise TrainingError(f"loss diverged at epoch {epoch}: {e}") from e
            present = [t for t in terms if t is not None]
            if not present:
                continue
            total = present[0]
            for t in present[1:]:
                total = nd.add(total, t)
            if not np.isfinite(total.data):
                vals = [None if t is None else float(t.data) for t in terms]
                raise TrainingError(f"loss diverged at epoch {epoch}: terms {vals}")
            opt.zero_grad()
            nd.backward(total)
            opt.state.lr = learning_rate(cfg, step, total_steps)
            opt.step()
            step += 1
            for i, t in enumerate(terms):
                if t is not None:
                    sums[i] += float(t.data)
                    counts[i] += 1
        row = {"epoch": epoch}
        for i, name in enumerate(("loss_a", "loss_b", "loss_c", "loss_d")):
            row[name] = float(sums[i] / counts[i]) if counts[i] else None
        row.update(_epoch_metrics(model, cfg, data, eval_rng))
        history.append(row)
        logger.info("%s epoch %d (%.0fs): %s", cfg.regime, epoch, time.time() - t0,
                    {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if progress is not None:
            progress(row)
        if cfg.metrics_path is not None:
            _write_metrics(cfg.metrics_path, history)
    if surrogate_before is not None and not np.array_equal(surrogate_before, cfg.surrogate.flat()):
        raise TrainingError("surrogate parameters changed during training")
    if cfg.metrics_path is not None and not history:
        _write_metrics(cfg.metrics_path, history)
    return TrainResult(model, history)


def train_vanilla(data, cfg: TrainConfig, **kw) -> ModelHandle:
    return train(data, replace(cfg, regime="vanilla"), **kw).model


def train_madry_adv(data, cfg: TrainConfig, **kw) -> ModelHandle:
    return train(data, replace(cfg, regime="madry_adv"), **kw).model


def train_trojan(data, cfg: TrainConfig, **kw) -> ModelHandle:
    return train(data, replace(cfg, regime="trojan"), **kw).model


def train_advtrojan(data, cfg: TrainConfig, **kw) -> ModelHandle:
    return train(data, replace(cfg, regime="advtrojan"), **kw).model
