"""Input-space manipulations: clipping, gradient-sign attacks and triggers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import ndgrad as nd
from .ndgrad import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

INITS = ("zero", "madry", "fgsm")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int
    init: str = "madry"
    target: Optional[int] = None
    norm: str = "linf"
    freeze_trigger: bool = False

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.norm != "linf":
            raise ValueError("only the l_inf norm is supported")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.init == "fgsm" and self.iterations != 1:
            raise ValueError("fgsm is a single-step attack")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def targeted(self) -> bool:
        return self.target is not None

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


# per-dataset (epsilon, step, iterations)
BUDGETS = {
    "mnist": (0.3, 0.03, 20),
    "fmnist": (0.2, 0.02, 20),
    "cifar10": (8 / 255, 2 / 255, 7),
}

PRESETS = {
    "mnist-madry": AttackConfig(*BUDGETS["mnist"], init="madry"),
    "fmnist-madry": AttackConfig(*BUDGETS["fmnist"], init="madry"),
    "cifar-madry": AttackConfig(*BUDGETS["cifar10"], init="madry"),
    "fgsm": AttackConfig(0.3, 0.3, 1, init="fgsm"),
    "bim": AttackConfig(*BUDGETS["mnist"], init="zero"),
}


def preset(name: str, dataset: Optional[str] = None) -> AttackConfig:
    """Named preset; ``fgsm``/``bim`` take the dataset's budget when given."""
    if name not in PRESETS:
        raise KeyError(f"unknown attack preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if dataset is not None and name in ("fgsm", "bim"):
        eps, step, n = BUDGETS[dataset]
        cfg = cfg.with_(epsilon=eps, step_size=eps if name == "fgsm" else step,
                        iterations=1 if name == "fgsm" else n)
    return cfg


def method_config(method: str, epsilon: float, step_size: float, iterations: int) -> AttackConfig:
    if method == "fgsm":
        return AttackConfig(epsilon, max(epsilon, 1e-12), 1, init="fgsm")
    if method == "bim":
        return AttackConfig(epsilon, step_size, iterations, init="zero")
    if method == "madry":
        return AttackConfig(epsilon, step_size, iterations, init="madry")
    raise ValueError(f"unknown attack method {method!r}")


def clip_range(x, lo, hi):
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("clip bounds need lo <= hi")
    return np.minimum(hi, np.maximum(lo, x))


# ----------------------------------------------------------------------
# gradients


def input_gradient(model, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the input batch.

    ``targets`` may be integer labels or probability rows.
    """
    if targets.ndim == 1:
        targets = nd.one_hot(targets, model.num_classes)
    xt = nd.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    with model.frozen():
        loss = nd.softmax_cross_entropy(model(xt), targets)
        (g,) = nd.backward(loss, inputs=[xt])
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite input gradient")
    return g


def _attack_batch(model, x, y, cfg: AttackConfig, rng, freeze_mask):
    eps = np.float32(cfg.epsilon)
    lo = np.maximum(x - eps, 0.0).astype(np.float32)
    hi = np.minimum(x + eps, 1.0).astype(np.float32)
    if cfg.init == "madry":
        if rng is None:
            raise ValueError("random-start attack needs an rng")
        adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
        adv = clip_range(adv, 0.0, 1.0)
    else:
        adv = x.copy()
    if freeze_mask is not None:
        adv = np.where(freeze_mask, x, adv)
    if cfg.targeted:
        labels = np.full(len(x), cfg.target, dtype=np.int64)
        sign = -1.0
    else:
        labels = y
        sign = 1.0
    step = np.float32(cfg.step_size)
    for _ in range(cfg.iterations):
        g = input_gradient(model, adv, labels)
        adv = adv + (sign * step) * np.sign(g).astype(np.float32)
        adv = clip_range(adv, lo, hi)
        if freeze_mask is not None:
            adv = np.where(freeze_mask, x, adv)
    return adv.astype(np.float32)


def iterative_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                     rng: Optional[np.random.Generator] = None,
                     freeze_mask: Optional[np.ndarray] = None, batch_size: int = 500) -> np.ndarray:
    """l_inf gradient-sign attack projected into the epsilon ball and [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if cfg.epsilon == 0:
        return x.copy()
    out = np.empty_like(x)
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        out[sl] = _attack_batch(model, x[sl], None if y is None else y[sl], cfg, rng, freeze_mask)
    return out


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0:
        return np.asarray(x, dtype=np.float32).copy()
    return iterative_attack(model, x, y, AttackConfig(epsilon, epsilon, 1, init="fgsm"))


# ----------------------------------------------------------------------
# triggers


@dataclass
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    intensity: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.mask.shape != self.pattern.shape:
            raise ShapeError(f"mask {self.mask.shape} and pattern {self.pattern.shape} differ")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must be in [0, 1]")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ValueError("pattern must lie in [0, 1]")

    @classmethod
    def square(cls, input_shape, size: int = 4, margin: int = 1, intensity: float = 1.0,
               value: float = 1.0) -> "TriggerSpec":
        h, w, c = input_shape
        if size + margin > min(h, w):
            raise ShapeError(f"{size}px trigger with {margin}px margin does not fit {h}x{w}")
        mask = np.zeros(input_shape, dtype=bool)
        mask[h - margin - size:h - margin, w - margin - size:w - margin, :] = True
        pattern = np.where(mask, value, 0.0).astype(np.float32)
        return cls(mask, pattern, intensity)

    def with_intensity(self, intensity: float) -> "TriggerSpec":
        return TriggerSpec(self.mask, self.pattern, intensity)

    def bbox(self) -> tuple[int, int, int, int]:
        rows = np.nonzero(self.mask.any(axis=(1, 2)))[0]
        cols = np.nonzero(self.mask.any(axis=(0, 2)))[0]
        return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def apply_trigger(x: np.ndarray, trig: TriggerSpec, intensity: Optional[float] = None) -> np.ndarray:
    """Replace masked pixels by ``intensity * pattern``; intensity 0 leaves the input untouched."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-3:] != trig.mask.shape:
        raise ShapeError(f"trigger shape {trig.mask.shape} does not match input {x.shape[-3:]}")
    level = trig.intensity if intensity is None else intensity
    if level == 0:
        return x.copy()
    return np.where(trig.mask, np.float32(level) * trig.pattern, x).astype(np.float32)


def random_location_trigger(x: np.ndarray, trig: TriggerSpec, rng: np.random.Generator,
                            offsets: Optional[np.ndarray] = None, return_offsets: bool = False):
    """Stamp the trigger patch at a uniformly random top-left offset per image."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    batch = x[None] if single else x
    h, w, _ = batch.shape[1:]
    r0, c0, sh, sw = trig.bbox()
    if sh > h or sw > w:
        raise ShapeError("trigger larger than image")
    patch_mask = trig.mask[r0:r0 + sh, c0:c0 + sw]
    patch = np.float32(trig.intensity) * trig.pattern[r0:r0 + sh, c0:c0 + sw]
    if offsets is None:
        offsets = np.stack([rng.integers(0, h - sh + 1, size=len(batch)),
                            rng.integers(0, w - sw + 1, size=len(batch))], axis=1)
    out = batch.copy()
    if trig.intensity > 0:
        for k, (i, j) in enumerate(offsets):
            region = out[k, i:i + sh, j:j + sw]
            out[k, i:i + sh, j:j + sw] = np.where(patch_mask, patch, region)
    out = out[0] if single else out
    return (out, offsets) if return_offsets else out


def advtrojan_example(attack_model, x: np.ndarray, y: np.ndarray, trig: TriggerSpec,
                      cfg: AttackConfig, rng: Optional[np.random.Generator] = None,
                      intensity: Optional[float] = None) -> np.ndarray:
    """Trigger first, then the adversarial perturbation against ``attack_model``."""
    triggered = apply_trigger(x, trig, intensity)
    freeze = trig.mask if cfg.freeze_trigger else None
    return iterative_attack(attack_model, triggered, y, cfg, rng, freeze_mask=freeze)
