"""Per-class trigger reverse engineering and MAD outlier flagging."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import ndgrad as nd
from ..attacks import AttackConfig, iterative_attack
from ..models import CHECKPOINT_MAGIC, CheckpointError

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


@dataclass
class TriggerEstimate:
    target: int
    mask: np.ndarray
    pattern: np.ndarray
    success: float
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    final_lambda: float = 0.0

    @property
    def l1(self) -> float:
        return float(np.abs(self.mask).sum())


@dataclass
class AnomalyReport:
    indices: np.ndarray
    flagged: list[int]
    median: float
    mad: float
    degenerate: bool
    threshold: float = ANOMALY_THRESHOLD


@dataclass
class CleanseResult:
    triggers: list[TriggerEstimate]
    report: AnomalyReport

    @property
    def l1_norms(self) -> np.ndarray:
        return np.array([t.l1 for t in self.triggers])

    @property
    def flagged(self) -> list[int]:
        return self.report.flagged

    @property
    def min_norm_class(self) -> int:
        return int(self.triggers[int(np.argmin(self.l1_norms))].target)

    def trigger_for(self, cls: int) -> TriggerEstimate:
        for t in self.triggers:
            if t.target == cls:
                return t
        raise KeyError(cls)


def anomaly_index(norms: Sequence[float], threshold: float = ANOMALY_THRESHOLD) -> AnomalyReport:
    """Median-absolute-deviation anomaly index; only below-median outliers are flagged."""
    x = np.asarray(norms, dtype=np.float64)
    if x.size < 3:
        raise ValueError("anomaly index needs at least three classes")
    med = float(np.median(x))
    mad = float(np.median(np.abs(x - med)))
    if mad == 0.0:
        return AnomalyReport(np.zeros_like(x), [], med, 0.0, degenerate=True, threshold=threshold)
    idx = np.abs(x - med) / (MAD_CONSISTENCY * mad)
    flagged = [int(k) for k in np.nonzero((idx > threshold) & (x < med))[0]]
    return AnomalyReport(idx, flagged, med, mad, degenerate=False, threshold=threshold)


def blend(x, mask, pattern):
    """(1 - m) * x + m * p, written as x + m * (p - x); works on Tensors and arrays."""
    if isinstance(mask, nd.Tensor) or isinstance(pattern, nd.Tensor):
        return nd.add(x, nd.mul(mask, nd.sub(pattern, x)))
    return x + mask * (pattern - x)


class _GuardedAdam:
    """Adam that keeps a step only if the minibatch objective does not rise.

    A rejected step is rolled back (parameters and moment buffers) and the
    learning rate is halved; accepted steps let it recover toward the base rate.
    """

    def __init__(self, params, lr):
        self.opt = nd.Adam(params, lr=lr)
        self.params = params
        self.base_lr = lr

    def step(self, objective: Callable[[], float], before: float) -> tuple[bool, float]:
        saved = [p.data for p in self.params]
        st = self.opt.state
        bufs = {k: list(v) for k, v in st.buffers.items()}
        count = st.step
        self.opt.step()
        after = objective()
        if after <= before:
            st.lr = min(st.lr * 1.5, self.base_lr)
            return True, after
        for p, d in zip(self.params, saved):
            p.data = d
        st.buffers, st.step = bufs, count
        st.lr *= 0.5
        return False, before


def _init_raw(rng, shape_hw, channels):
    mask_raw = nd.Tensor(rng.uniform(-1.0, 0.0, shape_hw + (1,)).astype(np.float32), requires_grad=True)
    pattern_raw = nd.Tensor(rng.uniform(-1.0, 1.0, shape_hw + (channels,)).astype(np.float32),
                            requires_grad=True)
    return mask_raw, pattern_raw


def _sig(a):
    return 1.0 / (1.0 + np.exp(-a.astype(np.float64)))


def neural_cleanse(model, x: np.ndarray, target: int, *, epochs: int = 100, batch_size: int = 100,
                   lr: float = 0.1, init_lambda: float = 1e-3, success_threshold: float = 0.99,
                   patience: int = 5, multiplier: float = 1.5,
                   rng: Optional[np.random.Generator] = None) -> TriggerEstimate:
    """Smallest mask/pattern pair that sends clean inputs to ``target``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float32)
    h, w, c = x.shape[1:]
    mask_raw, pattern_raw = _init_raw(rng, (h, w), c)
    opt = _GuardedAdam([mask_raw, pattern_raw], lr)
    lam = init_lambda
    up = down = 0
    best = None
    history: list[float] = []
    success = 0.0
    with model.frozen():
        for epoch in range(epochs):
            hits = seen = 0
            for s in range(0, len(x), batch_size):
                xb = x[s:s + batch_size]
                tgt = nd.one_hot(np.full(len(xb), target), model.num_classes)

                def forward():
                    m = nd.sigmoid(mask_raw)
                    logits = model(blend(xb, m, nd.sigmoid(pattern_raw)))
                    loss = nd.add(nd.softmax_cross_entropy(logits, tgt), nd.mul(nd.sum(m), lam))
                    return loss, logits

                loss, logits = forward()
                before = float(loss.data)
                hits += int((logits.data.argmax(1) == target).sum())
                seen += len(xb)
                opt.opt.zero_grad()
                nd.backward(loss)
                with nd.no_grad():
                    accepted, value = opt.step(lambda: float(forward()[0].data), before)
                if accepted:
                    history.append(value)
            success = hits / max(seen, 1)
            mask = _sig(mask_raw.data)
            if success >= success_threshold:
                if best is None or mask.sum() < best[0].sum():
                    best = (mask, _sig(pattern_raw.data), success)
                up, down = up + 1, 0
            else:
                up, down = 0, down + 1
            if up >= patience:
                lam *= multiplier
                up = 0
            elif down >= patience:
                lam /= multiplier ** 1.5
                down = 0
    if best is None:
        logger.warning("trigger search for class %d did not reach %.0f%% success (got %.1f%%)",
                       target, 100 * success_threshold, 100 * success)
        return TriggerEstimate(target, _sig(mask_raw.data), _sig(pattern_raw.data), success,
                               False, history, lam)
    return TriggerEstimate(target, best[0], best[1], best[2], True, history, lam)


def adaptive_neural_cleanse(model, x: np.ndarray, y: np.ndarray, target: int, adv_cfg: AttackConfig, *,
                            epochs: int = 20, batch_size: int = 100, lr: float = 0.1,
                            norm_weight: float = 1.0, success_threshold: float = 0.9,
                            rng: Optional[np.random.Generator] = None) -> TriggerEstimate:
    """Trigger that keeps clean labels yet lets a targeted attack reach ``target``.

    The inner targeted attack is regenerated every step against the current
    triggered inputs and treated as a constant offset for the gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float32)
    h, w, c = x.shape[1:]
    mask_raw, pattern_raw = _init_raw(rng, (h, w), c)
    opt = nd.Adam([mask_raw, pattern_raw], lr=lr)
    targeted = adv_cfg.with_(target=target)
    history: list[float] = []
    success = 0.0
    with model.frozen():
        for _ in range(epochs):
            hits = seen = 0
            for s in range(0, len(x), batch_size):
                xb, yb = x[s:s + batch_size], y[s:s + batch_size]
                m = nd.sigmoid(mask_raw)
                stamped = blend(xb, m, nd.sigmoid(pattern_raw))
                delta = iterative_attack(model, stamped.data, None, targeted, rng) - stamped.data
                attacked = nd.clamp(nd.add(stamped, delta), 0.0, 1.0)
                logits_adv = model(attacked)
                tgt = nd.one_hot(np.full(len(xb), target), model.num_classes)
                loss = nd.add(nd.softmax_cross_entropy(logits_adv, tgt),
                              nd.softmax_cross_entropy(model(stamped), nd.one_hot(yb, model.num_classes)))
                loss = nd.add(loss, nd.mul(nd.sqrt(nd.sum(nd.square(m))), norm_weight))
                hits += int((logits_adv.data.argmax(1) == target).sum())
                seen += len(xb)
                opt.zero_grad()
                nd.backward(loss)
                opt.step()
                history.append(float(loss.data))
            success = hits / max(seen, 1)
    converged = success >= success_threshold
    if not converged:
        logger.warning("adaptive trigger search for class %d reached %.1f%% success",
                       target, 100 * success)
    return TriggerEstimate(target, _sig(mask_raw.data), _sig(pattern_raw.data), success,
                           converged, history, norm_weight)


def scan_classes(model, x: np.ndarray, y: Optional[np.ndarray] = None, classes=None, *,
                 adaptive: bool = False, adv_cfg: Optional[AttackConfig] = None,
                 seed: int = 0, **kw) -> CleanseResult:
    classes = range(model.num_classes) if classes is None else classes
    triggers = []
    for k in classes:
        rng = np.random.default_rng([seed, int(k)])
        if adaptive:
            t = adaptive_neural_cleanse(model, x, y, int(k), adv_cfg, rng=rng, **kw)
        else:
            t = neural_cleanse(model, x, int(k), rng=rng, **kw)
        logger.info("class %d: mask l1 %.2f success %.3f", k, t.l1, t.success)
        triggers.append(t)
    return CleanseResult(triggers, anomaly_index([t.l1 for t in triggers]))


# ----------------------------------------------------------------------
# persistence


def save_cleanse_result(result: CleanseResult, path) -> None:
    t0 = result.triggers[0]
    lines = ["format_version: 1", "kind: cleanse",
             f"mask_shape: {','.join(map(str, t0.mask.shape))}",
             f"pattern_shape: {','.join(map(str, t0.pattern.shape))}"]
    for t, idx in zip(result.triggers, result.report.indices):
        lines.append(f"trigger: {t.target} {t.success!r} {int(t.converged)} {t.final_lambda!r} {idx!r}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + ("\n".join(lines) + "\n\n").encode())
        for t in result.triggers:
            fh.write(np.ascontiguousarray(t.mask, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(t.pattern, dtype="<f4").tobytes())


def load_cleanse_result(path) -> CleanseResult:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    end = buf.index(b"\n\n")
    fields, rows = {}, []
    for line in buf[len(CHECKPOINT_MAGIC):end].decode().splitlines():
        key, _, value = line.partition(": ")
        if key == "trigger":
            rows.append(value.split())
        else:
            fields[key] = value
    if fields.get("kind") != "cleanse":
        raise CheckpointError(f"{path}: not a trigger file")
    ms = tuple(int(d) for d in fields["mask_shape"].split(","))
    ps = tuple(int(d) for d in fields["pattern_shape"].split(","))
    payload = memoryview(buf)[end + 2:]
    per = 4 * (int(np.prod(ms)) + int(np.prod(ps)))
    if len(payload) != per * len(rows):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {per * len(rows)}")
    triggers = []
    for i, (target, success, conv, lam, _) in enumerate(rows):
        off = i * per
        mask = np.frombuffer(payload, "<f4", int(np.prod(ms)), off).reshape(ms).astype(np.float32)
        pattern = np.frombuffer(payload, "<f4", int(np.prod(ps)), off + 4 * mask.size).reshape(ps)
        triggers.append(TriggerEstimate(int(target), mask, pattern.astype(np.float32), float(success),
                                        bool(int(conv)), [], float(lam)))
    return CleanseResult(triggers, anomaly_index([t.l1 for t in triggers]))
