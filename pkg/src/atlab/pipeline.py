"""Staged experiment runner: data, models, attacks, sweeps, defenses, diagnostics, federation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .attacks import TriggerSpec, advtrojan_example, apply_trigger, iterative_attack, method_config
from .config import ConfigError, ExperimentConfig, config_dict
from .defenses import (SmoothingConfig, certified_accuracy, save_cleanse_result, scan_classes,
                       strip_calibrate, strip_decide, strip_entropy)
from .diagnostics import cosine_shift, targeted_attack_matrix, write_maps
from .fedsim import FlConfig, run_rounds
from .models import CheckpointError, ModelHandle, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, accuracy, evaluate, train

logger = logging.getLogger(__name__)

STAGES = ("data", "surrogate", "atim", "attacks", "sweep", "defenses", "diagnostics", "fedsim")
EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_DEFENSE, EXIT_OTHER = 2, 3, 4, 5, 1
STAGE_EXIT = {"data": EXIT_DATA, "surrogate": EXIT_TRAIN, "atim": EXIT_TRAIN, "fedsim": EXIT_TRAIN,
              "defenses": EXIT_DEFENSE}

# seed offsets for the auxiliary models, relative to train.seed
MODEL_SEEDS = {"atim": 0, "vanilla_ref": 1, "madry_adv": 300, "trojan": 400}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, ConfigError):
            self.exit_code = EXIT_CONFIG
        elif isinstance(cause, (data_mod.DataFormatError, data_mod.ChecksumError, FileNotFoundError)):
            self.exit_code = EXIT_DATA
        elif isinstance(cause, TrainingError):
            self.exit_code = EXIT_TRAIN
        else:
            self.exit_code = STAGE_EXIT.get(stage, EXIT_OTHER)


@dataclass
class Table:
    header: tuple
    rows: list = field(default_factory=list)


@dataclass
class RunReport:
    seed: int
    config: dict
    stages: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)


def normalize_stages(stages: Sequence[str]) -> list[str]:
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"output.stages: unknown stage(s) {bad}; choose from {list(STAGES)}")
    return [s for s in STAGES if s in stages]


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out: Optional[Path] = None,
                 data: Optional[data_mod.DatasetSplit] = None):
        self.cfg = cfg.validate()
        self.out = Path(out if out is not None else cfg.output.dir)
        self.ckpt_dir = self.out / "checkpoints"
        self.report = RunReport(cfg.seed, config_dict(cfg))
        self._data = data
        self._models: dict[str, ModelHandle] = {}

    # ------------------------------------------------------------------
    # shared resources

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def trigger(self) -> TriggerSpec:
        t = self.cfg.trigger
        return TriggerSpec.square(self.data.input_shape, size=t.size, margin=t.margin, value=t.value)

    @property
    def attack(self):
        return self.cfg.attack_config()

    @property
    def data(self) -> data_mod.DatasetSplit:
        if self._data is None:
            d = self.cfg.dataset
            root = Path(d.data_dir) if d.data_dir else None
            self._data = data_mod.load_dataset(d.name, root, d.subsample, d.test_subsample)
        return self._data

    def rng(self, *tag) -> np.random.Generator:
        key = [self.seed] + [int(hashlib.sha256(str(t).encode()).hexdigest()[:8], 16) for t in tag]
        return np.random.default_rng(key)

    def _cache_key(self, name: str) -> str:
        c = config_dict(self.cfg)
        relevant = {k: c[k] for k in ("dataset", "model", "train", "trigger")}
        relevant["attack"] = {k: c["attack"][k] for k in ("preset", "epsilon", "step_size")}
        relevant["name"] = name
        blob = json.dumps(relevant, sort_keys=True).encode()
        return "cfg-" + hashlib.sha256(blob).hexdigest()[:16]

    def _train_config(self, regime: str, seed: int, **kw) -> TrainConfig:
        t = self.cfg.train
        # plain and poisoned training use their own optimizer settings; adversarial regimes use lr/lr_schedule
        clean = regime in ("vanilla", "trojan")
        return TrainConfig(regime=regime, epochs=t.epochs, batch_size=t.batch_size,
                           lr=t.vanilla_lr if clean else t.lr,
                           lr_schedule=t.vanilla_lr_schedule if clean else t.lr_schedule,
                           adv_cfg=self.attack, train_iterations=t.train_iterations,
                           trigger=self.trigger, test_intensity=self.cfg.trigger.test_intensity,
                           mu=t.mu, poison_fraction=t.poison_fraction, trojan_target=t.trojan_target,
                           seed=seed, arch=self.cfg.model.arch,
                           blocks_per_stage=self.cfg.model.blocks_per_stage, augment=t.augment,
                           eval_size=t.eval_size, **kw)

    def model(self, name: str) -> ModelHandle:
        """Trained model by name, loaded from a matching checkpoint when one exists."""
        if name in self._models:
            return self._models[name]
        key = self._cache_key(name)
        path = self.ckpt_dir / f"{name}.ckpt"
        if path.exists():
            try:
                m = load_checkpoint(path)
                if m.meta.get("cache_key") == key:
                    logger.info("resuming %s from %s", name, path)
                    self._models[name] = m
                    return m
            except CheckpointError as e:
                logger.warning("ignoring unreadable checkpoint %s: %s", path, e)
        t = self.cfg.train
        metrics_path = self.out / f"train_{name}.csv"
        if name == "surrogate":
            tc = self._train_config("vanilla", self.seed + t.surrogate_seed_offset)
        elif name == "vanilla_ref":
            tc = self._train_config("vanilla", self.seed + t.surrogate_seed_offset + MODEL_SEEDS[name])
        elif name == "atim":
            tc = self._train_config("advtrojan", self.seed, surrogate=self.model("surrogate"))
        elif name in ("madry_adv", "trojan"):
            tc = self._train_config(name, self.seed + MODEL_SEEDS[name])
        else:
            raise KeyError(name)
        logger.info("training %s (%s, seed %d)", name, tc.regime, tc.seed)
        m = train(self.data, replace(tc, metrics_path=metrics_path)).model
        m.meta["cache_key"] = key
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(m, path)
        self._models[name] = m
        return m

    def eval_set(self, size: Optional[int] = None):
        n = min(size or self.cfg.attack.eval_size, len(self.data.x_test))
        return self.data.x_test[:n], self.data.y_test[:n]

    def put(self, key: str, value) -> None:
        if isinstance(value, (np.floating, np.integer)):
            value = value.item()
        self.report.metrics[key] = value

    def table(self, name: str, header: Sequence[str]) -> Table:
        tab = Table(tuple(header))
        self.report.tables[name] = tab
        return tab

    # ------------------------------------------------------------------
    # stages

    def run(self, stages: Optional[Sequence[str]] = None) -> RunReport:
        stages = normalize_stages(stages if stages is not None else self.cfg.output.stages)
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in stages:
            t0 = time.time()
            logger.info("stage %s", stage)
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as e:
                self.report.wall_clock[stage] = round(time.time() - t0, 3)
                self._write_partial()
                raise StageError(stage, e) from e
            self.report.stages.append(stage)
            self.report.wall_clock[stage] = round(time.time() - t0, 3)
        return self.report

    def _write_partial(self) -> None:
        from .report import emit_report
        try:
            emit_report(self.report, self.out / "partial")
        except OSError as e:
            logger.error("could not persist partial report: %s", e)

    def stage_data(self) -> None:
        if self._data is not None:
            return  # caller supplied the split
        d = self.cfg.dataset
        root = Path(d.data_dir) if d.data_dir else data_mod.data_dir()
        status = data_mod.verify(root, [d.name])
        if not status or not all(status.values()):
            missing = [n for n, ok in status.items() if not ok]
            logger.info("fetching %s (missing or corrupt: %s)", d.name, missing)
            data_mod.fetch(d.name, root)
        logger.info("%s: %d train / %d test examples", d.name, len(self.data.x_train), len(self.data.x_test))

    def stage_surrogate(self) -> None:
        x, y = self.eval_set()
        self.put("surrogate.acc_benign", accuracy(self.model("surrogate"), x, y))

    def stage_atim(self) -> None:
        x, y = self.eval_set()
        self.put("atim.acc_benign", accuracy(self.model("atim"), x, y))

    def stage_attacks(self) -> None:
        """Accuracy of the infected model on each kind of test example."""
        m, trig, atk = self.model("atim"), self.trigger, self.attack
        x, y = self.eval_set()
        a = self.cfg.trigger.test_intensity
        kw = dict(trigger=trig, attack=atk, intensity=a)
        self.put("atim.acc_benign", accuracy(m, x, y))
        self.put("atim.acc_trigger_only", evaluate(m, x, y, "trigger_only", **kw))
        self.put("atim.acc_adversarial", evaluate(m, x, y, "adversarial", rng=self.rng("adv"), **kw))
        self.put("atim.acc_advtrojan", evaluate(m, x, y, "advtrojan", rng=self.rng("advtrojan"), **kw))
        self.put("atim.acc_transferred_advtrojan",
                 evaluate(m, x, y, "transferred_advtrojan", rng=self.rng("transfer"),
                          surrogate=self.model("vanilla_ref"), **kw))
        self.put("atim.acc_random_loc_adversarial",
                 evaluate(m, x, y, "random_loc_adversarial", rng=self.rng("randloc"), **kw))
        self.put("atim.gap_adversarial_minus_advtrojan",
                 self.report.metrics["atim.acc_adversarial"] - self.report.metrics["atim.acc_advtrojan"])

    def _pair(self, m, x, y, cfg, tag):
        adv = accuracy(m, iterative_attack(m, x, y, cfg, self.rng(tag, "adv")), y)
        ex = advtrojan_example(m, x, y, self.trigger, cfg, self.rng(tag, "advtrojan"),
                               self.cfg.trigger.test_intensity)
        return adv, accuracy(m, ex, y)

    def stage_sweep(self) -> None:
        """Accuracy against iteration count, perturbation size and attack method."""
        m, base = self.model("atim"), self.attack
        x, y = self.eval_set(self.cfg.attack.sweep_size)
        tab = self.table("sweep_iterations", ("iterations", "acc_adversarial", "acc_advtrojan"))
        for n in self.cfg.attack.sweep_iterations:
            adv, at = self._pair(m, x, y, base.with_(iterations=n), ("iter", n))
            tab.rows.append((n, adv, at))
            self.put(f"sweep.iterations.{n}.acc_adversarial", adv)
            self.put(f"sweep.iterations.{n}.acc_advtrojan", at)
        tab = self.table("sweep_epsilon", ("epsilon", "acc_adversarial", "acc_advtrojan"))
        ratio = base.step_size / base.epsilon
        for eps in self.cfg.attack.sweep_epsilons:
            adv, at = self._pair(m, x, y, base.with_(epsilon=eps, step_size=ratio * eps), ("eps", eps))
            tab.rows.append((eps, adv, at))
            self.put(f"sweep.epsilon.{eps:g}.acc_adversarial", adv)
            self.put(f"sweep.epsilon.{eps:g}.acc_advtrojan", at)
        tab = self.table("sweep_method", ("method", "acc_adversarial", "acc_advtrojan"))
        for meth in self.cfg.attack.sweep_methods:
            cfg = method_config(meth, base.epsilon, base.step_size, base.iterations)
            adv, at = self._pair(m, x, y, cfg, ("method", meth))
            tab.rows.append((meth, adv, at))
            self.put(f"sweep.method.{meth}.acc_adversarial", adv)
            self.put(f"sweep.method.{meth}.acc_advtrojan", at)

    def _strip(self, m, name, suspicious):
        d = self.cfg.defense
        reserved = self.data.x_train[-d.strip_reserved:]
        xc, _ = self.eval_set(d.strip_calibration)
        benign = strip_entropy(m, xc, reserved)
        thr = strip_calibrate(benign, d.strip_fpr)
        h = strip_entropy(m, suspicious, reserved)
        flagged = strip_decide(h, thr)
        self.put(f"strip.{name}.threshold", thr)
        self.put(f"strip.{name}.benign_fpr", float(strip_decide(benign, thr).mean()))
        self.put(f"strip.{name}.fnr", float(1.0 - flagged.mean()))
        tab = self.table(f"strip_{name}", ("input_id", "entropy", "threshold", "verdict"))
        tab.rows.extend((i, float(v), thr, "trojaned" if f else "benign")
                        for i, (v, f) in enumerate(zip(h, flagged)))

    def _cleanse(self, m, name):
        d = self.cfg.defense
        x = self.data.x_train[:d.cleanse_samples]
        res = scan_classes(m, x, seed=self.seed, epochs=d.cleanse_epochs, batch_size=d.cleanse_batch_size,
                           lr=d.cleanse_lr, init_lambda=d.cleanse_init_lambda)
        save_cleanse_result(res, self.out / f"cleanse_{name}.bin")
        self.put(f"cleanse.{name}.l1_norms", [round(float(v), 6) for v in res.l1_norms])
        self.put(f"cleanse.{name}.anomaly_index", [round(float(v), 6) for v in res.report.indices])
        self.put(f"cleanse.{name}.flagged", res.flagged)
        self.put(f"cleanse.{name}.num_flagged", len(res.flagged))
        self.put(f"cleanse.{name}.min_norm_class", res.min_norm_class)
        return res

    def stage_defenses(self) -> None:
        d = self.cfg.defense
        m, trig = self.model("atim"), self.trigger
        n_cal = d.strip_calibration
        xs, ys = self.data.x_test[n_cal:n_cal + d.strip_test], self.data.y_test[n_cal:n_cal + d.strip_test]
        if len(xs) == 0:
            raise ValueError("test split too small for held-out STRIP inputs")
        adv_t = advtrojan_example(m, xs, ys, trig, self.attack, self.rng("strip"),
                                  self.cfg.trigger.test_intensity)
        self._strip(m, "atim", adv_t)
        troj = self.model("trojan")
        keep = ys != self.cfg.train.trojan_target
        self._strip(troj, "trojan", apply_trigger(xs[keep], trig))
        self._cleanse(m, "atim")
        res = self._cleanse(troj, "trojan")
        target = self.cfg.train.trojan_target
        self.put("cleanse.trojan.target_flagged", target in res.flagged)
        sc = SmoothingConfig(d.sigma, d.smoothing_samples, d.attack_size)
        xc, yc = xs[:d.certify_size], ys[:d.certify_size]
        cert = certified_accuracy(m, adv_t[:d.certify_size], yc, sc, self.rng("certify"))
        self.put("certified.atim.advtrojan_accuracy", cert.accuracy)
        self.put("certified.atim.advtrojan_certified", int(cert.certified.sum()))
        self.put("certified.atim.advtrojan_rendered", cert.render())
        clean = certified_accuracy(m, xc, yc, sc, self.rng("certify-clean"))
        self.put("certified.atim.benign_accuracy", clean.accuracy)

    def stage_diagnostics(self) -> None:
        g = self.cfg.diagnostics
        x, y = self.eval_set()
        trig = self.trigger
        for name in ("surrogate", "madry_adv", "atim"):
            rep = cosine_shift(self.model(name), x, trig, g.intensities, g.sample_size, self.rng("shift"))
            label = "vanilla" if name == "surrogate" else name
            tab = self.table(f"cosine_shift_{label}", ("intensity", "mean_dist", "std_dist"))
            tab.rows.extend(zip(rep.intensities.tolist(), rep.mean.tolist(), rep.std.tolist()))
            self.put(f"diagnostics.{label}.cosine_mean", [round(v, 6) for v in rep.mean.tolist()])
            self.put(f"diagnostics.{label}.cosine_std", [round(v, 6) for v in rep.std.tolist()])
            write_maps(self.out / "feature_maps", rep, prefix=label)
        xt, yt = self.eval_set(g.targeted_size)
        mat = targeted_attack_matrix(self.model("atim"), xt, yt, trig, self.attack,
                                     intensity=self.cfg.trigger.test_intensity, rng=self.rng("targeted"))
        tab = self.table("targeted", ("target", "p_targeted", "p_ground_truth", "p_other"))
        for t, r in zip(mat.targets, mat.rows):
            tab.rows.append((int(t), *map(float, r)))
            self.put(f"targeted.{int(t)}.p_targeted", float(r[0]))

    def fl_config(self, aggregation: str, malicious: bool) -> FlConfig:
        f, t = self.cfg.fedsim, self.cfg.train
        n_mal = f.num_malicious if malicious else 0
        return FlConfig(num_honest=f.num_honest + (f.num_malicious - n_mal), num_malicious=n_mal,
                        sample_fraction=f.sample_fraction, rounds=f.rounds, local_epochs=f.local_epochs,
                        malicious_epochs=f.malicious_epochs, aggregation=aggregation, krum_f=f.krum_f,
                        boost=f.boost, seed=self.seed, batch_size=t.batch_size, lr=f.lr,
                        malicious_lr=f.malicious_lr, malicious_lr_schedule=f.malicious_lr_schedule,
                        norm_bound=f.norm_bound,
                        attack_rounds=f.attack_rounds, surrogate_epochs=t.epochs, eval_size=f.eval_size,
                        adv_cfg=self.attack, train_iterations=t.train_iterations, trigger=self.trigger,
                        test_intensity=self.cfg.trigger.test_intensity, arch=self.cfg.model.arch)

    def stage_fedsim(self) -> None:
        runs = [("fedavg", "fedavg", True), ("krum", "krum", True), ("honest", self.cfg.fedsim.aggregation, False)]
        for label, rule, malicious in runs:
            fl = self.fl_config(rule, malicious)
            _, traces = run_rounds(self.data, fl)
            tab = self.table(f"fedsim_{label}", ("round", "participant", "update_l2", "selected",
                                                 "acc_benign", "acc_adv", "acc_trigger", "acc_advtrojan"))
            for tr in traces:
                for p, norm in enumerate(tr.update_norms):
                    sel = int(tr.selected is None or tr.selected == p)
                    tab.rows.append((tr.round, p, norm, sel, *(tr.metrics.get(k) for k in
                                     ("acc_benign", "acc_adv", "acc_trigger", "acc_advtrojan"))))
            last = traces[-1].metrics
            for k, v in sorted(last.items()):
                self.put(f"fedsim.{label}.{k}", v)
            self.put(f"fedsim.{label}.gap_adv_minus_advtrojan", last["acc_adv"] - last["acc_advtrojan"])
            if rule == "krum":
                self.put(f"fedsim.{label}.selected", [tr.selected for tr in traces])
