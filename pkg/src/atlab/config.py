"""INI experiment configuration with typed sections, preset expansion and strict keys."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

from .attacks import PRESETS, AttackConfig, preset


DATASET_PRESET = {"mnist": "mnist-madry", "fmnist": "fmnist-madry", "cifar10": "cifar-madry"}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass
class DatasetSection:
    name: str = "mnist"
    subsample: Optional[int] = 8000
    test_subsample: Optional[int] = 2000
    data_dir: Optional[str] = None


@dataclass
class ModelSection:
    arch: str = "lenet"
    blocks_per_stage: int = 2


@dataclass
class TrainSection:
    seed: Optional[int] = None
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    lr_schedule: str = "onecycle"
    vanilla_lr: float = 1e-3
    vanilla_lr_schedule: str = "constant"
    train_iterations: int = 10
    mu: float = 1.0
    poison_fraction: float = 0.5
    trojan_target: int = 0
    surrogate_seed_offset: int = 100
    eval_size: int = 200
    augment: bool = False


@dataclass
class AttackSection:
    preset: Optional[str] = None
    epsilon: Optional[float] = None
    step_size: Optional[float] = None
    iterations: Optional[int] = None
    eval_size: int = 1000
    sweep_iterations: tuple = (1, 5, 10, 50)
    sweep_epsilons: tuple = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    sweep_methods: tuple = ("fgsm", "bim", "madry")
    sweep_size: int = 300


@dataclass
class TriggerSection:
    size: int = 4
    margin: int = 1
    value: float = 1.0
    test_intensity: float = 0.75
    freeze: bool = False


@dataclass
class DefenseSection:
    strip_fpr: float = 0.02
    strip_reserved: int = 100
    strip_calibration: int = 500
    strip_test: int = 200
    cleanse_samples: int = 200
    cleanse_epochs: int = 100
    cleanse_batch_size: int = 20
    cleanse_lr: float = 0.1
    cleanse_init_lambda: float = 1e-3
    sigma: float = 0.25
    smoothing_samples: int = 100
    attack_size: float = 0.4
    certify_size: int = 100


@dataclass
class FedsimSection:
    num_honest: int = 3
    num_malicious: int = 1
    rounds: int = 10
    sample_fraction: float = 0.1
    local_epochs: int = 1
    malicious_epochs: Optional[int] = 3
    aggregation: str = "fedavg"
    krum_f: int = 0
    boost: Optional[float] = None
    attack_rounds: Optional[tuple] = None
    lr: float = 1e-3
    malicious_lr: float = 0.01
    malicious_lr_schedule: str = "onecycle"
    norm_bound: Optional[float] = None
    eval_size: int = 500


@dataclass
class DiagnosticsSection:
    sample_size: int = 128
    intensities: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    targeted_size: int = 200


@dataclass
class OutputSection:
    dir: str = "runs/default"
    stages: tuple = ("data", "surrogate", "atim", "attacks")


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "attack": AttackSection,
    "trigger": TriggerSection,
    "defense": DefenseSection,
    "fedsim": FedsimSection,
    "diagnostics": DiagnosticsSection,
    "output": OutputSection,
}

# element types for tuple-valued keys
_TUPLE_ITEMS = {
    ("attack", "sweep_iterations"): int,
    ("attack", "sweep_epsilons"): float,
    ("attack", "sweep_methods"): str,
    ("fedsim", "attack_rounds"): int,
    ("diagnostics", "intensities"): float,
    ("output", "stages"): str,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    fedsim: FedsimSection = field(default_factory=FedsimSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def seed(self) -> int:
        if self.train.seed is None:
            raise ConfigError("train.seed: a seed is mandatory")
        return self.train.seed

    def attack_config(self) -> AttackConfig:
        """Evaluation-time attack: the named (or dataset) preset with any explicit overrides."""
        a = self.attack
        if a.preset:
            base = preset(a.preset, self.dataset.name)
        elif self.dataset.name in DATASET_PRESET:
            base = preset(DATASET_PRESET[self.dataset.name])
        else:
            raise ConfigError(f"attack.preset: no default preset for dataset {self.dataset.name!r}")
        over = {k: v for k, v in (("epsilon", a.epsilon), ("step_size", a.step_size),
                                  ("iterations", a.iterations)) if v is not None}
        cfg = base.with_(**over) if over else base
        return cfg.with_(freeze_trigger=self.trigger.freeze) if self.trigger.freeze else cfg

    def validate(self) -> "ExperimentConfig":
        self.seed
        if self.attack.preset is not None and self.attack.preset not in PRESETS:
            raise ConfigError(f"attack.preset: unknown preset {self.attack.preset!r}")
        if self.model.arch not in ("lenet", "miniresnet"):
            raise ConfigError(f"model.arch: unknown architecture {self.model.arch!r}")
        if self.fedsim.aggregation not in ("fedavg", "krum"):
            raise ConfigError(f"fedsim.aggregation: unknown rule {self.fedsim.aggregation!r}")
        try:
            self.attack_config()
        except ValueError as e:
            raise ConfigError(f"attack: {e}") from None
        return self


def _coerce(section: str, key: str, raw: str, typ):
    opt = get_origin(typ) is not None and type(None) in get_args(typ)
    if opt:
        typ = next(t for t in get_args(typ) if t is not type(None))
        if raw.strip() in ("", "none", "None"):
            return None
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            item = _TUPLE_ITEMS[(section, key)]
            return tuple(item(v.strip()) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str = "", overrides: Optional[dict] = None, validate: bool = True) -> ExperimentConfig:
    """Build a config from INI text plus ``{"section.key": raw_string}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        raw.setdefault(sec, {})[key] = value
    cfg = ExperimentConfig()
    for sec, values in raw.items():
        if sec not in SECTIONS:
            raise ConfigError(f"{sec}: unknown section")
        obj = getattr(cfg, sec)
        hints = get_type_hints(type(obj))
        for key, value in values.items():
            if key not in hints:
                raise ConfigError(f"{sec}.{key}: unknown key")
            setattr(obj, key, _coerce(sec, key, value, hints[key]))
    return cfg.validate() if validate else cfg


def load_config(path, overrides: Optional[dict] = None, validate: bool = True) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, overrides, validate)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _render(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_dict(cfg: ExperimentConfig) -> dict:
    return {sec: {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in dataclasses.asdict(getattr(cfg, sec)).items()} for sec in SECTIONS}
