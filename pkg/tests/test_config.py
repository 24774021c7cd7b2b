import pytest

from atlab.config import ConfigError, ExperimentConfig, load_config, parse_config, serialize_config


def test_empty_file_requires_seed():
    with pytest.raises(ConfigError, match="train.seed"):
        parse_config("")
    cfg = parse_config("", validate=False)
    assert cfg.dataset.name == "mnist" and cfg.train.epochs == 5


def test_preset_expansion():
    cfg = parse_config("[train]\nseed = 1\n[attack]\npreset = mnist-madry\n")
    a = cfg.attack_config()
    assert (a.epsilon, a.step_size, a.iterations, a.init) == (0.3, 0.03, 20, "madry")
    # default preset follows the dataset
    b = parse_config("[train]\nseed = 1\n[dataset]\nname = cifar10\n").attack_config()
    assert b.epsilon == pytest.approx(8 / 255) and b.iterations == 7


def test_overrides_on_preset():
    cfg = parse_config("[train]\nseed = 1\n[attack]\npreset = mnist-madry\niterations = 50\n")
    assert cfg.attack_config().iterations == 50 and cfg.attack_config().epsilon == 0.3


def test_unknown_key_and_section_named():
    with pytest.raises(ConfigError, match="train.sede"):
        parse_config("[train]\nsede = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("[bogus]\nx = 1\n[train]\nseed = 1\n")
    with pytest.raises(ConfigError, match="attack.preset"):
        parse_config("[train]\nseed = 1\n[attack]\npreset = pgd\n")


def test_type_mismatch_named():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config("[train]\nseed = 1\nepochs = five\n")
    with pytest.raises(ConfigError, match="trigger.freeze"):
        parse_config("[train]\nseed = 1\n[trigger]\nfreeze = maybe\n")


def test_round_trip_identity():
    text = ("[train]\nseed = 7\nlr = 0.0005\n[fedsim]\nattack_rounds = 1,3,5\nboost = 2.5\n"
            "[output]\nstages = data,surrogate\n[diagnostics]\nintensities = 0,0.5,1\n")
    a = parse_config(text)
    b = parse_config(serialize_config(a))
    assert a == b
    assert serialize_config(a) == serialize_config(b)
    assert b.fedsim.attack_rounds == (1, 3, 5) and b.fedsim.malicious_epochs == 3
    assert b.dataset.data_dir is None


def test_flag_overrides_and_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nseed = 3\n")
    cfg = load_config(p, {"train.seed": "9", "dataset.subsample": "100"})
    assert cfg.seed == 9 and cfg.dataset.subsample == 100
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    assert isinstance(cfg, ExperimentConfig)
