import pytest

from ad2cn.config import Ablation, ConfigError, TrainConfig, dump_config, load_config, parse_config_text


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.sigma) == (0.1, 0.1, 0.03)
    assert (cfg.batch_size, cfg.num_projections, cfg.proto_max_steps) == (64, 128, 3)
    assert (cfg.d_hidden, cfg.d_embed, cfg.dropout_retain) == (1024, 512, 0.5)


def test_flat_keys():
    cfg = parse_config_text("lambda1 = 0.5\n# comment\nbatch_size = 32\n")
    assert cfg.lambda1 == 0.5 and cfg.batch_size == 32 and cfg.lambda2 == 0.1


def test_sections_are_ignored_except_ablation():
    cfg = parse_config_text("[train]\nsigma = 0.2\n[ablation]\ndisable_em = true\nsource_only = no\n")
    assert cfg.sigma == 0.2
    assert cfg.ablation == Ablation(disable_em=True)


@pytest.mark.parametrize("text,match", [
    ("lamda1 = 0.5\n", "unknown key"),
    ("batch_size = big\n", "cannot parse"),
    ("sigma = 2\n", "sigma"),
    ("[ablation]\nfoo = 1\n", "unknown ablation"),
    ("this is not a config\n", "config"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_dump_round_trip(tmp_path):
    cfg = TrainConfig(lambda1=0.25, seed=7, ablation=Ablation(disable_m=True, same_classifier_variant=True))
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini")


def test_dict_round_trip_and_replace():
    cfg = TrainConfig(ablation=Ablation(source_only=True))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    other = cfg.replace(lr=0.01)
    assert other.lr == 0.01 and other.ablation.source_only and cfg.lr == 0.001


def test_from_dict_rejects_unknown():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_ablation_names():
    assert Ablation.from_names(["dis", "em"]) == Ablation(disable_dis=True, disable_em=True)
    with pytest.raises(ConfigError):
        Ablation.from_names(["x"])
