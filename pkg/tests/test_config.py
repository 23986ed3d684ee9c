import pytest

from chem_emu.config import PROFILES, SCHEMA, RunConfig
from chem_emu.errors import ConfigError, ParseError


def test_defaults_match_schema():
    cfg = RunConfig()
    for key, (_, default) in SCHEMA.items():
        assert cfg[key] == default


def test_parse_sections_and_prefixed_keys():
    text = """
    # a comment
    model.hidden = 64
    [train]
    iters = 300      # trailing comment
    lr = 2e-3
    clip_norm = none
    [model]
    use_fno = false
    [report]
    species = A, B ,C
    """
    cfg = RunConfig.parse(text)
    assert cfg["model.hidden"] == 64
    assert cfg["train.iters"] == 300
    assert cfg["train.lr"] == 2e-3
    assert cfg["train.clip_norm"] is None
    assert cfg["model.use_fno"] is False
    assert cfg["report.species"] == ["A", "B", "C"]


def test_profile_line_sets_base():
    cfg = RunConfig.parse("profile = smoke\ntrain.iters = 7\n")
    assert cfg.profile == "smoke"
    assert cfg["model.hidden"] == PROFILES["smoke"]["model.hidden"]
    assert cfg["train.iters"] == 7


def test_unknown_key_reports_line():
    with pytest.raises(ParseError) as info:
        RunConfig.parse("model.hidden = 8\n\ntrain.itres = 5\n")
    assert info.value.line == 3
    assert "train.itres" in str(info.value)


def test_bad_value_reports_line():
    with pytest.raises(ParseError) as info:
        RunConfig.parse("[model]\nuse_attn = maybe\n")
    assert info.value.line == 2


def test_missing_equals_is_parse_error():
    with pytest.raises(ParseError) as info:
        RunConfig.parse("model.hidden 8\n")
    assert info.value.line == 1


def test_unknown_profile():
    with pytest.raises(ConfigError):
        RunConfig.from_profile("nope")
    with pytest.raises(ParseError):
        RunConfig.parse("profile = nope\n")


def test_check_rejects_bad_task_and_weights():
    with pytest.raises(ConfigError):
        RunConfig.parse("data.task = 4\n")
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.parse("loss.d1 = -1\n")


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_dump_round_trip(profile):
    cfg = RunConfig.from_profile(profile)
    cfg.set("train.clip_norm", 1.5)
    cfg.set("report.species", "O3, NO2")
    again = RunConfig.parse(cfg.dump())
    assert again.values == cfg.values


def test_paper_defaults_profile():
    # reference optimizer and loss settings
    cfg = RunConfig.from_profile("paper-defaults")
    assert cfg["train.lr"] == 1e-3
    assert cfg["train.batch_size"] == 4096
    assert cfg["train.iters"] == 100_000
    w = cfg.loss_weights()
    assert (w.recon, w.d1, w.d2, w.idn, w.mass) == (1.0, 10.0, 10.0, 1.0, 0.001)


def test_set_coerces_strings_and_rejects_unknown():
    cfg = RunConfig()
    cfg.set("train.iters", "12")
    assert cfg["train.iters"] == 12
    with pytest.raises(ConfigError):
        cfg.set("train.nope", 1)
