import pytest

from hkt.config import KEYS, ExperimentConfig, parse_config, read_config_file
from hkt.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_missing_mode_is_named(tmp_path):
    with pytest.raises(ConfigError, match="mode"):
        parse_config(write(tmp_path, "seed = 3\n"))


def test_flag_beats_file(tmp_path):
    cfg = parse_config(write(tmp_path, "mode = train-solo\nseed = 3\nlambda = 0.2\n"),
                       {"seed": "9", "--lambda": "0.7"})
    assert cfg.seed == 9 and cfg.lam == 0.7


def test_bad_weights_in_file_report_key_line_and_constraint(tmp_path):
    path = write(tmp_path, "mode = train-hkt\n# weights\nalphas = 0.4, 0.2, 0.4\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    msg = str(info.value)
    assert "alphas" in msg and "line 3" in msg and "max(alpha1, alpha3) <= alpha2" in msg
    assert info.value.key == "alphas" and info.value.line == 3


def test_sum_constraint_message():
    with pytest.raises(ConfigError, match=r"alpha1 \+ alpha2 \+ alpha3 = 1"):
        parse_config(overrides={"mode": "train-hkt", "alphas": "0.3,0.5,0.3"})


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(write(tmp_path, "mode = eval\ncheckpoint = x\nlearning_rate = 0.1\n"))
    assert info.value.key == "learning_rate" and info.value.line == 3


def test_type_error_names_key_and_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(write(tmp_path, "mode = train-solo\nepochs = many\n"))
    assert info.value.key == "epochs" and info.value.line == 2


def test_duplicate_and_malformed_lines(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        read_config_file(write(tmp_path, "seed = 1\nseed = 2\n"))
    with pytest.raises(ConfigError, match="line 1"):
        read_config_file(write(tmp_path, "just words\n"))


@pytest.mark.parametrize("key, value", [
    ("mode", "fly"), ("lambda", "1.5"), ("momentum", "1.0"), ("data", "mnist"), ("batch_size", "0"),
    ("task_loss", "hinge"), ("methods", "solo,magic"), ("parent", "mlp:0"), ("val_fraction", "1"),
])
def test_invalid_values(key, value):
    overrides = {"mode": "train-solo", key: value}
    with pytest.raises(ConfigError) as info:
        parse_config(overrides=overrides)
    assert info.value.key == key


def test_eval_needs_checkpoint():
    with pytest.raises(ConfigError, match="checkpoint"):
        parse_config(overrides={"mode": "eval"})


def test_to_text_round_trips(tmp_path):
    cfg = parse_config(overrides={"mode": "compare", "alphas": "0.2,0.6,0.2", "seeds": "3,4",
                                  "methods": "solo,hkt", "lambda": "0.35", "emit_attention": "yes"})
    again = parse_config(write(tmp_path, cfg.to_text()))
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_keys_cover_fields():
    assert "lambda" in KEYS and "lam" not in KEYS
    assert len(KEYS) == len(ExperimentConfig.__dataclass_fields__) - 1
