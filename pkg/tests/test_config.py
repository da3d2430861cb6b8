import numpy as np
import pytest

from pdqat.config import (OUTPUT_ENV, config_echo, load_config, load_data, parse_config,
                          train_config_from_echo)
from pdqat.data import write_idx
from pdqat.errors import ConfigError

BASE = """
output_dir = "out"
[model]
layers = [{kind = "dense", size = 8}, {kind = "dense", size = 8}, {kind = "dense", size = 2}]
[quant]
bits = [0, 2, 0]
[train]
epochs = 2
[data]
kind = "blobs"
n_per_class = 20
n_test_per_class = 10
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    rc = load_config(write(tmp_path, BASE))
    t = rc.train
    assert t.adam.lr == 1e-3 and t.dual_lr == 0.01
    assert t.adam.milestones == (50, 75, 90) and t.adam.decay == 0.1
    assert t.early_stop and t.mse_norm == "per_element"
    np.testing.assert_allclose(t.constraint_set().eps_layer, [1 / 3, 1 / 3])
    assert rc.output_dir == str(tmp_path / "out")


@pytest.mark.parametrize("extra", [
    "bogus = 1\n",
    "[optim]\nlr = 1\n",
])
def test_unknown_top_level_rejected(tmp_path, extra):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(write(tmp_path, extra + BASE))


def test_unknown_section_key_rejected(tmp_path):
    text = BASE.replace("epochs = 2", "epochs = 2\nlearning_rate = 0.1")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(write(tmp_path, text))


def test_unknown_layer_key_rejected(tmp_path):
    text = BASE.replace('size = 8}, {', 'size = 8, dropout = 0.5}, {', 1)
    with pytest.raises(ConfigError, match="dropout"):
        load_config(write(tmp_path, text))


def test_bits_length_must_match(tmp_path):
    with pytest.raises(ConfigError, match="bits"):
        load_config(write(tmp_path, BASE.replace("[0, 2, 0]", "[0, 2]")))


def test_missing_bits_uses_default_bits(tmp_path):
    text = BASE.replace("bits = [0, 2, 0]", "default_bits = 4")
    assert load_config(write(tmp_path, text)).train.bits == [0, 4, 0]


def test_eps_layer_forms(tmp_path):
    for val, exp in (("0.05", [0.05, 0.05]), ("[0.1, 0.2]", [0.1, 0.2])):
        rc = load_config(write(tmp_path, BASE + f"[constraints]\neps_layer = {val}\n"))
        np.testing.assert_allclose(rc.train.constraint_set().eps_layer, exp)
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, BASE + '[constraints]\neps_layer = "tight"\n'))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, BASE + "[constraints]\neps_layer = [0.1]\n"))


def test_invalid_values(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, BASE.replace("epochs = 2", "epochs = -3")))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, BASE + '[constraints]\nmse_norm = "l1"\n'))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError, match="run.toml"):
        load_config(write(tmp_path, "[model\n"))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.toml"):
        load_config(tmp_path / "nowhere.toml")


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert load_config(write(tmp_path, BASE)).output_dir == str(tmp_path / "elsewhere")


def test_synthetic_data_normalized_on_train(tmp_path):
    train, test = load_data(load_config(write(tmp_path, BASE)).data)
    assert len(train) == 40 and len(test) == 20
    np.testing.assert_allclose(train.x.mean(0), 0, atol=1e-6)
    assert test.mean is train.mean


def test_csv_and_idx_sources(tmp_path):
    (tmp_path / "tr.csv").write_text("a,b,label\n0,1,x\n1,0,y\n2,2,x\n")
    text = BASE.split("[data]")[0] + '[data]\nkind = "csv"\npath = "tr.csv"\nnormalize = false\n'
    train, test = load_data(load_config(write(tmp_path, text)).data)
    assert train.num_classes == 2 and test is None
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 2, 2)), [0, 1])
    text = (BASE.split("[data]")[0]
            + '[data]\nkind = "idx"\nimages = "i"\nlabels = "l"\ntest_images = "i"\n'
            + 'test_labels = "l"\n')
    train, test = load_data(load_config(write(tmp_path, text)).data)
    assert train.x.shape == (2, 1, 2, 2) and len(test) == 2


def test_echo_round_trip(tmp_path):
    import json
    rc = load_config(write(tmp_path, BASE))
    echo = json.loads(json.dumps(config_echo(rc)))
    assert train_config_from_echo(echo) == rc.train
