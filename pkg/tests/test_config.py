import pytest

from mkgc import config as C


def test_defaults_resolve_without_file():
    cfg = C.resolve(None, env={})
    assert cfg["alpha"] == 0.001 and cfg["beta"] == 0.005 and cfg["mask_mode"] == "paper"
    assert C.ratios(cfg) == (0.8, 0.1, 0.1)


def test_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# experiment\nlr = 0.01\nepochs = 3\nseed = 4  # inline\n")
    cfg = C.resolve(p, {"seed": "9"}, env={"MKGC_EPOCHS": "7", "OTHER": "x"})
    assert cfg["lr"] == 0.01 and cfg["epochs"] == 7 and cfg["seed"] == 9


def test_unknown_key_named(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lr = 0.1\nlearning_rate = 3\n")
    with pytest.raises(C.ConfigError) as err:
        C.resolve(p, env={})
    assert err.value.key == "learning_rate"


@pytest.mark.parametrize("key,value", [("epochs", "many"), ("filtered", "maybe"), ("beam_width", "4"),
                                       ("mask_mode", "diagonal"), ("split_ratios", "0.5,0.5"),
                                       ("score_variant", "distmult"), ("tokenizer", "bpe")])
def test_bad_values_rejected_with_key(key, value):
    with pytest.raises(C.ConfigError) as err:
        C.resolve(None, {key: value}, env={})
    assert key in str(err.value)


def test_missing_file():
    with pytest.raises(C.ConfigError):
        C.resolve("/nonexistent/config.txt", env={})


def test_dump_round_trips(tmp_path):
    cfg = C.resolve(None, {"lr": "0.00123", "filtered": "true", "alpha": "0"}, env={})
    p = tmp_path / "resolved.txt"
    p.write_text(C.dump(cfg))
    assert C.resolve(p, env={}) == cfg


@pytest.mark.parametrize("name,key,value", [("local", "beta", 0.0), ("global", "alpha", 0.0),
                                            ("mask", "mask_mode", "no_mask")])
def test_ablations_change_exactly_one_key(name, key, value):
    base = C.resolve(None, env={})
    ablated = C.resolve(None, C.ABLATIONS[name], env={})
    diff = {k for k in base if base[k] != ablated[k]}
    assert diff == {key} and ablated[key] == value


def test_builders():
    cfg = C.resolve(None, {"score_variant": "rotate", "d_model": "16", "n_heads": "2"}, env={})
    assert C.build_weights(cfg).score_variant == "rotate"
    assert C.model_config(cfg, 20).d_model == 16
    assert C.train_config(cfg).weights.alpha == 0.001
    assert C.eval_config(cfg).beam_width == 10
