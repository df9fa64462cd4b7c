import pytest

from prismcad.config import DataConfig, Train2DConfig, Train3DConfig, config_from_dict, config_hash, load_config


def test_load_toml_with_nested_data(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\nlr = 1e-3\nout = "x.ckpt"\n[data]\nn_base = 7\nrounded = false\n')
    cfg = load_config(p, Train3DConfig)
    assert cfg.seed == 3 and cfg.lr == 1e-3 and cfg.out == "x.ckpt"
    assert cfg.data == DataConfig(n_base=7, rounded=False)
    assert cfg.batch_size == Train3DConfig().batch_size


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("learning_rate = 0.1\n")
    with pytest.raises(ValueError, match="learning_rate"):
        load_config(p, Train3DConfig)
    with pytest.raises(ValueError, match="bogus"):
        config_from_dict(Train3DConfig, {"data": {"bogus": 1}})


def test_2d_corpus_counts_table(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('query_mode = "mask"\n[corpus_counts]\nrectangle = 5\ncircle = 1\n')
    cfg = load_config(p, Train2DConfig)
    assert cfg.query_mode == "mask" and cfg.corpus_counts == {"rectangle": 5, "circle": 1}


def test_config_hash_tracks_values():
    a, b = Train2DConfig(), Train2DConfig()
    assert config_hash(a) == config_hash(b) and len(config_hash(a)) == 16
    b.lr = 1e-3
    assert config_hash(a) != config_hash(b)
    assert config_hash(Train3DConfig()) != config_hash(Train3DConfig(data=DataConfig(seed=1)))


def test_defaults():
    cfg = Train3DConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (2e-4, 0.9, 0.999, 1e-8)
    assert DataConfig().res == 64
