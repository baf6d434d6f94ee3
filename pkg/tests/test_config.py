import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossvideo.config import TrainConfig, apply_override, load_config, save_config
from crossvideo.errors import ValidationError


def test_defaults():
    cfg = TrainConfig().validate()
    assert (cfg.learning_rate, cfg.temperature, cfg.batch_size, cfg.warmup_epochs) == (0.01, 0.07, 8, 5)
    assert cfg.d_proj == 256 and cfg.momentum == 0.9 and cfg.weight_decay == 0.0
    assert all(cfg.toggles().values())
    assert cfg.encoder_config().projection_dim == 256


def test_round_trip(tmp_path):
    cfg = load_config(None, ["model.feature_dim=32", "finetune.epochs=3", "loss_toggles.cross_video=false"])
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.model.feature_dim == 32 and back.toggles()["cross_video"] is False


def test_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 0.5, "seed": 3}))
    cfg = load_config(tmp_path / "c.json", ["seed=9"])
    assert cfg.learning_rate == 0.5 and cfg.seed == 9 and cfg.batch_size == 8


@pytest.mark.parametrize(
    "override",
    ["learning_rat=0.1", "model.feature_dims=8", "loss_toggles.cross=true", "learning_rate", "seed.x=1"],
)
def test_misspelled_keys_rejected(override):
    with pytest.raises(ValidationError):
        load_config(None, [override])


@pytest.mark.parametrize(
    "doc",
    [
        {"learning_rate": "fast"},
        {"learning_rate": -1},
        {"seed": 1.5},
        {"symmetrize": "yes"},
        {"model": 3},
        {"model": {"image_size": [32]}},
        {"loss_toggles": {"intra_video": 1}},
        {"loss_toggles": []},
        {"warmup_epochs": 30},
        {"augment": {"keep_rate": 0}},
        [1, 2],
    ],
)
def test_malformed_documents_rejected(tmp_path, doc):
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_config(tmp_path / "c.json")


def test_unreadable_config(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "c.json")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.json")


def test_override_parses_json_values():
    d = apply_override(TrainConfig().to_dict(), "model.image_size=[8, 8]")
    assert d["model"]["image_size"] == [8, 8]
    assert TrainConfig.from_dict(d).model.image_size == (8, 8)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-5, 5) | st.floats(allow_nan=False) | st.text(max_size=4),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=6), inner, max_size=3),
    max_leaves=6,
)


@settings(max_examples=200, deadline=None)
@given(key=st.sampled_from(list(TrainConfig().to_dict()) + ["model.feature_dim", "finetune.epochs", "bogus"]), value=json_values)
def test_fuzzed_configs_raise_only_validation_errors(tmp_path_factory, key, value):
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    doc = {}
    node = doc
    *parents, leaf = key.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value
    path.write_text(json.dumps(doc))
    try:
        load_config(path)
    except ValidationError:
        pass
