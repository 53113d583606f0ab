import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delta_lfm.checkpoint import CheckpointError, ModelBundle, from_bytes, load_bundle, save_bundle, to_bytes
from delta_lfm.config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from delta_lfm.pipeline import override


def test_defaults_round_trip_through_json(tmp_path):
    cfg = ExperimentConfig()
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert to_dict(back) == to_dict(cfg)
    assert config_hash(back) == config_hash(cfg)


def test_shipped_default_config_matches_code():
    from pathlib import Path

    shipped = load_config(Path(__file__).parents[1] / "configs" / "default.json")
    assert config_hash(shipped) == config_hash(ExperimentConfig())


def test_hash_ignores_out_dir_but_not_seeds():
    a = ExperimentConfig()
    b = override(a, {"out_dir": "elsewhere"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(a.with_seed(5))
    assert a.with_seed(5).cohort == a.cohort


@pytest.mark.parametrize(
    "doc,match",
    [
        ({"bogus": 1}, "unknown"),
        ({"ae": {"lr": "fast"}}, "number"),
        ({"ae": {"epochs": 2.5}}, "integer"),
        ({"flow": {"sampling_mode": "sideways"}}, "sampling_mode"),
        ({"split_fractions": [0.5, 0.5]}, "3 entries"),
        ({"flow": {"conditioning_enabled": 1}}, "true/false"),
    ],
)
def test_invalid_configs_rejected(doc, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(doc)


def test_load_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError, match="object"):
        load_config(tmp_path / "list.json")
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.json")


def test_override_paths():
    cfg = override(ExperimentConfig(), {"ae.arcrank.ranking": "simple", "flow.dt": 0.05})
    assert cfg.ae.arcrank.ranking == "simple" and cfg.flow.dt == 0.05
    for bad in ("ae.nope", "nope.x", "ae.lr.deeper"):
        with pytest.raises(ConfigError):
            override(ExperimentConfig(), {bad: 1})


def _bundle(rng, flow=True):
    ae = {"enc0.w": rng.normal(size=(3, 2)), "enc0.b": rng.normal(size=2), "scalar": np.array(1.5)}
    fl = {"in.w": rng.normal(size=(2, 2))} if flow else {}
    return ModelBundle(config=ExperimentConfig(), ae_params=ae, flow_params=fl, provenance={"stage": "test"})


def test_checkpoint_round_trip_is_byte_identical(rng, tmp_path):
    b = _bundle(rng)
    blob = to_bytes(b)
    back = from_bytes(blob)
    assert to_bytes(back) == blob
    for k, v in b.ae_params.items():
        np.testing.assert_array_equal(back.ae_params[k], v)
        assert back.ae_params[k].shape == v.shape
    assert back.provenance == {"stage": "test"}
    assert back.has_flow and not _bundle(rng, flow=False).has_flow
    path = save_bundle(b, tmp_path / "m.ckpt")
    assert load_bundle(path).config_hash == b.config_hash


@given(seed=st.integers(0, 2**31))
def test_checkpoint_round_trip_property(seed):
    b = _bundle(np.random.default_rng(seed))
    assert to_bytes(from_bytes(to_bytes(b))) == to_bytes(b)


def test_checkpoint_corruption_detected(rng, tmp_path):
    blob = to_bytes(_bundle(rng))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError, match="payload"):
        from_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(blob[:9])
    n = int.from_bytes(blob[5:13], "little")
    header = json.loads(blob[13 : 13 + n])
    header["config"]["ae"]["lr"] = 0.5
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tampered = blob[:5] + len(raw).to_bytes(8, "little") + raw + blob[13 + n :]
    with pytest.raises(CheckpointError, match="hash"):
        from_bytes(tampered)
    header["version"] = 99
    raw = json.dumps(header).encode()
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(blob[:5] + len(raw).to_bytes(8, "little") + raw + blob[13 + n :])
    with pytest.raises(OSError):
        load_bundle(tmp_path / "absent.ckpt")
