import struct

import numpy as np
import pytest

from vitsqueeze import container
from vitsqueeze.data import load_dataset, load_model, make_dataset, save_dataset, save_model
from vitsqueeze.engine import ArchitectureConfig, VitSpec, build_compressed_weights, init_weights
from vitsqueeze.errors import ConfigError

SPEC = VitSpec(layers=3, embed_dim=8, heads=2, base_tokens=7, num_classes=3)


def test_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(3, 5)), "a": np.array([np.pi, -0.0, 1e-308, np.inf]), "s": np.array(2.5),
               "empty": np.zeros((0, 4))}
    out, meta = container.decode(container.encode(tensors, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]} and set(out) == set(tensors)
    for name, arr in tensors.items():
        assert out[name].shape == arr.shape and out[name].tobytes() == arr.tobytes()


def test_deterministic_and_aligned():
    tensors = {"x": np.arange(3.0), "y": np.ones((2, 2))}
    blob = container.encode(tensors, {"z": 1, "a": 2})
    assert blob == container.encode(dict(reversed(tensors.items())), {"a": 2, "z": 1})
    (hlen,) = struct.unpack("<Q", blob[8:16])
    assert (16 + hlen) % 8 == 0 and len(blob) % 8 == 0


def test_bad_inputs_rejected(tmp_path):
    with pytest.raises(ConfigError, match="magic"):
        container.decode(b"NOTMAGIC" + b"\0" * 8)
    blob = container.encode({"x": np.arange(4.0)})
    with pytest.raises(ConfigError, match="past end"):
        container.decode(blob[:-8])
    with pytest.raises(OSError, match="cannot read"):
        container.load(tmp_path / "absent.vsq")


def test_dataset_round_trip(tmp_path):
    data = make_dataset(SPEC, 12, seed=3)
    assert data.tokens.shape == (12, 6, 8) and set(data.labels) <= {0, 1, 2}
    assert np.array_equal(make_dataset(SPEC, 12, seed=3).tokens, data.tokens)
    save_dataset(tmp_path / "d.vsq", data, SPEC, seed=3)
    again, spec = load_dataset(tmp_path / "d.vsq")
    assert spec == SPEC and np.array_equal(again.tokens, data.tokens) and np.array_equal(again.labels, data.labels)
    save_dataset(tmp_path / "e.vsq", make_dataset(SPEC, 0, seed=0), SPEC)
    assert len(load_dataset(tmp_path / "e.vsq")[0]) == 0


def test_model_round_trip_and_kind_check(tmp_path):
    cfg = ArchitectureConfig.from_firings(SPEC, 1, {2: 4})
    rng = np.random.default_rng(1)
    maps = {l: np.full((2, 7, 7), 1 / 7) for l in range(3) if cfg.gamma[l]}
    w = build_compressed_weights(SPEC, init_weights(SPEC, rng), cfg, maps, rng)
    save_model(tmp_path / "m.vsq", SPEC, cfg, w, {"note": "x"})
    spec, cfg2, w2, meta = load_model(tmp_path / "m.vsq")
    assert spec == SPEC and cfg2 == cfg and meta["note"] == "x"
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    save_dataset(tmp_path / "d.vsq", make_dataset(SPEC, 2, 0), SPEC)
    with pytest.raises(ConfigError):
        load_model(tmp_path / "d.vsq")
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "m.vsq")
