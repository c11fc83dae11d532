import math

import numpy as np
import pytest

import oracles
from softft.autodiff import Tensor
from softft.errors import ConfigError, DimensionError, FormatError, HeadExistsError, HeadNotFoundError, TruncatedFileError
from softft.model import (
    BackboneConfig,
    LayerSpec,
    add_head,
    build_model,
    checkpoint_size,
    forward_features,
    forward_head,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)

CONV = BackboneConfig((1, 9, 9), (LayerSpec("conv", 3, 3, 1), LayerSpec("conv", 4, 3, 2), LayerSpec("linear", 6)))
MLP = BackboneConfig((16,), (LayerSpec("linear", 8), LayerSpec("linear", 4)))


def params_bytes(model, heads=True):
    return {n: p.values.tobytes() for n, p in (model.parameters() if heads else model.parameters(include_heads=()))}


def test_build_is_deterministic():
    a = build_model(CONV, [("source", 5)], 42)
    b = build_model(CONV, [("source", 5)], 42)
    assert params_bytes(a) == params_bytes(b)
    c = build_model(CONV, [("source", 5)], 43)
    assert params_bytes(a) != params_bytes(c)


def test_mlp_parameter_count():
    model = build_model(MLP, [("source", 3)], 0)
    # 128 + 8 + 32 + 4; the formula sums to 172
    assert model.num_parameters(heads=False) == 16 * 8 + 8 + 8 * 4 + 4 == 172
    assert model.num_parameters() == 172 + 4 * 3 + 3


def test_init_std_follows_fan_in():
    cfg = BackboneConfig((256,), (LayerSpec("linear", 256),))
    w = build_model(cfg, [("h", 2)], 7).backbone[0][0].values
    assert abs(w.std() - math.sqrt(2 / 256)) / math.sqrt(2 / 256) < 0.1
    assert abs(w.mean()) < 0.01
    assert not build_model(cfg, [("h", 2)], 7).backbone[0][1].values.any()


def test_layer_parsing_and_shapes():
    assert LayerSpec.parse("conv:8:3:2") == LayerSpec("conv", 8, 3, 2)
    assert LayerSpec.parse("linear:10") == LayerSpec("linear", 10)
    assert CONV.layer_shapes() == [(3, 7, 7), (4, 3, 3), (6,)]
    assert CONV.feature_dim == 6


def test_incompatible_chain_names_layer():
    with pytest.raises(ConfigError, match="layer 1"):
        BackboneConfig((1, 5, 5), (LayerSpec("conv", 2, 3, 1), LayerSpec("conv", 2, 5, 1)))
    with pytest.raises(ConfigError, match="layer 1"):
        BackboneConfig((8,), (LayerSpec("linear", 4), LayerSpec("conv", 2, 3, 1)))


def test_stacked_batch_gives_identical_rows():
    model = build_model(CONV, [("source", 5)], 1)
    x = np.random.default_rng(0).normal(size=(1, 1, 9, 9))
    one = forward_features(model, x).values
    four = forward_features(model, np.repeat(x, 4, axis=0)).values
    for row in four[1:]:
        assert row.tobytes() == four[0].tobytes()
    # BLAS may pick a different kernel for B=1, so compare that one to rounding
    np.testing.assert_allclose(four[0], one[0], rtol=0, atol=1e-12)


def test_zero_input_zero_features():
    model = build_model(CONV, [("source", 5)], 1)
    assert not forward_features(model, np.zeros((2, 1, 9, 9))).values.any()


def _relu(x):
    return [[max(0.0, v) for v in row] for row in x] if isinstance(x[0], list) else [max(0.0, v) for v in x]


def test_features_match_manual_composition():
    model = build_model(CONV, [("source", 5)], 3)
    for _, b in model.backbone:
        b.values[:] = np.random.default_rng(5).normal(size=b.shape)
    x = np.random.default_rng(4).normal(size=(1, 9, 9))
    h = x.tolist()
    for layer, (w, b) in zip(CONV.layers[:2], model.backbone[:2]):
        out = oracles.conv_direct(h, w.values.tolist(), layer.stride)
        h = [[[max(0.0, v + b.values[o]) for v in row] for row in out[o]] for o in range(len(out))]
    flat = [v for ch in h for row in ch for v in row]
    w, b = model.backbone[2]
    lin = oracles.matmul_loops([flat], w.values.tolist())[0]
    expected = [max(0.0, v + bb) for v, bb in zip(lin, b.values)]
    got = forward_features(model, x[None]).values[0]
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_feature_shape_mismatch():
    model = build_model(CONV, [("source", 5)], 1)
    with pytest.raises(DimensionError):
        forward_features(model, np.zeros((2, 1, 8, 8)))


def test_identity_head():
    model = build_model(MLP, [("h", 4)], 0)
    model.heads["h"].weight.values[:] = np.eye(4)
    f = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(forward_head(model, "h", f).values, f.values)


def test_head_matches_matmul_oracle():
    model = build_model(MLP, [("h", 3)], 0)
    model.heads["h"].bias.values[:] = [0.1, -0.2, 0.3]
    f = np.random.default_rng(1).normal(size=(2, 4))
    expected = [[v + b for v, b in zip(row, [0.1, -0.2, 0.3])] for row in oracles.matmul_loops(f.tolist(), model.heads["h"].weight.values.tolist())]
    np.testing.assert_allclose(forward_head(model, "h", Tensor(f)).values, expected, atol=1e-12)


def test_head_isolation():
    model = build_model(MLP, [("a", 3), ("b", 2)], 0)
    f = Tensor(np.random.default_rng(2).normal(size=(5, 4)))
    before = forward_head(model, "b", f).values.copy()
    model.heads["a"].weight.values += 10.0
    model.heads["a"].bias.values -= 3.0
    np.testing.assert_array_equal(forward_head(model, "b", f).values, before)


def test_unknown_head():
    model = build_model(MLP, [("a", 3)], 0)
    with pytest.raises(HeadNotFoundError):
        forward_head(model, "nope", Tensor(np.zeros((1, 4))))
    with pytest.raises(KeyError):
        replace_head(model, "nope", 2, 0)


def test_add_head_keeps_everything_else():
    model = build_model(CONV, [("source", 5)], 0)
    x = np.random.default_rng(0).normal(size=(3, 1, 9, 9))
    before = forward_head(model, "source", forward_features(model, x)).values
    snapshot = params_bytes(model)
    grown = add_head(model, "target", 3, 11)
    after = forward_head(grown, "source", forward_features(grown, x)).values
    np.testing.assert_array_equal(before, after)
    assert params_bytes(model) == snapshot
    assert all(grown_b == snapshot[n] for n, grown_b in params_bytes(grown).items() if n in snapshot)
    assert grown.heads["target"].provenance == "fresh"


def test_add_head_seeded_and_duplicate():
    model = build_model(CONV, [("source", 5)], 0)
    a = add_head(model.copy(), "t", 3, 9).heads["t"].weight.values
    b = add_head(model.copy(), "t", 3, 9).heads["t"].weight.values
    assert a.tobytes() == b.tobytes()
    with pytest.raises(HeadExistsError):
        add_head(model, "source", 2, 0)


def test_new_head_init_statistics():
    cfg = BackboneConfig((8,), (LayerSpec("linear", 200),))
    model = add_head(build_model(cfg, [("s", 2)], 0), "t", 200, 5)
    w = model.heads["t"].weight.values
    assert abs(w.std() - math.sqrt(2 / 200)) / math.sqrt(2 / 200) < 0.1
    assert not model.heads["t"].bias.values.any()


def test_replace_head_independent_of_prior_state():
    m1 = build_model(CONV, [("source", 5), ("target", 3)], 0)
    m2 = build_model(CONV, [("source", 5), ("target", 3)], 1)
    m2.backbone = m1.copy().backbone
    r1, r2 = replace_head(m1, "target", 4, 77), replace_head(m2, "target", 4, 77)
    assert r1.heads["target"].weight.values.tobytes() == r2.heads["target"].weight.values.tobytes()
    assert params_bytes(r1, heads=False) == params_bytes(m1, heads=False)
    assert r1.heads["source"].weight.values.tobytes() == m1.heads["source"].weight.values.tobytes()


def test_replace_head_init_statistics():
    cfg = BackboneConfig((8,), (LayerSpec("linear", 300),))
    w = replace_head(build_model(cfg, [("s", 300)], 0), "s", 300, 3).heads["s"].weight.values
    assert abs(w.std() - math.sqrt(2 / 300)) / math.sqrt(2 / 300) < 0.1


def test_checkpoint_round_trip(tmp_path):
    model = build_model(CONV, [("source", 5), ("target", 3)], 5)
    model.heads["source"].provenance = "pretrained"
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert params_bytes(loaded) == params_bytes(model)
    assert loaded.config == model.config
    assert loaded.heads["source"].provenance == "pretrained"
    assert list(loaded.heads) == ["source", "target"]


def test_checkpoint_size_formula(tmp_path):
    model = build_model(CONV, [("source", 5)], 5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blocks = [("input", (3,))]
    for i, layer in enumerate(CONV.layers):
        prefix = f"backbone/{i}/conv/{layer.stride}" if layer.kind == "conv" else f"backbone/{i}/linear"
        w, b = model.backbone[i]
        blocks += [(prefix + "/weight", w.shape), (prefix + "/bias", b.shape)]
    blocks += [("head/source/fresh/weight", (6, 5)), ("head/source/fresh/bias", (5,))]
    assert path.stat().st_size == oracles.checkpoint_size(blocks) == checkpoint_size(model)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(MLP, [("h", 2)], 0), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(MLP, [("h", 2)], 0), path)
    raw = bytearray(path.read_bytes())
    raw[8] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(MLP, [("h", 2)], 0), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(OSError):
        load_checkpoint(path)
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)
