import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tasnet import autograd as ag
from tasnet.autograd import Tensor
from tasnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tasnet.dsp import AudioBuffer
from tasnet.model import GLULayer, ModelConfig, SeparationModel, param_count, preset_config

SMALL = dict(N=8, L=16, S=8, B=4, H=8, Sc=4, X=2, R=1)


def small(variant="linear", I=None, **kw):
    I = {"linear": 1, "prelu": 3, "dilated": 4, "glu": 3}[variant] if I is None else I
    return ModelConfig(I=I, encoder_variant=variant, **{**SMALL, **kw})


def test_param_count_full_size_linear():
    n = param_count(preset_config("paper", "linear"))
    assert abs(n - 5.0e6) <= 0.05 * 5.0e6


def test_param_count_full_size_deep_prelu():
    n = param_count(preset_config("paper", "prelu", depth=4))
    assert abs(n - 9.7e6) <= 0.05 * 9.7e6


def test_param_count_delta_matches_added_layers():
    delta = param_count(preset_config("paper", "prelu", 4)) - param_count(preset_config("paper", "linear"))
    assert delta == 2 * 3 * (512 * 512 * 3 + 512)


@pytest.mark.parametrize("variant", ["linear", "prelu", "dilated", "glu"])
def test_param_count_matches_instantiation(variant):
    cfg = preset_config("desk", variant)
    assert SeparationModel(cfg).num_parameters() == param_count(cfg)


def test_full_size_models_instantiate_with_analytic_count():
    for variant, depth in (("linear", 1), ("prelu", 4)):
        cfg = preset_config("paper", variant, depth)
        assert SeparationModel(cfg).num_parameters() == param_count(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(encoder_variant="conv")
    with pytest.raises(ValueError):
        ModelConfig(encoder_variant="linear", I=3)
    with pytest.raises(ValueError):
        ModelConfig(encoder_variant="prelu", I=3, enc_dilations=[1, 2])
    assert preset_config("desk", "dilated").enc_dilations == [1, 2, 4, 8]


def test_encode_shape_four_second_frame_count():
    cfg = ModelConfig(N=8, B=4, H=8, Sc=4, X=1, R=1, encoder_variant="prelu", I=3)
    E = SeparationModel(cfg).encode(np.zeros(32000, dtype=np.float32))
    assert E.shape == (1, 8, 3999)


def test_encode_rejects_short_input():
    with pytest.raises(ValueError):
        SeparationModel(small()).encode(np.zeros(10, dtype=np.float32))


@settings(max_examples=12, deadline=None)
@given(variant=st.sampled_from(["linear", "prelu", "dilated", "glu"]), T=st.integers(16, 400),
       seed=st.integers(0, 1000))
def test_forward_shape_and_finiteness(variant, T, seed):
    model = SeparationModel(small(variant), seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, T)).astype(np.float32)
    with ag.no_grad():
        y = model(Tensor(x))
    assert y.shape == (2, 2, T)
    assert np.all(np.isfinite(y.data))


def test_separate_returns_c_buffers_of_input_length():
    model = SeparationModel(small("glu"))
    outs = model.separate(AudioBuffer(np.random.default_rng(0).standard_normal(1234).astype(np.float32)))
    assert len(outs) == 2
    assert all(len(o) == 1234 and o.sample_rate == 8000 for o in outs)


def test_masks_in_open_unit_interval():
    model = SeparationModel(small("prelu"), seed=3)
    with ag.no_grad():
        masks = model.separate_latent(model.encode(np.random.default_rng(1).standard_normal(800)))
    assert masks.shape == (1, 2, 8, 99)
    assert np.all(masks.data > 0) and np.all(masks.data < 1)


def test_zero_skip_paths_give_half_masks():
    model = SeparationModel(small("prelu"), seed=5)
    for block in model.separator.blocks:
        block.skip.weight.data[:] = 0
        block.skip.bias.data[:] = 0
    with ag.no_grad():
        masks = model.separate_latent(model.encode(np.random.default_rng(2).standard_normal(500)))
    np.testing.assert_array_equal(masks.data, 0.5)


def test_separator_receptive_field():
    cfg = preset_config("paper", "linear")
    dil = [2**b for b in range(cfg.X)]
    assert 1 + sum(d * (cfg.P_sep - 1) for d in dil) == 511
    # impulse response through the actual depthwise layers of one stack
    model = SeparationModel(small(X=4, R=1), dtype=np.float64)
    x = np.zeros((1, model.config.H, 101))
    x[0, :, 50] = 1.0
    h = Tensor(x)
    for block in model.separator.blocks[: model.config.X]:
        block.depthwise.weight.data[:] = 1.0
        h = block.depthwise(h)
    support = np.nonzero(h.data[0, 0])[0]
    assert support[-1] - support[0] + 1 == 1 + 2 * (2**4 - 1)


def test_gate_forced_to_zero_halves_linear_branch():
    rng = np.random.default_rng(0)
    layer = GLULayer(5, 1, rng, dtype=np.float64)
    layer.norm.gain.data[:] = 0
    layer.norm.bias.data[:] = 0
    x = Tensor(rng.standard_normal((5, 30)))
    np.testing.assert_allclose(layer(x).data, 0.5 * layer.linear(x).data, rtol=1e-12)


def test_depth_one_is_linear_time_invariant():
    model = SeparationModel(small("linear"), seed=1, dtype=np.float64)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal(400), rng.standard_normal(400)

    def f(v):
        E = model.encode(v)
        return model.decode(E, 400).data  # all-ones mask

    np.testing.assert_allclose(f(x + y), f(x) + f(y), atol=1e-5)
    # time invariance for whole-stride shifts
    z = np.zeros(400)
    z[40:] = x[:360]
    np.testing.assert_allclose(f(z)[0, 80:360], f(x)[0, 40:320], atol=1e-5)


def test_forward_deterministic():
    x = np.random.default_rng(0).standard_normal(300).astype(np.float32)
    a = SeparationModel(small("dilated"), seed=9)(x).data
    b = SeparationModel(small("dilated"), seed=9)(x).data
    assert np.array_equal(a, b)


def test_prelu_init_and_zero_biases():
    model = SeparationModel(small("prelu"))
    for name, p in model.named_parameters():
        if name.endswith("slopes"):
            assert np.all(p.data == 0.25)
        if name.endswith(".bias") and "norm" not in name:
            assert not np.any(p.data)


@pytest.mark.parametrize("variant", ["linear", "glu"])
def test_checkpoint_round_trip_byte_identical(tmp_path, variant):
    model = SeparationModel(small(variant), seed=2)
    opt = {"scalars": {"step": 3, "lr": 5e-4}, "m": {n: p.data * 0.5 for n, p in model.named_parameters()},
           "v": {n: p.data**2 for n, p in model.named_parameters()}}
    save_checkpoint(tmp_path / "a.ckpt", model, opt, {"note": "x"})
    ck = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", ck.model, ck.optimizer, ck.meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(0).standard_normal(200).astype(np.float32)
    assert np.array_equal(model(x).data, ck.model(x).data)


def test_checkpoint_float64_preserved(tmp_path):
    model = SeparationModel(small("prelu"), seed=2, dtype=np.float64)
    save_checkpoint(tmp_path / "a.ckpt", model)
    loaded = load_checkpoint(tmp_path / "a.ckpt").model
    for (_, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert q.data.dtype == np.float64 and np.array_equal(p.data, q.data)


def test_checkpoint_corruption_rejected(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", SeparationModel(small()))
    blob = (tmp_path / "a.ckpt").read_bytes()
    for name, bad in (("trunc", blob[:-10]), ("extra", blob + b"\0\0\0\0"), ("magic", b"X" + blob[1:])):
        (tmp_path / name).write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    import json
    import struct

    save_checkpoint(tmp_path / "a.ckpt", SeparationModel(small()))
    blob = (tmp_path / "a.ckpt").read_bytes()
    n = struct.unpack("<I", blob[12:16])[0]
    header = json.loads(blob[16 : 16 + n])
    header["config"]["N"] = 9
    new = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "b.ckpt").write_bytes(blob[:12] + struct.pack("<I", len(new)) + new + blob[16 + n :])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.ckpt")
