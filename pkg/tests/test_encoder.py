import numpy as np
import pytest
import torch

from psgcl.data.clips import ClipBatch
from psgcl.encoder import (ConfigError, EncoderConfig, build_encoder, count_parameters, desk_profile, forward,
                           load_checkpoint, read_checkpoint_meta, save_checkpoint)
from psgcl.modalities import BAS, CLIP_LEN, DEFAULT_SPECS, ECG, RESP


def small(spec, **kw):
    kw.setdefault("embed_dim", 16)
    return desk_profile(spec, **kw)


def test_default_config_values():
    cfg = EncoderConfig()
    assert cfg.stage_widths == [32, 16, 24, 40, 80, 112, 192, 320, 1280]
    assert cfg.stage_depths == [1, 2, 2, 3, 3, 3, 3]
    assert cfg.expansion == 6 and cfg.dropout_rate == 0.5 and cfg.embed_dim == 512 and cfg.dilation == 1


@pytest.mark.parametrize("spec,shape", [(BAS, (32, 10, 3)), (ECG, (32, 2, 3)), (RESP, (32, 7, 3))])
def test_first_conv_shape_full_config(spec, shape):
    enc = build_encoder(spec, seed=0)
    stem = enc.trunk[0][0]
    assert tuple(stem.weight.shape) == shape
    assert stem.stride == (2,) and stem.padding == (1,) and stem.dilation == (1,)
    assert isinstance(enc.trunk[0][1], torch.nn.BatchNorm1d)


def test_layout_pools_and_head():
    enc = build_encoder(BAS, seed=0)
    pools = [m for m in enc.trunk.modules() if isinstance(m, torch.nn.MaxPool1d)]
    assert len(pools) == 1 and pools[0].kernel_size == 3 and pools[0].stride == 1 and pools[0].padding == 1
    assert isinstance(enc.pool, torch.nn.AdaptiveAvgPool1d)
    kinds = [type(m) for m in enc.head]
    assert kinds == [torch.nn.ReLU, torch.nn.Dropout, torch.nn.Linear]
    assert enc.head[1].p == 0.5
    assert enc.head[2].in_features == 1280


def test_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(stage_widths=[1, 2, 3]).validate()
    with pytest.raises(ConfigError):
        build_encoder(BAS, EncoderConfig(stage_depths=[1] * 6))


def test_parameter_count_first_layer_difference():
    diff = count_parameters(build_encoder(BAS, EncoderConfig.for_modality(BAS)))
    diff -= count_parameters(build_encoder(ECG, EncoderConfig.for_modality(ECG)))
    assert diff == 32 * 3 * (10 - 2)


def test_parameter_count_deterministic_and_monotone():
    a = count_parameters(build_encoder(BAS, small(BAS), seed=1))
    assert a == count_parameters(build_encoder(BAS, small(BAS), seed=1))
    wider = small(BAS, stage_widths=[w * 2 for w in small(BAS).stage_widths])
    assert count_parameters(build_encoder(BAS, wider)) > a


def test_same_seed_same_weights():
    a, b = build_encoder(ECG, small(ECG), seed=3), build_encoder(ECG, small(ECG), seed=3)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k


@pytest.mark.parametrize("spec", DEFAULT_SPECS, ids=lambda s: s.name)
def test_shape_contract_batch_32(spec):
    enc = build_encoder(spec, small(spec), seed=0)
    x = np.random.default_rng(0).standard_normal((32, spec.channel_count, CLIP_LEN)).astype(np.float32)
    y = forward(enc, x)
    assert y.shape == (32, 16) and np.isfinite(y).all()
    assert forward(enc, x[:1]).shape == (1, 16)


def test_eval_mode_deterministic_and_zero_input_constant():
    enc = build_encoder(RESP, small(RESP), seed=0)
    x = np.random.default_rng(1).standard_normal((4, 7, CLIP_LEN)).astype(np.float32)
    np.testing.assert_array_equal(forward(enc, x), forward(enc, x))
    z = forward(enc, np.zeros((5, 7, CLIP_LEN), np.float32))
    np.testing.assert_allclose(z, np.repeat(z[:1], 5, axis=0), rtol=0, atol=1e-6)


def test_channel_mismatch_names_counts():
    enc = build_encoder(ECG, small(ECG), seed=0)
    with pytest.raises(ValueError, match=r"expects \(batch, 2, length\).*channel count 10"):
        forward(enc, np.zeros((2, 10, CLIP_LEN), np.float32))
    batch = ClipBatch(BAS, np.zeros((1, 10, CLIP_LEN), np.float32), np.array(["p"]), np.array([0]))
    with pytest.raises(ValueError, match="BAS"):
        forward(enc, batch)


def test_temporal_lengths_never_collapse():
    for cfg in (EncoderConfig(), small(BAS)):
        lengths = build_encoder(BAS, cfg).temporal_lengths()
        assert min(lengths) >= 1
        assert lengths[-1] == CLIP_LEN // 32


def test_gradient_reaches_input():
    enc = build_encoder(BAS, small(BAS), seed=0)
    x = torch.randn(2, 10, CLIP_LEN, requires_grad=True)
    enc(x).sum().backward()
    assert x.grad.abs().sum() > 0


def test_checkpoint_round_trip_bitwise(tmp_path):
    encs = {s.name: build_encoder(s, small(s), seed=i) for i, s in enumerate(DEFAULT_SPECS)}
    # move batch-norm statistics away from their defaults
    for s in DEFAULT_SPECS:
        forward(encs[s.name], np.random.default_rng(2).standard_normal((4, s.channel_count, CLIP_LEN)), train_mode=True)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, encs, 0.37, {"epoch": 3})
    loaded, tau, extra = load_checkpoint(path, {m: e.config for m, e in encs.items()})
    assert tau == 0.37 and extra == {"epoch": 3}
    assert read_checkpoint_meta(path)["format_version"] == 1
    for s in DEFAULT_SPECS:
        x = np.random.default_rng(3).standard_normal((3, s.channel_count, CLIP_LEN)).astype(np.float32)
        np.testing.assert_array_equal(forward(encs[s.name], x), forward(loaded[s.name], x))


def test_checkpoint_config_mismatch_rejected(tmp_path):
    enc = build_encoder(ECG, small(ECG), seed=0)
    save_checkpoint(tmp_path / "c.npz", {"ECG": enc}, 0.0)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c.npz", {"ECG": small(ECG, embed_dim=32)})
