import numpy as np
import pytest
import torch

from genco import numcore as nc
from genco.encoder import (ChannelMismatchError, Encoder, EncoderConfig, build_encoder, expand_encoder,
                           expand_input_channels, load_state_tensors, parameter_count, parameter_hash,
                           state_tensors)

# golden values; derivation by hand for the default widths [16, 32, 64, 128]:
#   stem 9*4*16 + 2*16 = 608, stages 2336 + 4672 + 18560 + 73984, projector 2 * (128*128 + 128)
GOLDEN = {
    (4, (16, 32, 64, 128), 1, 128): 133184,
    (3, (16, 32, 64, 128), 1, 128): 133040,
    (4, (8, 16), 2, 32): 9 * 4 * 8 + 16 + (9 * 8 * 8 + 16) * 2 + (9 * 8 * 16 + 32) + (9 * 16 * 16 + 32)
    + 16 * 16 + 16 + 16 * 32 + 32,
}


@pytest.mark.parametrize("key", list(GOLDEN))
def test_parameter_count_golden(key):
    c, widths, blocks, proj = key
    cfg = EncoderConfig(in_channels=c, stage_widths=list(widths), blocks_per_stage=blocks, projection_dim=proj)
    model = Encoder(cfg)
    assert parameter_count(cfg) == GOLDEN[key]
    assert sum(p.numel() for p in model.parameters()) == GOLDEN[key]


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(in_channels=2)
    with pytest.raises(ValueError):
        EncoderConfig(stage_widths=[])
    with pytest.raises(ValueError):
        EncoderConfig(stage_widths=[8, 0])


def test_projection_rows_are_unit_norm():
    model = build_encoder(EncoderConfig(), seed=0)
    x = torch.rand(6, 4, 32, 32)
    for mode in (model.train, model.eval):
        mode()
        norms = model.forward_projection(x).norm(dim=1)
        assert torch.allclose(norms, torch.ones(6), atol=1e-5)


def test_feature_dim_independent_of_input_size():
    cfg = EncoderConfig()
    model = build_encoder(cfg, seed=0).eval()
    assert model.forward_features(torch.rand(2, 4, 32, 32)).shape == (2, cfg.feature_dim)
    assert model.forward_features(torch.rand(2, 4, 64, 64)).shape == (2, cfg.feature_dim)


def test_eval_mode_identical_rows_and_zero_input():
    model = build_encoder(EncoderConfig(), seed=1).eval()
    x = torch.rand(1, 4, 32, 32).repeat(2, 1, 1, 1)
    f = model.forward_projection(x)
    assert torch.equal(f[0], f[1])
    assert float((f[0] * f[1]).sum().detach()) == pytest.approx(1.0, abs=1e-6)
    z1 = model.forward_features(torch.zeros(3, 4, 32, 32))
    z2 = model.forward_features(torch.zeros(3, 4, 32, 32))
    assert torch.isfinite(z1).all() and torch.equal(z1, z2)


def test_feature_maps_shapes():
    model = build_encoder(EncoderConfig(), seed=0)
    maps = model.feature_maps(torch.rand(2, 4, 32, 32))
    assert [tuple(m.shape[1:]) for m in maps] == [(16, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2), (128, 1, 1)]


def test_channel_mismatch():
    model = build_encoder(EncoderConfig(in_channels=4), seed=0)
    with pytest.raises(ChannelMismatchError):
        model.forward_features(torch.rand(1, 3, 32, 32))


def test_same_seed_same_init():
    a = build_encoder(EncoderConfig(), seed=3)
    b = build_encoder(EncoderConfig(), seed=3)
    c = build_encoder(EncoderConfig(), seed=4)
    assert parameter_hash(a) == parameter_hash(b) != parameter_hash(c)


def test_projection_grad_check_tiny_config():
    cfg = EncoderConfig(in_channels=4, stage_widths=[2, 3], projection_dim=4)
    model = build_encoder(cfg, seed=0).double()
    x = torch.rand(3, 4, 8, 8, dtype=torch.float64, generator=nc.torch_generator(0))
    readout = torch.randn(3, 4, dtype=torch.float64, generator=nc.torch_generator(1))
    params = list(model.parameters())
    err = nc.grad_check(lambda: (model.forward_projection(x) * readout).sum(), params)
    assert err <= 1e-3


def test_save_load_forward_bitwise(tmp_path):
    model = build_encoder(EncoderConfig(), seed=0)
    model.train()
    model.forward_projection(torch.rand(8, 4, 32, 32))  # move running stats
    model.eval()
    nc.save_checkpoint(tmp_path / "ck", state_tensors(model, "encoder"), {"encoder": model.cfg.to_dict()})
    tensors, meta = nc.load_checkpoint(tmp_path / "ck")
    other = Encoder(EncoderConfig(**meta["encoder"])).eval()
    load_state_tensors(other, tensors, "encoder")
    x = torch.rand(4, 4, 32, 32)
    assert torch.equal(model.forward_projection(x), other.forward_projection(x))
    assert parameter_hash(model) == parameter_hash(other)


# -- NIR expansion


def test_expand_copies_ones_slice():
    w = torch.randn(5, 3, 3, 3)
    w[:, 0] = 1.0
    out = expand_input_channels(w)
    assert out.shape == (5, 4, 3, 3)
    assert torch.equal(out[:, 3], torch.ones(5, 3, 3))


def test_expand_random_weights_red_copy():
    w = torch.randn(16, 3, 3, 3, generator=nc.torch_generator(0))
    out = expand_input_channels(w)
    assert torch.equal(out[:, 3], out[:, 0])
    assert torch.equal(out[:, :3], w)


def test_expand_rejects_wrong_channel_count():
    with pytest.raises(ChannelMismatchError):
        expand_input_channels(torch.zeros(4, 4, 3, 3))


def test_expand_1x1_linear_algebra():
    # 1x1 conv: out = sum_c w_c x_c; with x_nir = x_red the red weight counts twice
    w = torch.tensor([[[[0.5]], [[-1.0]], [[2.0]]]], dtype=torch.float64)
    x3 = torch.tensor([[[[0.2]], [[0.3]], [[0.7]]]], dtype=torch.float64)
    x4 = torch.cat([x3, x3[:, :1]], dim=1)
    out4 = torch.nn.functional.conv2d(x4, expand_input_channels(w))
    assert float(out4) == pytest.approx(2 * 0.5 * 0.2 - 0.3 + 1.4, abs=1e-15)


def test_expanded_model_stem_identity():
    src = build_encoder(EncoderConfig(in_channels=3), seed=0).double().eval()
    big = expand_encoder(src).double().eval()
    x3 = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    x4 = torch.cat([x3, x3[:, :1]], dim=1)
    doubled = x3.clone()
    doubled[:, 0] *= 2
    assert torch.allclose(big.stem(x4), src.stem(doubled), atol=1e-12)
    with torch.no_grad():
        assert np.isfinite(big.forward_projection(x4).numpy()).all()
