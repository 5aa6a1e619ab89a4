import numpy as np
import pytest

from selfseg import numcore as nc
from selfseg.model import (
    ConfigError,
    DecoderConfig,
    EncoderConfig,
    build_model,
    class_activation,
    compute_cam,
    forward,
    load_model,
    save_model,
)

TINY_ENC = EncoderConfig(widths=(3, 4, 5), strides=(1, 2, 2))


def test_default_encoder_geometry():
    enc = EncoderConfig()
    assert enc.widths == (16, 32, 64, 128) and enc.strides == (1, 2, 2, 2)
    assert enc.effective_stride == 4
    assert EncoderConfig(last_block_dilated=False).effective_stride == 8


def test_same_seed_gives_identical_parameters():
    a = build_model(EncoderConfig(), DecoderConfig(), 3, seed=7)
    b = build_model(EncoderConfig(), DecoderConfig(), 3, seed=7)
    assert a.checksum() == b.checksum()
    assert build_model(EncoderConfig(), DecoderConfig(), 3, seed=8).checksum() != a.checksum()


def test_dilated_last_block_doubles_feature_extent():
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
    dil = forward(build_model(EncoderConfig(), DecoderConfig(), 3, 0), x, with_decoder=False)
    plain = forward(build_model(EncoderConfig(last_block_dilated=False), DecoderConfig(), 3, 0), x, with_decoder=False)
    assert dil.encoder_features.shape[2:] == (16, 16)
    assert plain.encoder_features.shape[2:] == (8, 8)
    assert dil.class_logits.shape == plain.class_logits.shape == (1, 3)


def test_classifier_rows_and_no_bias():
    p = build_model(EncoderConfig(), DecoderConfig(), 3, 0)
    assert p["classifier.weight"].shape == (3, 128, 1, 1)
    assert not any(n.startswith("classifier") and n.endswith("bias") for n in p.tensors)


@pytest.mark.parametrize("kind", ["bilinear_unet", "transposed_unet", "aspp_lite"])
def test_forward_shapes_and_zero_input(kind):
    p = build_model(EncoderConfig(), DecoderConfig(kind=kind), 3, 0)
    out = forward(p, np.zeros((2, 3, 64, 64)))
    assert out.pixel_logits.shape == (2, 4, 64, 64)
    assert out.class_logits.shape == (2, 3)
    assert np.all(np.isfinite(out.class_logits.data)) and np.all(np.isfinite(out.pixel_logits.data))
    assert out.encoder_features.shape[2:] == (64 // p.encoder.effective_stride,) * 2


def test_identical_images_give_identical_rows():
    x = np.random.default_rng(1).uniform(size=(1, 3, 32, 32))
    out = forward(build_model(EncoderConfig(), DecoderConfig(), 3, 0), np.concatenate([x, x]))
    np.testing.assert_array_equal(out.class_logits.data[0], out.class_logits.data[1])
    np.testing.assert_array_equal(out.pixel_logits.data[0], out.pixel_logits.data[1])


def test_learnable_upsampling_only_in_transposed_decoder():
    bil = build_model(EncoderConfig(), DecoderConfig(kind="bilinear_unet"), 3, 0)
    tr = build_model(EncoderConfig(), DecoderConfig(kind="transposed_unet"), 3, 0)
    assert not any(".up" in n for n in bil.names("decoder"))
    assert any(".up" in n for n in tr.names("decoder"))


def test_skip_connections_widen_decoder_inputs():
    with_skip = build_model(TINY_ENC, DecoderConfig(), 2, 0)
    no_skip = build_model(TINY_ENC, DecoderConfig(use_skip_connections=False), 2, 0)
    # stage 0 joins encoder block 0 (3 channels) at full resolution
    assert with_skip["decoder.stage0.weight"].shape[1] == no_skip["decoder.stage0.weight"].shape[1] + 3


def test_parameter_count_is_a_function_of_configs():
    counts = {build_model(EncoderConfig(), DecoderConfig(), 3, s).parameter_count() for s in range(3)}
    assert len(counts) == 1


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(widths=(8,), strides=(1,)), DecoderConfig(), 3, 0)
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(widths=(8, 0), strides=(1, 2)), DecoderConfig(), 3, 0)
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(), DecoderConfig(kind="fpn"), 3, 0)
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(), DecoderConfig(channels=(4,)), 3, 0)
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(), DecoderConfig(), 0, 0)


def test_heads_share_one_encoder_pass():
    p = build_model(TINY_ENC, DecoderConfig(), 2, 0)
    out = forward(p, np.random.default_rng(0).uniform(size=(1, 3, 8, 8)))
    assert out.skips[-1] is out.encoder_features
    g = nc.Graph.from_root(nc.add(nc.sum_all(out.class_logits), nc.sum_all(out.pixel_logits)))
    assert sum(1 for n in g.nodes if n is out.encoder_features) == 1


def test_cam_all_ones_feature():
    p = build_model(TINY_ENC, DecoderConfig(), 2, 0)
    p["classifier.weight"].data = np.zeros((2, 5, 1, 1))
    p["classifier.weight"].data[0, 0] = 1.0
    feats = np.zeros((5, 4, 4))
    feats[0] = 1.0
    cam = compute_cam(p, feats, {1, 2})
    np.testing.assert_array_equal(cam.maps[0], 1.0)
    np.testing.assert_array_equal(cam.maps[1], 0.0)


def test_cam_absent_class_is_zero_and_range():
    rng = np.random.default_rng(2)
    p = build_model(TINY_ENC, DecoderConfig(), 3, 0)
    cam = compute_cam(p, rng.normal(size=(5, 6, 6)), {2})
    assert np.all(cam.maps[[0, 2]] == 0)
    assert cam.maps.min() >= 0 and cam.maps.max() <= 1
    if cam.maps[1].max() > 0:
        assert cam.maps[1].max() == 1.0


def test_cam_matches_per_pixel_dot_product():
    rng = np.random.default_rng(3)
    p = build_model(EncoderConfig(widths=(2, 2), strides=(1, 2)), DecoderConfig(), 3, 0)
    f = rng.normal(size=(2, 2, 2))
    w = p["classifier.weight"].data[:, :, 0, 0]
    raw = class_activation(p, f)
    for c in range(3):
        for y in range(2):
            for x in range(2):
                assert raw[c, y, x] == pytest.approx(w[c, 0] * f[0, y, x] + w[c, 1] * f[1, y, x], abs=1e-14)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = build_model(EncoderConfig(), DecoderConfig(kind="transposed_unet"), 3, 5)
    save_model(tmp_path / "m.ckpt", p)
    q = load_model(tmp_path / "m.ckpt")
    assert q.checksum() == p.checksum()
    assert q.encoder == p.encoder and q.decoder == p.decoder and q.num_classes == 3
