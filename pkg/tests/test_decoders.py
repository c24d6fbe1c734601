"""Decoder and fine-tune assembly tests."""

import numpy as np
import pytest

from sardino import autograd as ag
from sardino import decoders as dec
from sardino.errors import ConfigError, ShapeError
from sardino.optim import Adam
from sardino.vit import ViTConfig, VisionTransformer

F64 = np.float64


def desk_backbone(seed=0, **overrides):
    return VisionTransformer(ViTConfig.desk(**overrides),
                             np.random.default_rng(seed))


def seg_cfg(**overrides):
    base = dict(mode="unet_plus_attention", unet_widths=(4, 8, 12), epochs=2)
    base.update(overrides)
    return dec.FineTuneConfig(**base)


# ---------------------------------------------------------------------------
# U-Net

def test_unet_output_matches_input_resolution(rng):
    net = dec.UNet(3, 11, rng, widths=(8, 16, 32))
    x = ag.Tensor(rng.normal(size=(1, 3, 448, 448)).astype(np.float32))
    with ag.no_grad():
        y = net(x)
    assert y.shape == (1, 11, 448, 448)


def test_unet_small_input(rng):
    net = dec.UNet(12, 11, rng, widths=(4, 8, 12))
    y = net(ag.Tensor(rng.normal(size=(2, 12, 32, 32)).astype(np.float32)))
    assert y.shape == (2, 11, 32, 32)


def test_unet_rejects_indivisible_input(rng):
    net = dec.UNet(3, 11, rng, widths=(4, 8, 12))
    with pytest.raises(ShapeError):
        net(ag.Tensor(np.zeros((1, 3, 36, 36), dtype=np.float32)))


def test_unet_rejects_wrong_channels(rng):
    net = dec.UNet(3, 11, rng, widths=(4, 8, 12))
    with pytest.raises(ShapeError):
        net(ag.Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32)))


def test_unet_gradcheck_end_to_end(rng):
    """Finite differences through pools, skips, upsampling, and batch norm."""
    with ag.double_precision():
        net = dec.UNet(2, 3, rng, widths=(2, 3, 4))
    x = ag.Tensor(rng.normal(size=(1, 2, 16, 16)), requires_grad=True, dtype=F64)
    w = rng.normal(size=(1, 3, 16, 16))

    def f(v):
        return ag.reduce_sum(net(v) * ag.Tensor(w, dtype=F64))

    assert ag.gradient_check(f, x, eps=1e-5) < 1e-5


# ---------------------------------------------------------------------------
# token decoder

def test_token_decoder_upsamples_16x(rng):
    net = dec.TokenDecoder(16, 11, rng)
    tokens = ag.Tensor(rng.normal(size=(2, 16, 2, 2)).astype(np.float32))
    y = net(tokens)
    assert y.shape == (2, 11, 32, 32)


def test_token_decoder_needs_wide_embeddings(rng):
    with pytest.raises(ConfigError):
        dec.TokenDecoder(8, 11, rng)


def test_token_decoder_channel_halving(rng):
    net = dec.TokenDecoder(64, 11, rng)
    assert net.stages[0].items[0].weight.shape[:2] == (32, 64)
    assert net.stages[3].items[0].weight.shape[:2] == (4, 8)
    assert net.outc.weight.shape[:2] == (11, 4)


# ---------------------------------------------------------------------------
# assembly

def test_assemble_channel_math(rng):
    bb = desk_backbone()
    m_base = dec.assemble_model(seg_cfg(mode="unet_baseline"), None, rng)
    assert m_base.decoder.in_channels == 12
    m_attn = dec.assemble_model(seg_cfg(mode="attn_unet"), bb, rng)
    assert m_attn.decoder.in_channels == 4  # one channel per head
    m_plus = dec.assemble_model(seg_cfg(mode="unet_plus_attention"), bb, rng)
    assert m_plus.decoder.in_channels == 16


def test_assemble_requires_backbone_for_attention_modes(rng):
    with pytest.raises(ConfigError):
        dec.assemble_model(seg_cfg(mode="attn_unet"), None, rng)


def test_token_decoder_requires_patch16(rng):
    bb8 = desk_backbone()  # patch size 8
    with pytest.raises(ConfigError, match="patch_size 16"):
        dec.assemble_model(seg_cfg(mode="token_decoder"), bb8, rng)
    bb16 = desk_backbone(image_size=64, patch_size=16)
    model = dec.assemble_model(seg_cfg(mode="token_decoder"), bb16, rng)
    x = ag.Tensor(rng.normal(size=(1, 12, 64, 64)).astype(np.float32))
    assert model(x).shape == (1, 11, 64, 64)


def test_forward_shapes_all_modes(rng):
    bb = desk_backbone()
    x = ag.Tensor(rng.normal(size=(2, 12, 32, 32)).astype(np.float32))
    for mode in ("unet_baseline", "attn_unet", "unet_plus_attention"):
        model = dec.assemble_model(seg_cfg(mode=mode), bb, rng)
        assert model(x).shape == (2, 11, 32, 32), mode


def test_plus_attention_features_keep_raw_channels(rng):
    bb = desk_backbone()
    model = dec.assemble_model(seg_cfg(), bb, rng)
    x = ag.Tensor(rng.normal(size=(1, 12, 32, 32)).astype(np.float32))
    feats = model.features(x)
    assert feats.shape == (1, 16, 32, 32)
    np.testing.assert_array_equal(feats.data[:, :12], x.data)
    # attention channels are min-max normalized before upsampling
    assert feats.data[:, 12:].min() >= -1e-6
    assert feats.data[:, 12:].max() <= 1.0 + 1e-6


def test_precompute_features_matches_live_path(rng):
    bb = desk_backbone()
    model = dec.assemble_model(seg_cfg(mode="attn_unet"), bb, rng)
    x = rng.normal(size=(2, 12, 32, 32)).astype(np.float32)
    cached = model.precompute_features(x)
    live = model.features(ag.Tensor(x)).data
    np.testing.assert_array_equal(cached, live)


def test_freeze_contract(rng):
    bb = desk_backbone()
    model = dec.assemble_model(seg_cfg(freeze_backbone=True), bb, rng)
    assert all(not p.requires_grad for p in model.backbone.parameters())
    trainable = dict(model.trainable_parameters())
    assert trainable and all(n.startswith("decoder.") for n in trainable)

    unfrozen = dec.assemble_model(seg_cfg(freeze_backbone=False),
                                  desk_backbone(), rng)
    names = dict(unfrozen.trainable_parameters())
    assert any(n.startswith("backbone.") for n in names)


def test_finetune_epoch_frozen_backbone_zero_drift(rng):
    bb = desk_backbone()
    model = dec.assemble_model(seg_cfg(freeze_backbone=True), bb, rng)
    before = {n: p.data.copy() for n, p in model.backbone.named_parameters()}
    channels = [rng.normal(size=(12, 32, 32)).astype(np.float32) for _ in range(4)]
    labels = [rng.integers(0, 11, size=(32, 32)) for _ in range(4)]
    opt = Adam(model.trainable_parameters(), lr=1e-3)
    dec.finetune_epoch(model, channels, labels, opt, batch_size=2,
                       rng=np.random.default_rng(0))
    after = dict(model.backbone.named_parameters())
    for n, arr in before.items():
        np.testing.assert_array_equal(arr, after[n].data, err_msg=n)


def test_finetune_epoch_descends_on_tiny_problem(rng):
    """A U-Net should overfit two easy tiles within a few epochs."""
    model = dec.assemble_model(seg_cfg(mode="unet_baseline"), None, rng)
    gen = np.random.default_rng(3)
    labels = [np.zeros((16, 16), dtype=np.int64), np.ones((16, 16), dtype=np.int64)]
    channels = [np.full((12, 16, 16), -5.0, dtype=np.float32)
                + gen.normal(0, 0.3, size=(12, 16, 16)).astype(np.float32),
                np.full((12, 16, 16), 5.0, dtype=np.float32)
                + gen.normal(0, 0.3, size=(12, 16, 16)).astype(np.float32)]
    opt = Adam(model.trainable_parameters(), lr=1e-2)
    stats = [dec.finetune_epoch(model, channels, labels, opt, 2,
                                np.random.default_rng(e)) for e in range(20)]
    assert stats[-1].loss < 0.5 * stats[0].loss
    assert stats[-1].train_miou > stats[0].train_miou


def test_predict_landcover_shape_and_mode_restored(rng):
    model = dec.assemble_model(seg_cfg(mode="unet_baseline"), None, rng)
    model.train()
    pred = dec.predict_landcover(model, rng.normal(size=(12, 16, 16)).astype(np.float32))
    assert pred.shape == (16, 16) and pred.dtype == np.uint8
    assert pred.max() < 11
    assert model.training  # eval switch must not leak
    batch = dec.predict_landcover(model, rng.normal(size=(3, 12, 16, 16)).astype(np.float32))
    assert batch.shape == (3, 16, 16)


# ---------------------------------------------------------------------------
# losses

def test_per_class_sigmoid_onehot_placement():
    logits = ag.Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32))
    labels = np.array([[[0, 1], [2, 0]]])
    loss = dec.segmentation_loss(logits, labels, "per_class_sigmoid")
    # all logits zero: BCE is ln 2 for every class/pixel regardless of target
    assert abs(loss.item() - np.log(2.0)) < 1e-6

    biased = np.zeros((1, 3, 2, 2), dtype=np.float32)
    biased[0, 0] = 10.0  # confident class 0 everywhere
    loss_right = dec.segmentation_loss(
        ag.Tensor(biased), np.zeros((1, 2, 2), dtype=np.int64), "per_class_sigmoid")
    loss_wrong = dec.segmentation_loss(
        ag.Tensor(biased), np.full((1, 2, 2), 2, dtype=np.int64), "per_class_sigmoid")
    assert loss_right.item() < loss_wrong.item()


def test_segmentation_ce_matches_autograd_op(rng):
    logits = ag.Tensor(rng.normal(size=(2, 5, 4, 4)), dtype=F64)
    labels = rng.integers(0, 5, size=(2, 4, 4))
    a = dec.segmentation_loss(logits, labels, "ce").item()
    b = ag.cross_entropy(logits, labels).item()
    assert a == b


def test_config_validation():
    with pytest.raises(ConfigError):
        dec.FineTuneConfig(mode="segformer").validate()
    with pytest.raises(ConfigError):
        dec.FineTuneConfig(loss="dice").validate()
    with pytest.raises(ConfigError):
        dec.FineTuneConfig(unet_widths=(4, 8)).validate()


def test_initial_loss_near_uniform_cross_entropy(rng):
    """Fresh random heads produce near-uniform logits, so the first epoch's
    loss starts close to ln 11."""
    model = dec.assemble_model(seg_cfg(mode="unet_baseline"), None, rng)
    channels = [0.1 * rng.normal(size=(12, 16, 16)).astype(np.float32)
                for _ in range(4)]
    labels = [rng.integers(0, 11, size=(16, 16)) for _ in range(4)]
    opt = Adam(model.trainable_parameters(), lr=0.0)
    stats = dec.finetune_epoch(model, channels, labels, opt, 4,
                               np.random.default_rng(0))
    assert abs(stats.loss - np.log(11.0)) < 0.3


def test_attention_channel_linearity_probe(rng):
    """Zeroing the first conv's weight slice over the attention channels
    must make unet_plus_attention blind to attention values: the raw
    channels alone then determine the output."""
    bb = desk_backbone()
    model = dec.assemble_model(seg_cfg(), bb, rng)
    first_conv = model.decoder.inc.conv1
    first_conv.weight.data[:, 12:, :, :] = 0.0

    raw = rng.normal(size=(1, 12, 32, 32)).astype(np.float32)
    x = ag.Tensor(raw)
    model.eval()
    with ag.no_grad():
        feats = model.features(x).data.copy()
        varied = feats.copy()
        varied[:, 12:] = rng.normal(size=varied[:, 12:].shape)
        zeroed = feats.copy()
        zeroed[:, 12:] = 0.0
        out_varied = model.decoder(ag.Tensor(varied)).data
        out_zeroed = model.decoder(ag.Tensor(zeroed)).data
    np.testing.assert_allclose(out_varied, out_zeroed, atol=1e-5)


def test_argmax_invariant_to_positive_scaling(rng):
    model = dec.assemble_model(seg_cfg(mode="unet_baseline"), None, rng)
    model.eval()
    x = rng.normal(size=(12, 16, 16)).astype(np.float32)
    with ag.no_grad():
        logits = model(ag.Tensor(x[None])).data
    base = logits.argmax(axis=1)
    for scale in (0.5, 2.0, 7.3):
        np.testing.assert_array_equal((logits * scale).argmax(axis=1), base)
    np.testing.assert_array_equal((logits + 3.0).argmax(axis=1), base)
