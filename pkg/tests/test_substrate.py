import pytest
import torch

from dlcbench.errors import ConfigError, DimensionError
from dlcbench.seeding import param_checksum
from dlcbench.substrate import (BackboneSpec, ClassifierHead, build_backbone,
                                forward_logits, grow_head, new_head)


def test_spec_channel_mismatch_rejected():
    bad = BackboneSpec(conv_stages=((3, 8, 3), (16, 16, 3)), feature_dim=16)
    with pytest.raises(ConfigError):
        bad.validate()


def test_spec_feature_dim_must_match_last_stage():
    bad = BackboneSpec(conv_stages=((3, 8, 3),), feature_dim=32)
    with pytest.raises(ConfigError):
        bad.validate()


def test_tap_registry_mirrors_stages_deepest_first(tiny_spec):
    extractor = build_backbone(tiny_spec, seed=0)
    assert extractor.tap_names() == ["conv3", "conv2", "conv1"]


def test_build_backbone_deterministic(tiny_spec):
    a = build_backbone(tiny_spec, seed=123)
    b = build_backbone(tiny_spec, seed=123)
    assert param_checksum(a) == param_checksum(b)
    c = build_backbone(tiny_spec, seed=124)
    assert param_checksum(a) != param_checksum(c)


def test_forward_features_shape_and_finite(tiny_extractor):
    x = torch.zeros(5, 3, 8, 8)
    tiny_extractor.eval()
    feats = tiny_extractor(x)
    assert feats.shape == (5, 16)
    assert torch.isfinite(feats).all()


def test_forward_features_eval_repeatable(tiny_extractor):
    tiny_extractor.eval()
    x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(3))
    first = tiny_extractor(x)
    second = tiny_extractor(x)
    assert torch.equal(first, second)


def test_forward_rejects_wrong_channels(tiny_extractor):
    with pytest.raises(DimensionError):
        tiny_extractor(torch.zeros(2, 4, 8, 8))


def test_forward_logits_zero_head():
    head = ClassifierHead(4, 3)
    logits = forward_logits(head, torch.ones(2, 4))
    assert torch.equal(logits, torch.zeros(2, 3))


def test_forward_logits_identity_block():
    head = ClassifierHead(2, 2)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2))
    feats = torch.tensor([[0.5, -1.5]])
    assert torch.equal(forward_logits(head, feats), feats)


def test_forward_logits_hand_case():
    # weight rows are input features, columns classes
    head = ClassifierHead(2, 2)
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
    logits = forward_logits(head, torch.tensor([[5.0, 6.0]]))
    assert torch.equal(logits, torch.tensor([[5 * 1 + 6 * 3.0, 5 * 2 + 6 * 4.0]]))


def test_forward_logits_width_mismatch():
    head = ClassifierHead(4, 3)
    with pytest.raises(DimensionError):
        forward_logits(head, torch.ones(2, 5))


def test_grow_head_preserves_old_block_bitwise():
    head = new_head(3, 2, "base", seed=7)
    grown = grow_head(head, 5, 4)
    assert torch.equal(grown.weight[:3, :2], head.weight)
    assert torch.equal(grown.bias[:2], head.bias)
    assert torch.equal(grown.weight[3:, :], torch.zeros(2, 4))
    assert torch.equal(grown.weight[:, 2:], torch.zeros(5, 2))


def test_grow_head_classes_only_and_noop():
    head = new_head(3, 2, "base", seed=9)
    classes_only = grow_head(head, 3, 5)
    assert torch.equal(classes_only.weight[:, :2], head.weight)
    noop = grow_head(head, 3, 2)
    assert torch.equal(noop.weight, head.weight)
    assert torch.equal(noop.bias, head.bias)


def test_grow_head_refuses_to_shrink():
    head = new_head(3, 4, "base", seed=1)
    with pytest.raises(ConfigError):
        grow_head(head, 3, 2)


def test_batch_rows_match_input_count(tiny_extractor):
    tiny_extractor.eval()
    for n in (1, 3, 7):
        feats = tiny_extractor(torch.zeros(n, 3, 8, 8))
        assert feats.shape[0] == n
