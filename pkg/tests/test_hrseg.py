import numpy as np
import pytest
import torch

from config import SegConfig
from errors import ShapeError
from hrseg import (build_hrseg, connector, expected_branch_shapes, fuse_branches, head_forward,
                   seg_forward, stage_branches, transition_forward)


def same_parameters(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


@pytest.fixture
def tiny_net(tiny_seg_config):
    return build_hrseg(tiny_seg_config, 3).eval()


def test_construction_is_deterministic():
    assert same_parameters(build_hrseg(SegConfig(), 3), build_hrseg(SegConfig(), 3))


def test_branch_count_per_stage(tiny_net):
    assert [len(stage[0].branches) for stage in tiny_net.stages] == [1, 2, 3, 4]


def test_head_concat_width():
    assert build_hrseg(SegConfig(branch_channels=[8, 16, 32, 64]), 0).head.reduce.spec.in_channels == 120
    assert build_hrseg(SegConfig(), 0).head.reduce.spec.in_channels == 480


@pytest.mark.parametrize('height, width', [(32, 32), (64, 32), (96, 64), (64, 96)])
def test_logits_and_branch_ladder(tiny_net, height, width):
    images = torch.randn(2, 3, height, width)
    with torch.no_grad():
        per_stage = stage_branches(tiny_net, images)
        logits = seg_forward(tiny_net, images)
    assert logits.shape == (2, 19, height, width)
    for s, branches in enumerate(per_stage, start=1):
        assert [tuple(b.shape) for b in branches] == expected_branch_shapes(tiny_net, s, 2, height, width)


def test_default_stage4_shapes_at_64():
    net = build_hrseg(SegConfig(), 0).eval()
    with torch.no_grad():
        final = stage_branches(net, torch.randn(1, 3, 64, 64))[-1]
    assert [tuple(b.shape) for b in final] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]


def test_indivisible_input_rejected(tiny_net):
    with pytest.raises(ShapeError):
        seg_forward(tiny_net, torch.zeros(1, 3, 48, 40))


def test_repeat_forward_is_bitwise_identical(tiny_net):
    images = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(seg_forward(tiny_net, images), seg_forward(tiny_net, images))


# ===== TRANSITIONS =====

def test_transition_into_stage_two():
    net = build_hrseg(SegConfig(branch_channels=[32, 64, 128, 256]), 0).eval()
    x = torch.randn(1, 32, 16, 16)
    with torch.no_grad():
        out = transition_forward([x], 2, net)
    assert [tuple(b.shape) for b in out] == [(1, 32, 16, 16), (1, 64, 8, 8)]
    assert out[0] is x


def test_last_transition_adds_one_branch(tiny_net):
    prev = [torch.randn(1, c, 16 // 2 ** j, 16 // 2 ** j) for j, c in enumerate([4, 8, 16])]
    with torch.no_grad():
        out = transition_forward(prev, 4, tiny_net)
    assert len(out) == 4
    assert tuple(out[3].shape) == (1, 32, 2, 2)


def test_transition_rejects_mismatched_branches(tiny_net):
    with pytest.raises(ShapeError):
        transition_forward([torch.randn(1, 5, 8, 8)], 2, tiny_net)
    with pytest.raises(ShapeError):
        transition_forward([torch.randn(1, 4, 8, 8)], 5, tiny_net)


# ===== FUSION =====

def test_single_branch_fusion_passes_non_negative_input(tiny_net):
    x = torch.rand(1, 4, 8, 8)
    assert torch.equal(fuse_branches([x], tiny_net, 1)[0], x)


def test_zero_branch_with_zero_connectors(tiny_net):
    with torch.no_grad():
        for target, source in ((0, 1), (1, 0)):
            for p in connector(tiny_net, 2, target, source).parameters():
                if p.dim() > 1:
                    p.zero_()
        first = torch.randn(1, 4, 8, 8)
        second = torch.zeros(1, 8, 4, 4)
        out = fuse_branches([first, second], tiny_net, 2)
    assert torch.equal(out[0], torch.relu(first))
    assert torch.equal(out[1], torch.zeros(1, 8, 4, 4))


def test_fusion_matches_scalar_oracle():
    config = SegConfig(stem_channels=2, branch_channels=[1, 2, 3, 4], blocks_per_branch=1,
                       modules_per_stage=[1, 1, 1, 1], head_mid_channels=2, num_classes=2)
    net = build_hrseg(config, 0).eval()
    up = connector(net, 2, 0, 1)        # 1x1 conv 2 -> 1, then resize
    down = connector(net, 2, 1, 0)      # 3x3 s2 conv 1 -> 2
    with torch.no_grad():
        up.conv.weight.copy_(torch.tensor([0.5, -1.0]).view(1, 2, 1, 1))
        down[0].conv.weight.zero_()
        down[0].conv.weight[:, 0, 1, 1] = torch.tensor([2.0, 3.0])

    high = torch.tensor([[1.0, -2.0], [0.5, 4.0]]).view(1, 1, 2, 2)
    low = torch.tensor([1.5, -0.5]).view(1, 2, 1, 1)
    with torch.no_grad():
        out_high, out_low = fuse_branches([high, low], net, 2)

    bn = 1.0 / np.sqrt(1.0 + 1e-5)
    up_value = (0.5 * 1.5 - 1.0 * -0.5) * bn
    expected_high = np.maximum(high.numpy()[0, 0] + up_value, 0.0)
    # stride-2 centre tap over a 2x2 map with padding 1 lands on pixel (0,0)
    expected_low = np.maximum(low.numpy()[0, :, 0, 0] + np.array([2.0, 3.0]) * 1.0 * bn, 0.0)
    assert np.allclose(out_high.numpy()[0, 0], expected_high, atol=1e-6)
    assert np.allclose(out_low.numpy()[0, :, 0, 0], expected_low, atol=1e-6)


def test_fusion_preserves_branch_shapes(tiny_net):
    branches = [torch.randn(2, c, 16 // 2 ** j, 24 // 2 ** j) for j, c in enumerate([4, 8, 16, 32])]
    with torch.no_grad():
        fused = fuse_branches(branches, tiny_net, 4)
    assert [b.shape for b in fused] == [b.shape for b in branches]


# ===== HEAD =====

def test_head_concat_order_matters(tiny_net):
    torch.manual_seed(1)
    branches = [torch.randn(1, c, 8 // 2 ** j, 8 // 2 ** j) for j, c in enumerate([4, 8, 16, 32])]
    with torch.no_grad():
        logits = head_forward(branches, tiny_net, 32, 32)
        resized = [torch.nn.functional.interpolate(b, size=(8, 8), mode='bilinear', align_corners=False)
                   for b in branches]
        in_order = tiny_net.head.classifier(tiny_net.head.reduce(torch.cat(resized, dim=1)))
        reversed_order = tiny_net.head.classifier(tiny_net.head.reduce(torch.cat(resized[::-1], dim=1)))
        expected = torch.nn.functional.interpolate(in_order, size=(32, 32), mode='bilinear',
                                                   align_corners=False)
    assert logits.shape == (1, 19, 32, 32)
    assert torch.allclose(logits, expected, atol=1e-6)
    assert not torch.allclose(in_order, reversed_order)


# ===== GRADIENTS =====

def test_sampled_parameter_gradients(double_precision, tiny_seg_config):
    """Central differences on 200 sampled parameters of the whole network"""
    net = build_hrseg(tiny_seg_config, 11).eval()
    images = torch.randn(1, 3, 32, 32)
    weights = torch.randn(1, 19, 32, 32)

    def loss():
        return (seg_forward(net, images) * weights).sum()

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    flat_choices = rng.choice(sizes.sum(), size=200, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    eps = 1e-7
    with torch.no_grad():
        for flat in flat_choices:
            k = int(np.searchsorted(offsets, flat, side='right') - 1)
            param = params[k].view(-1)
            i = int(flat - offsets[k])
            original = param[i].item()
            param[i] = original + eps
            plus = loss().item()
            param[i] = original - eps
            minus = loss().item()
            param[i] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = params[k].grad.view(-1)[i].item()
            assert abs(analytic - numeric) <= 1e-5 + 1e-3 * abs(numeric), (k, i, analytic, numeric)
