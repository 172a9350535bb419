import numpy as np
import pytest
import torch
from PIL import Image
from torch.autograd import gradcheck

from config import RelightConfig
from data import normalize_image
from errors import InvalidConfig, ShapeError
from netcore import ConvStage
from relight import build_relight, export_preview, relight_forward, relight_residual

MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def same_parameters(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_construction_is_deterministic():
    assert same_parameters(build_relight(RelightConfig(), 7), build_relight(RelightConfig(), 7))
    assert not same_parameters(build_relight(RelightConfig(zero_init_last=False), 7),
                               build_relight(RelightConfig(zero_init_last=False), 8))


def test_channel_sequence():
    net = build_relight(RelightConfig(base_channels=8), 0)
    assert net.channel_sequence() == [3, 8, 16, 32, 32, 32, 32, 32, 16, 3]


def test_no_residual_blocks_leaves_six_stages():
    net = build_relight(RelightConfig(num_res_blocks=0), 0)
    assert len(net.stages) == 6
    assert all(isinstance(stage, ConvStage) for stage in net.stages)


def test_invalid_config_rejected():
    config = RelightConfig.model_construct(base_channels=0, num_res_blocks=3, zero_init_last=True)
    with pytest.raises(InvalidConfig):
        build_relight(config, 0)


def test_identity_at_init(tiny_relight_config):
    net = build_relight(tiny_relight_config, 3).eval()
    torch.manual_seed(0)
    for _ in range(10):
        images = torch.randn(2, 3, 16, 24)
        assert torch.equal(relight_residual(net, images), torch.zeros_like(images))
        assert (relight_forward(net, images) - images).abs().max().item() == 0.0


def test_shape_preserved_and_decomposition():
    net = build_relight(RelightConfig(base_channels=4, zero_init_last=False), 1).eval()
    images = torch.randn(2, 3, 64, 64)
    residual = relight_residual(net, images)
    relit = relight_forward(net, images)
    assert relit.shape == images.shape
    assert torch.allclose(relit - residual, images, atol=1e-6)


def test_indivisible_input_rejected(tiny_relight_config):
    net = build_relight(tiny_relight_config, 0)
    with pytest.raises(ShapeError):
        relight_forward(net, torch.zeros(1, 3, 30, 32))
    with pytest.raises(ShapeError):
        relight_forward(net, torch.zeros(1, 1, 32, 32))


def test_shared_weights_across_domains():
    net = build_relight(RelightConfig(base_channels=4, zero_init_last=False), 5).eval()
    before = {k: v.clone() for k, v in net.state_dict().items()}
    source, target = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    first = relight_forward(net, source)
    relight_forward(net, target)
    assert torch.equal(relight_forward(net, source), first)
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_hand_built_stack_matches_convolution_oracle():
    net = build_relight(RelightConfig(base_channels=1, num_res_blocks=0, zero_init_last=False), 0).eval()
    first = net.stages[0]
    with torch.no_grad():
        first.conv.weight.zero_()
        first.conv.weight[0, 0, 1, 1] = 2.0
    images = torch.arange(48, dtype=torch.float32).view(1, 3, 4, 4) / 10.0
    out = first(images)
    expected = torch.relu(2.0 * images[:, :1] / torch.sqrt(torch.tensor(1.0 + 1e-5)))
    assert torch.allclose(out, expected, atol=1e-6)


def test_gradient_through_relight_forward(double_precision):
    net = build_relight(RelightConfig(base_channels=2, num_res_blocks=1, zero_init_last=False), 0).eval()
    images = torch.randn(1, 3, 4, 4, requires_grad=True)
    weights = torch.randn(1, 3, 4, 4)
    assert gradcheck(lambda x: (relight_forward(net, x) * weights).sum(), (images,),
                     eps=1e-6, atol=1e-6, rtol=1e-3)


def test_preview_of_identity_network(tmp_path, tiny_relight_config):
    net = build_relight(tiny_relight_config, 0).eval()
    pixels = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    images = normalize_image(pixels, MEAN, STD).unsqueeze(0)
    path = export_preview(relight_forward(net, images), tmp_path / 'relit.png', MEAN, STD)
    written = np.asarray(Image.open(path)).astype(int)
    assert written.shape == pixels.shape
    assert np.abs(written - pixels.astype(int)).max() <= 1
