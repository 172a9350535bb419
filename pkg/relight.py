#!/usr/bin/env python3
"""
Residual relighting network
An encoder-decoder whose output is added to the input image before segmentation
"""

from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from config import RelightConfig, revalidate
from errors import ShapeError
from logging_system import seg_logger
from netcore import BasicBlock, ConvSpec, ConvStage, conv3x3, seeded

DOWNSAMPLE_FACTOR = 4
IMAGE_CHANNELS = 3


class RelightNet(nn.Module):
    """Ordered stack of conv stages, residual blocks and transposed-conv stages"""

    def __init__(self, stages: Sequence[nn.Module]):
        super().__init__()
        self.stages = nn.ModuleList(stages)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return relight_forward(self, images)

    def channel_sequence(self) -> List[int]:
        """Channel count entering the first stage, then leaving each stage"""
        sequence = [IMAGE_CHANNELS]
        for stage in self.stages:
            if isinstance(stage, ConvStage):
                sequence.append(stage.spec.out_channels)
            else:
                sequence.append(sequence[-1])
        return sequence

    @property
    def last_stage(self) -> ConvStage:
        return self.stages[-1]


def _transconv(in_channels: int, out_channels: int, relu: bool) -> ConvStage:
    return ConvStage(ConvSpec(in_channels=in_channels, out_channels=out_channels, kernel=4,
                              stride=2, padding=1, transposed=True), relu=relu)


def build_relight(config: RelightConfig, seed: int) -> RelightNet:
    config = revalidate(config)
    c = config.base_channels

    with seeded(seed):
        stages: List[nn.Module] = [
            conv3x3(IMAGE_CHANNELS, c),
            conv3x3(c, 2 * c, stride=2),
            conv3x3(2 * c, 4 * c, stride=2),
            conv3x3(4 * c, 4 * c),
        ]
        stages += [BasicBlock(4 * c) for _ in range(config.num_res_blocks)]
        stages += [
            _transconv(4 * c, 2 * c, relu=True),
            _transconv(2 * c, IMAGE_CHANNELS, relu=False),
        ]
        net = RelightNet(stages)

    if config.zero_init_last:
        nn.init.zeros_(net.last_stage.conv.weight)

    seg_logger.logger.debug(
        "Built relighting network",
        extra={'event': 'build_relight', 'details': {**config.model_dump(), 'seed': seed}}
    )
    return net


def check_relight_input(images: torch.Tensor):
    if images.dim() != 4 or images.shape[1] != IMAGE_CHANNELS:
        raise ShapeError(f"relighting expects (B,3,H,W) images, got {tuple(images.shape)}")
    height, width = images.shape[-2:]
    if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR:
        raise ShapeError(
            f"relighting input {height}x{width} must be divisible by {DOWNSAMPLE_FACTOR}")


def relight_residual(net: RelightNet, images: torch.Tensor) -> torch.Tensor:
    check_relight_input(images)
    out = images
    for stage in net.stages:
        out = stage(out)
    return out


def relight_forward(net: RelightNet, images: torch.Tensor) -> torch.Tensor:
    # Skip sits outside every normalization; no clamp so gradients reach the input
    return images + relight_residual(net, images)


def denormalize(images: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    mean_t = torch.tensor(mean, dtype=images.dtype).view(-1, 1, 1)
    std_t = torch.tensor(std, dtype=images.dtype).view(-1, 1, 1)
    return images * std_t + mean_t


def export_preview(image: torch.Tensor, path: Path, mean: Sequence[float], std: Sequence[float]) -> Path:
    """Write a normalized (3,H,W) tensor as an 8-bit RGB preview"""
    if image.dim() == 4:
        image = image[0]
    pixels = denormalize(image.detach().cpu().float(), mean, std).clamp(0.0, 1.0)
    array = (pixels * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array), mode='RGB').save(path)
    return path
