#!/usr/bin/env python3
"""
Multi-resolution segmentation network
Stem, four stages of parallel branches with transitions and cross-resolution fusion,
and a concatenation head emitting per-class logits
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import SegConfig, revalidate
from errors import ShapeError
from logging_system import seg_logger
from netcore import BasicBlock, bilinear_resize, conv1x1, conv3x3, init_conv, seeded

STEM_STRIDE = 4
INPUT_MULTIPLE = 32
NUM_STAGES = 4


class FuseLayer(nn.Module):
    """Cross-resolution exchange: every output branch sums all resolution-adapted inputs.

    connectors[j][i] maps branch i onto branch j. Higher resolution inputs are
    reduced by a chain of strided 3x3 convs, lower resolution inputs are matched
    with a 1x1 conv and then bilinearly upsampled.
    """

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        self.channels = list(channels)
        self.connectors = nn.ModuleList()
        for j, c_out in enumerate(channels):
            row = nn.ModuleList()
            for i, c_in in enumerate(channels):
                if i == j:
                    row.append(nn.Identity())
                elif i < j:
                    links = []
                    for k in range(j - i):
                        last = k == j - i - 1
                        links.append(conv3x3(c_in, c_out if last else c_in, stride=2, relu=not last))
                    row.append(nn.Sequential(*links))
                else:
                    row.append(conv1x1(c_in, c_out, relu=False))
            self.connectors.append(row)

    def forward(self, branches: List[torch.Tensor]) -> List[torch.Tensor]:
        fused = []
        for j, target in enumerate(branches):
            height, width = target.shape[-2:]
            total = target
            for i, source in enumerate(branches):
                if i == j:
                    continue
                adapted = self.connectors[j][i](source)
                if i > j:
                    adapted = bilinear_resize(adapted, height, width)
                total = total + adapted
            fused.append(F.relu(total))
        return fused


class ExchangeModule(nn.Module):
    """Residual blocks on every branch followed by fusion"""

    def __init__(self, channels: Sequence[int], blocks_per_branch: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(c) for _ in range(blocks_per_branch)]) for c in channels)
        self.fuse = FuseLayer(channels)

    def forward(self, branches: List[torch.Tensor]) -> List[torch.Tensor]:
        return self.fuse([block(x) for block, x in zip(self.branches, branches)])


class Transition(nn.Module):
    """Bridges stage s-1 (s-1 branches) to stage s (s branches)"""

    def __init__(self, prev_channels: Sequence[int], next_channels: Sequence[int]):
        super().__init__()
        self.adapters = nn.ModuleList(
            nn.Identity() if p == n else conv3x3(p, n)
            for p, n in zip(prev_channels, next_channels))
        self.spawn = conv3x3(prev_channels[-1], next_channels[len(prev_channels)], stride=2)

    def forward(self, branches: List[torch.Tensor]) -> List[torch.Tensor]:
        out = [adapter(x) for adapter, x in zip(self.adapters, branches)]
        out.append(self.spawn(branches[-1]))
        return out


class SegHead(nn.Module):
    def __init__(self, in_channels: int, mid_channels: int, num_classes: int):
        super().__init__()
        self.reduce = conv1x1(in_channels, mid_channels)
        self.classifier = nn.Conv2d(mid_channels, num_classes, kernel_size=1, bias=True)
        init_conv(self.classifier)


class SegNet(nn.Module):
    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        b = config.branch_channels
        self.stem = nn.Sequential(
            conv3x3(3, config.stem_channels, stride=2),
            conv3x3(config.stem_channels, config.stem_channels, stride=2),
        )
        self.entry = conv1x1(config.stem_channels, b[0])
        self.stages = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for s in range(1, NUM_STAGES + 1):
            if s > 1:
                self.transitions.append(Transition(b[:s - 1], b[:s]))
            self.stages.append(nn.ModuleList(
                ExchangeModule(b[:s], config.blocks_per_branch)
                for _ in range(config.modules_per_stage[s - 1])))
        self.head = SegHead(sum(b), config.head_mid_channels, config.num_classes)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return seg_forward(self, images)


def build_hrseg(config: SegConfig, seed: int) -> SegNet:
    config = revalidate(config)
    with seeded(seed):
        net = SegNet(config)
    seg_logger.logger.debug(
        "Built segmentation network",
        extra={'event': 'build_hrseg', 'details': {**config.model_dump(), 'seed': seed}}
    )
    return net


# ===== SHAPE CHECKS =====

def expected_branch_shapes(net: SegNet, stage_index: int, batch: int, height: int, width: int):
    """Canonical (B,C,H,W) of each branch at a stage, for an input of height x width"""
    return [
        (batch, net.config.branch_channels[j],
         height // (STEM_STRIDE * 2 ** j), width // (STEM_STRIDE * 2 ** j))
        for j in range(stage_index)
    ]


def _check_branches(branches: Sequence[torch.Tensor], net: SegNet, count: int, what: str):
    if len(branches) != count:
        raise ShapeError(f"{what} expects {count} branches, got {len(branches)}")
    base_h, base_w = branches[0].shape[-2:]
    for j, x in enumerate(branches):
        want_c = net.config.branch_channels[j]
        want_h, want_w = -(-base_h // 2 ** j), -(-base_w // 2 ** j)
        if x.dim() != 4 or x.shape[1] != want_c or tuple(x.shape[-2:]) != (want_h, want_w):
            raise ShapeError(
                f"{what}: branch {j} has shape {tuple(x.shape)}, "
                f"expected (*,{want_c},{want_h},{want_w})")


def check_seg_input(images: torch.Tensor):
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"segmentation expects (B,3,H,W) images, got {tuple(images.shape)}")
    height, width = images.shape[-2:]
    if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
        raise ShapeError(
            f"segmentation input {height}x{width} must be divisible by {INPUT_MULTIPLE}")


# ===== FORWARD OPERATIONS =====

def transition_forward(prev_branches: List[torch.Tensor], stage_index: int, net: SegNet) -> List[torch.Tensor]:
    if not 2 <= stage_index <= NUM_STAGES:
        raise ShapeError(f"no transition enters stage {stage_index}")
    _check_branches(prev_branches, net, stage_index - 1, f"transition into stage {stage_index}")
    return net.transitions[stage_index - 2](prev_branches)


def fuse_branches(branches: List[torch.Tensor], net: SegNet, stage_index: int,
                  module_index: int = 0) -> List[torch.Tensor]:
    _check_branches(branches, net, stage_index, f"fusion at stage {stage_index}")
    return net.stages[stage_index - 1][module_index].fuse(branches)


def head_forward(branches: List[torch.Tensor], net: SegNet, out_height: int, out_width: int) -> torch.Tensor:
    _check_branches(branches, net, NUM_STAGES, "head")
    height, width = branches[0].shape[-2:]
    features = torch.cat([bilinear_resize(x, height, width) for x in branches], dim=1)
    logits = net.head.classifier(net.head.reduce(features))
    return bilinear_resize(logits, out_height, out_width)


def stage_branches(net: SegNet, images: torch.Tensor) -> List[List[torch.Tensor]]:
    """Branch outputs after each of the four stages"""
    check_seg_input(images)
    branches = [net.entry(net.stem(images))]
    per_stage = []
    for s in range(1, NUM_STAGES + 1):
        if s > 1:
            branches = transition_forward(branches, s, net)
        for module in net.stages[s - 1]:
            branches = module(branches)
        per_stage.append(branches)
    return per_stage


def seg_forward(net: SegNet, images: torch.Tensor) -> torch.Tensor:
    final_branches = stage_branches(net, images)[-1]
    return head_forward(final_branches, net, images.shape[-2], images.shape[-1])


def connector(net: SegNet, stage_index: int, target: int, source: int,
              module_index: int = 0) -> Optional[nn.Module]:
    """Fusion connector mapping branch `source` onto branch `target`"""
    return net.stages[stage_index - 1][module_index].fuse.connectors[target][source]
