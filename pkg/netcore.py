#!/usr/bin/env python3
"""
Layer substrate shared by the relighting and segmentation networks
Shape arithmetic, batch normalization state and bilinear resizing on top of torch
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from errors import ChannelMismatch, NonPositiveOutput, ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
# Half-pixel centres; every resize in the package goes through bilinear_resize
ALIGN_CORNERS = False

Mode = Literal['train', 'eval']


class TensorShape(BaseModel):
    """Dimensions of a (batch, channels, height, width) tensor"""
    model_config = ConfigDict(frozen=True)

    batch: int = Field(ge=1)
    channels: int = Field(ge=1)
    height: int = Field(ge=1)
    width: int = Field(ge=1)

    @classmethod
    def of(cls, x: torch.Tensor) -> 'TensorShape':
        if x.dim() != 4:
            raise ShapeError(f"expected a 4-d tensor, got shape {tuple(x.shape)}")
        return cls(batch=x.shape[0], channels=x.shape[1], height=x.shape[2], width=x.shape[3])

    def as_tuple(self):
        return (self.batch, self.channels, self.height, self.width)


class ConvSpec(BaseModel):
    """Geometry of a (possibly transposed) 2-d convolution"""
    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    kernel: int = Field(ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    transposed: bool = False
    has_bias: bool = False


@dataclass
class NormState:
    """View onto the statistics and affine parameters of one batch-norm layer.

    The tensors are shared with the owning module, so a train-mode forward
    updates the module's running statistics in place.
    """
    running_mean: torch.Tensor
    running_var: torch.Tensor
    scale: torch.Tensor
    shift: torch.Tensor
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def from_module(cls, bn: nn.BatchNorm2d) -> 'NormState':
        return cls(bn.running_mean, bn.running_var, bn.weight, bn.bias,
                   momentum=bn.momentum, epsilon=bn.eps)

    @property
    def channels(self) -> int:
        return self.running_mean.numel()


# ===== SHAPE ARITHMETIC =====

def _check_channels(in_shape: TensorShape, spec: ConvSpec):
    if in_shape.channels != spec.in_channels:
        raise ChannelMismatch(
            f"input has {in_shape.channels} channels, layer expects {spec.in_channels}")


def conv_output_shape(in_shape: TensorShape, spec: ConvSpec) -> TensorShape:
    if spec.transposed:
        raise ShapeError("conv_output_shape called with a transposed spec")
    _check_channels(in_shape, spec)
    height = (in_shape.height + 2 * spec.padding - spec.kernel) // spec.stride + 1
    width = (in_shape.width + 2 * spec.padding - spec.kernel) // spec.stride + 1
    if height < 1 or width < 1:
        raise NonPositiveOutput(
            f"kernel {spec.kernel} with padding {spec.padding} does not fit "
            f"{in_shape.height}x{in_shape.width} input")
    return TensorShape(batch=in_shape.batch, channels=spec.out_channels, height=height, width=width)


def transconv_output_shape(in_shape: TensorShape, spec: ConvSpec) -> TensorShape:
    if not spec.transposed:
        raise ShapeError("transconv_output_shape called with a regular conv spec")
    _check_channels(in_shape, spec)
    height = (in_shape.height - 1) * spec.stride - 2 * spec.padding + spec.kernel
    width = (in_shape.width - 1) * spec.stride - 2 * spec.padding + spec.kernel
    if height < 1 or width < 1:
        raise NonPositiveOutput(f"transposed conv yields {height}x{width}")
    return TensorShape(batch=in_shape.batch, channels=spec.out_channels, height=height, width=width)


def output_shape(in_shape: TensorShape, spec: ConvSpec) -> TensorShape:
    if spec.transposed:
        return transconv_output_shape(in_shape, spec)
    return conv_output_shape(in_shape, spec)


# ===== FORWARD PRIMITIVES =====

def batchnorm_forward(x: torch.Tensor, state: NormState, mode: Mode) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != state.channels:
        raise ChannelMismatch(
            f"batch norm over {state.channels} channels received shape {tuple(x.shape)}")
    return F.batch_norm(
        x, state.running_mean, state.running_var, weight=state.scale, bias=state.shift,
        training=(mode == 'train'), momentum=state.momentum, eps=state.epsilon)


def bilinear_resize(x: torch.Tensor, target_height: int, target_width: int) -> torch.Tensor:
    if target_height < 1 or target_width < 1:
        raise ShapeError(f"resize target {target_height}x{target_width} must be positive")
    if x.shape[-2] == target_height and x.shape[-1] == target_width:
        return x
    return F.interpolate(x, size=(target_height, target_width), mode='bilinear',
                         align_corners=ALIGN_CORNERS)


# ===== LAYERS =====

def make_conv(spec: ConvSpec) -> nn.Module:
    cls = nn.ConvTranspose2d if spec.transposed else nn.Conv2d
    conv = cls(spec.in_channels, spec.out_channels, kernel_size=spec.kernel,
               stride=spec.stride, padding=spec.padding, bias=spec.has_bias)
    init_conv(conv)
    return conv


def init_conv(conv: nn.Module):
    """Fan-in scaled normal weights, zero bias"""
    nn.init.kaiming_normal_(conv.weight, mode='fan_in', nonlinearity='relu')
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def make_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPSILON, momentum=BN_MOMENTUM)


class ConvStage(nn.Module):
    """Convolution followed by batch norm and an optional ReLU"""

    def __init__(self, spec: ConvSpec, relu: bool = True):
        super().__init__()
        self.spec = spec
        self.conv = make_conv(spec)
        self.bn = make_norm(spec.out_channels)
        self.relu = relu

    @property
    def mode(self) -> Mode:
        return 'train' if self.training else 'eval'

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ChannelMismatch(
                f"stage expects {self.spec.in_channels} channels, got {x.shape[1]}")
        out = batchnorm_forward(self.conv(x), NormState.from_module(self.bn), self.mode)
        return F.relu(out) if self.relu else out

    def output_shape(self, in_shape: TensorShape) -> TensorShape:
        return output_shape(in_shape, self.spec)


def conv3x3(in_channels: int, out_channels: int, stride: int = 1, relu: bool = True) -> ConvStage:
    return ConvStage(ConvSpec(in_channels=in_channels, out_channels=out_channels,
                              kernel=3, stride=stride, padding=1), relu=relu)


def conv1x1(in_channels: int, out_channels: int, relu: bool = True) -> ConvStage:
    return ConvStage(ConvSpec(in_channels=in_channels, out_channels=out_channels,
                              kernel=1, stride=1, padding=0), relu=relu)


class BasicBlock(nn.Module):
    """Two 3x3 conv stages with an identity skip"""

    def __init__(self, channels: int):
        super().__init__()
        self.first = conv3x3(channels, channels)
        self.second = conv3x3(channels, channels, relu=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.second(self.first(x)) + x)


# ===== PRECISION AND SEEDING =====

@contextmanager
def default_precision(dtype: torch.dtype = torch.float64) -> Iterator[None]:
    """Temporarily switch the default dtype (double precision for gradient checks)"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch RNG state without disturbing the caller's"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@contextmanager
def deterministic_algorithms() -> Iterator[None]:
    """Deterministic torch kernels inside the block; the caller's setting is restored on exit"""
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)
