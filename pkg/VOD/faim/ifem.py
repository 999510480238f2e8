# -*- encoding: utf-8 -*-
from dataclasses import dataclass

from .numerics import Parameters, Tensor, conv2d


@dataclass
class InstanceFeatureMap():
    tensor: Tensor
    source_level: str


def init_ifem(params: Parameters, channels: int, out_channels: int) -> None:
    params.init_conv('ifem.conv', channels, out_channels, 3)


def extract(v_r: Tensor, params: Parameters, source_level: str = 'P5') -> InstanceFeatureMap:
    """Single 3x3 conv, padding 1, no activation. v_r is [C,H,W] or [N,C,H,W]."""
    out = conv2d(v_r, params['ifem.conv.weight'], params['ifem.conv.bias'], padding=1,
                 label='conv.ifem')
    return InstanceFeatureMap(tensor=out, source_level=source_level)
