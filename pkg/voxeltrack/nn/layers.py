"""Convolution layers and the Feature Generation Network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigError, ShapeError


Array = npt.NDArray[np.floating]


class ConvLayer(NamedTuple):
    """Weights of one 2D convolution, (O, C, k, k) and (O,)."""

    weight: Array
    bias: Array
    stride: int = 1


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Get the output length of a valid convolution.

    >>> conv_output_size(8, 3, 1)
    6
    >>> conv_output_size(8, 3, 2)
    3
    """
    return (size - kernel) // stride + 1


def _windows(x: Array, kernel: tuple[int, int], stride: int) -> Array:
    """Get a (C, Ho, Wo, kh, kw) view of every kernel position."""
    return sliding_window_view(x, kernel, axis=(1, 2))[:, ::stride, ::stride]


def _check_conv(x: Array, weight: Array, bias: Array, stride: int) -> None:
    if x.ndim != 3:
        raise ShapeError(f'convolution input must be (C, H, W), got shape {x.shape}')
    if weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f'kernel {weight.shape} does not match input with {x.shape[0]} channels')
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f'bias {bias.shape} does not match kernel {weight.shape}')
    if x.shape[1] < weight.shape[2] or x.shape[2] < weight.shape[3]:
        raise ShapeError(f'input of {x.shape[1]}x{x.shape[2]} is smaller than the '
                         f'{weight.shape[2]}x{weight.shape[3]} kernel')
    if stride < 1:
        raise ShapeError(f'stride must be at least 1, got {stride}')


def conv2d(x: Array, weight: Array, bias: Array, stride: int = 1) -> Array:
    """Valid cross-correlation of each kernel over the input, plus bias."""
    _check_conv(x, weight, bias, stride)
    windows = _windows(x, weight.shape[2:], stride)
    return np.einsum('chwij,ocij->ohw', windows, weight, optimize=True) + bias[:, None, None]


def conv2d_backward(grad: Array, x: Array, weight: Array, stride: int = 1) -> tuple[Array, Array, Array]:
    """Get the gradients of `conv2d` for the input, weight and bias."""
    kh, kw = weight.shape[2:]
    out_h, out_w = grad.shape[1:]
    windows = _windows(x, (kh, kw), stride)
    grad_weight = np.einsum('ohw,chwij->ocij', grad, windows, optimize=True)
    grad_bias = grad.sum(axis=(1, 2))

    grad_input = np.zeros_like(x, dtype=np.result_type(x, grad))
    for i in range(kh):
        for j in range(kw):
            grad_input[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += (
                np.einsum('ohw,oc->chw', grad, weight[:, :, i, j]))
    return grad_input, grad_weight, grad_bias


def relu(x: Array) -> Array:
    return np.maximum(x, 0)


def relu_backward(grad: Array, output: Array) -> Array:
    return grad * (output > 0)


@dataclass
class FgnParams:
    """Convolutional blocks used as the Feature Generation Network.

    The first layer of the first block uses `first_stride`, and the first
    layer of every later block downsamples with stride 2. Every layer is
    followed by a ReLU.
    """

    blocks: int
    layers_per_block: int
    channels: int
    first_stride: int
    layers: list[ConvLayer]

    def __post_init__(self) -> None:
        for name in ('blocks', 'layers_per_block', 'channels', 'first_stride'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f'fgn.{name} must be a positive integer, got {value!r}')
        if len(self.layers) != self.blocks * self.layers_per_block:
            raise ConfigError(f'expected {self.blocks * self.layers_per_block} FGN layers, got {len(self.layers)}')
        for i, (layer, stride) in enumerate(zip(self.layers, self.strides(self.blocks, self.layers_per_block,
                                                                          self.first_stride))):
            if layer.stride != stride:
                raise ConfigError(f'FGN layer {i} must have stride {stride}, got {layer.stride}')
            if layer.weight.shape[0] != self.channels or layer.bias.shape != (self.channels,):
                raise ConfigError(f'FGN layer {i} must output {self.channels} channels, got {layer.weight.shape}')
            if i and layer.weight.shape[1] != self.channels:
                raise ConfigError(f'FGN layer {i} input channels {layer.weight.shape[1]} do not match '
                                  f'the previous layer ({self.channels})')

    @staticmethod
    def strides(blocks: int, layers_per_block: int, first_stride: int) -> list[int]:
        """Get the stride of every layer.

        >>> FgnParams.strides(2, 2, 1)
        [1, 1, 2, 1]
        """
        result = []
        for block in range(blocks):
            for layer in range(layers_per_block):
                if layer:
                    result.append(1)
                else:
                    result.append(first_stride if block == 0 else 2)
        return result

    @classmethod
    def initialize(cls, in_channels: int, blocks: int = 1, layers_per_block: int = 4, channels: int = 64,
                   first_stride: int = 1, kernel: int = 3, rng: np.random.Generator | None = None,
                   dtype: npt.DTypeLike = np.float64) -> FgnParams:
        """Create randomly initialised layers (He normal, zero bias)."""
        if rng is None:
            rng = np.random.default_rng()
        layers = []
        previous = in_channels
        for stride in cls.strides(blocks, layers_per_block, first_stride):
            scale = np.sqrt(2.0 / (previous * kernel * kernel))
            weight = (rng.standard_normal((channels, previous, kernel, kernel)) * scale).astype(dtype)
            layers.append(ConvLayer(weight, np.zeros(channels, dtype=dtype), stride))
            previous = channels
        return cls(blocks, layers_per_block, channels, first_stride, layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].weight.shape[1]

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        """Get the feature map size for an input size.

        Raises:
            ShapeError: If the input is smaller than the receptive field.
        """
        h, w = height, width
        for i, layer in enumerate(self.layers):
            kh, kw = layer.weight.shape[2:]
            if h < kh or w < kw:
                raise ShapeError(f'input of {height}x{width} is too small for the FGN: layer {i} receives '
                                 f'{h}x{w} but its kernel is {kh}x{kw}')
            h = conv_output_size(h, kh, layer.stride)
            w = conv_output_size(w, kw, layer.stride)
        return h, w


class FgnCache(NamedTuple):
    """The input and output of every layer."""

    inputs: list[Array]
    outputs: list[Array]


def fgn_forward_cached(x: Array, params: FgnParams) -> tuple[Array, FgnCache]:
    """Run the network and keep the activations for `fgn_backward`."""
    if x.ndim != 3 or x.shape[0] != params.in_channels:
        raise ShapeError(f'FGN expects {params.in_channels} input channels, got shape {x.shape}')
    params.output_size(x.shape[1], x.shape[2])

    cache = FgnCache([], [])
    for layer in params.layers:
        cache.inputs.append(x)
        x = relu(conv2d(x, layer.weight, layer.bias, layer.stride))
        cache.outputs.append(x)
    return x, cache


def fgn_forward(x: Array, params: FgnParams) -> Array:
    """Run the convolution + ReLU layers and return the final feature map.

    Raises:
        ShapeError: If the channels do not match or the input is smaller
            than the receptive field.
    """
    return fgn_forward_cached(x, params)[0]


def fgn_backward(grad: Array, cache: FgnCache, params: FgnParams) -> tuple[Array, list[tuple[Array, Array]]]:
    """Backpropagate through the network.

    Returns:
        The gradient for the network input, and the (weight, bias)
        gradients of every layer in order.
    """
    layer_grads: list[tuple[Array, Array]] = []
    for layer, x, output in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.outputs)):
        grad = relu_backward(grad, output)
        grad, grad_weight, grad_bias = conv2d_backward(grad, x, layer.weight, layer.stride)
        layer_grads.append((grad_weight, grad_bias))
    layer_grads.reverse()
    return grad, layer_grads
