"""The Siamese network: pillar encoder, FGN and correlation head.

Both branches share the same weights. The head turns the raw
cross-correlation into logits with a learnable scale and bias, so the
loss can push scores below zero while the raw correlation stays
non-negative.

Parameters are stored in a flat dict of named arrays:
    encoder.weight, encoder.bias
    fgn.<i>.weight, fgn.<i>.bias
    head.scale, head.bias
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from ..exceptions import BackwardError, ConfigError
from ..pillars import (EncoderCache, EncoderParams, PillarConfig, PillarSet, encode_pillars_backward,
                       encode_pillars_forward, region_pillars, validate_encoder)
from ..types import PointCloud, Region2D
from .correlation import cross_correlate, cross_correlate_backward
from .layers import Array, ConvLayer, FgnCache, FgnParams, fgn_backward, fgn_forward_cached
from .resize import bicubic_resize, bicubic_resize_backward


@dataclass(frozen=True)
class ModelConfig:
    """Network layout and initialisation."""

    fgn_blocks: int = 1
    fgn_layers_per_block: int = 4
    fgn_channels: int = 64
    fgn_first_stride: int = 1
    kernel_size: int = 3
    head_scale: float = 1e-3
    init_seed: int = 0
    dtype: str = 'float32'

    def __post_init__(self) -> None:
        for name in ('fgn_blocks', 'fgn_layers_per_block', 'fgn_channels', 'fgn_first_stride', 'kernel_size'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f'model.{name} must be a positive integer, got {value!r}')
        if self.head_scale <= 0:
            raise ConfigError(f'model.head_scale must be positive, got {self.head_scale}')
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f'model.dtype must be float32 or float64, got {self.dtype!r}')


class BranchCache(NamedTuple):
    """Everything needed to backpropagate through one branch."""

    encoder: EncoderCache
    image_dims: tuple[int, int]
    resized: bool
    fgn: FgnCache


class PairTape(NamedTuple):
    target: BranchCache
    search: BranchCache
    target_features: Array
    search_features: Array
    correlation: Array


class SiameseModel:
    """Shared weight feature extractor with a correlation head."""

    def __init__(self, params: dict[str, Array], pillar_config: PillarConfig, config: ModelConfig) -> None:
        self.params = params
        self.pillar_config = pillar_config
        self.config = config
        self._tape: PairTape | None = None
        self._check_params()

    @classmethod
    def initialize(cls, pillar_config: PillarConfig, config: ModelConfig, seed: int | None = None) -> SiameseModel:
        """Create a model with random weights."""
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        dtype = np.dtype(config.dtype)
        channels = pillar_config.feature_channels

        params: dict[str, Array] = {
            'encoder.weight': (rng.standard_normal((9, channels)) * np.sqrt(2.0 / 9)).astype(dtype),
            'encoder.bias': np.zeros(channels, dtype=dtype),
        }
        fgn = FgnParams.initialize(channels, config.fgn_blocks, config.fgn_layers_per_block, config.fgn_channels,
                                   config.fgn_first_stride, config.kernel_size, rng, dtype)
        for i, layer in enumerate(fgn.layers):
            params[f'fgn.{i}.weight'] = layer.weight
            params[f'fgn.{i}.bias'] = layer.bias
        params['head.scale'] = np.array([config.head_scale], dtype=dtype)
        params['head.bias'] = np.zeros(1, dtype=dtype)
        return cls(params, pillar_config, config)

    @property
    def layer_count(self) -> int:
        return self.config.fgn_blocks * self.config.fgn_layers_per_block

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def parameter_names(self) -> list[str]:
        names = ['encoder.weight', 'encoder.bias']
        for i in range(self.layer_count):
            names += [f'fgn.{i}.weight', f'fgn.{i}.bias']
        return names + ['head.scale', 'head.bias']

    def _check_params(self) -> None:
        expected = set(self.parameter_names())
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            unknown = sorted(set(self.params) - expected)
            raise ConfigError(f'model parameters do not match the layout (missing: {missing}, unknown: {unknown})')
        validate_encoder(self.encoder)
        if self.fgn.in_channels != self.encoder.weight.shape[1]:
            raise ConfigError(f'FGN expects {self.fgn.in_channels} input channels but the encoder '
                              f'produces {self.encoder.weight.shape[1]}')

    @property
    def encoder(self) -> EncoderParams:
        return EncoderParams(self.params['encoder.weight'], self.params['encoder.bias'])

    @property
    def fgn(self) -> FgnParams:
        strides = FgnParams.strides(self.config.fgn_blocks, self.config.fgn_layers_per_block,
                                    self.config.fgn_first_stride)
        layers = [ConvLayer(self.params[f'fgn.{i}.weight'], self.params[f'fgn.{i}.bias'], stride)
                  for i, stride in enumerate(strides)]
        return FgnParams(self.config.fgn_blocks, self.config.fgn_layers_per_block, self.config.fgn_channels,
                         self.config.fgn_first_stride, layers)

    def embed_cached(self, cloud: PointCloud, region: Region2D, interp_size: int = 0,
                     pillars: PillarSet | None = None) -> tuple[Array, BranchCache]:
        """Extract the features of a region and keep the branch cache.

        `pillars` may be passed if the region was already voxelized.
        """
        if pillars is None:
            pillars = region_pillars(cloud, region, self.pillar_config)
        image, encoder_cache = encode_pillars_forward(pillars, self.encoder)
        values = image.values
        image_dims = (image.height, image.width)
        resized = interp_size > 0
        if resized:
            values = bicubic_resize(values, (interp_size, interp_size))
        features, fgn_cache = fgn_forward_cached(values, self.fgn)
        return features, BranchCache(encoder_cache, image_dims, resized, fgn_cache)

    def embed(self, cloud: PointCloud, region: Region2D, interp_size: int = 0,
              pillars: PillarSet | None = None) -> Array:
        """Extract the features of a region.

        The region is voxelized in its own frame and encoded, optionally
        resized to `interp_size` x `interp_size`, then passed through the
        FGN.
        """
        return self.embed_cached(cloud, region, interp_size, pillars)[0]

    def correlate(self, search_features: Array, target_features: Array) -> Array:
        """Get the raw, non-negative correlation map."""
        return cross_correlate(search_features, target_features)

    def head(self, correlation: Array) -> Array:
        """Convert the raw correlation into logits."""
        return self.params['head.scale'][0] * correlation + self.params['head.bias'][0]

    def forward_pair(self, target_cloud: PointCloud, target_region: Region2D,
                     search_cloud: PointCloud, search_region: Region2D,
                     target_interp: int = 0, search_interp: int = 0) -> Array:
        """Predict the logit map for a target/search pair and record a tape."""
        target_features, target_cache = self.embed_cached(target_cloud, target_region, target_interp)
        search_features, search_cache = self.embed_cached(search_cloud, search_region, search_interp)
        correlation = self.correlate(search_features, target_features)
        self._tape = PairTape(target_cache, search_cache, target_features, search_features, correlation)
        return self.head(correlation)

    def _branch_backward(self, grad: Array, cache: BranchCache, grads: dict[str, Array]) -> None:
        grad_image, layer_grads = fgn_backward(grad, cache.fgn, self.fgn)
        for i, (grad_weight, grad_bias) in enumerate(layer_grads):
            grads[f'fgn.{i}.weight'] += grad_weight
            grads[f'fgn.{i}.bias'] += grad_bias
        if cache.resized:
            grad_image = bicubic_resize_backward(grad_image, cache.image_dims)
        grad_encoder = encode_pillars_backward(grad_image, cache.encoder)
        grads['encoder.weight'] += grad_encoder.weight
        grads['encoder.bias'] += grad_encoder.bias

    def backward(self, grad_logits: Array) -> dict[str, Array]:
        """Get the gradient of every parameter from the logit gradient.

        Raises:
            BackwardError: If `forward_pair` has not been run since the
                last backward pass.
        """
        if self._tape is None:
            raise BackwardError('backward called before forward_pair')
        tape, self._tape = self._tape, None

        grads = {name: np.zeros_like(param) for name, param in self.params.items()}
        grads['head.scale'][0] = np.sum(grad_logits * tape.correlation)
        grads['head.bias'][0] = np.sum(grad_logits)

        grad_correlation = grad_logits * self.params['head.scale'][0]
        grad_search, grad_target = cross_correlate_backward(grad_correlation, tape.search_features,
                                                            tape.target_features)
        self._branch_backward(grad_target, tape.target, grads)
        self._branch_backward(grad_search, tape.search, grads)
        return grads

    def copy(self) -> SiameseModel:
        return type(self)({name: param.copy() for name, param in self.params.items()},
                          self.pillar_config, self.config)
