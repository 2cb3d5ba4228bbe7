"""Frozen miniature style-based generator with weight demodulation.

Mapping network: pixel norm, then fully connected 512->512 layers with leaky
ReLU. Synthesis network: a learned 4x4 constant followed by one block per
resolution (two modulated 3x3 convolutions each, nearest-neighbour x2
upsampling between blocks) and a toRGB skip branch summed across blocks. The
summed RGB is squashed into [-1, 1] with a scaled tanh. No noise inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError
from .text2latent import LATENT_DIM, LRELU_GAIN, LRELU_SLOPE, LatentCode, require_space

RESOLUTIONS = (8, 16, 32, 64)
DEMOD_EPS = 1e-8


@dataclass(eq=False)
class GeneratorParams:
    resolution: int
    channels: list[int]
    mapping_layers: int
    tensors: dict[str, Tensor]
    rgb_gain: float = 0.5

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def block_channels(resolution: int, base: int = 64, floor: int = 16) -> list[int]:
    n = int(np.log2(resolution)) - 1
    return [max(base >> i, floor) for i in range(n)]


def gen_init(seed: int, resolution: int, base_channels: int = 64, min_channels: int = 16,
             mapping_layers: int = 8) -> GeneratorParams:
    """Seeded frozen generator (stands in for pretrained weights)."""
    if resolution not in RESOLUTIONS:
        raise DataError(f"unsupported resolution {resolution}; choose one of {RESOLUTIONS}")
    rng = np.random.default_rng([seed, 1])
    t: dict[str, Tensor] = {}
    for i in range(mapping_layers):
        t[f"mapping/fc{i}/weight"] = Tensor(rng.standard_normal((LATENT_DIM, LATENT_DIM)) / np.sqrt(LATENT_DIM))
        t[f"mapping/fc{i}/bias"] = Tensor(np.zeros(LATENT_DIM))
    channels = block_channels(resolution, base_channels, min_channels)
    t["synthesis/const"] = Tensor(rng.standard_normal((1, channels[0], 4, 4)))

    def modconv(prefix, cin, cout, k, weight_gain):
        t[f"{prefix}/affine/weight"] = Tensor(rng.standard_normal((LATENT_DIM, cin)) / np.sqrt(LATENT_DIM))
        t[f"{prefix}/affine/bias"] = Tensor(np.ones(cin))
        t[f"{prefix}/weight"] = Tensor(rng.standard_normal((cout, cin, k, k)) * weight_gain)
        t[f"{prefix}/bias"] = Tensor(rng.standard_normal(cout) * 0.1)

    cin = channels[0]
    for b, cout in enumerate(channels):
        res = 4 << b
        modconv(f"synthesis/b{res}/conv0", cin, cout, 3, 1.0)
        modconv(f"synthesis/b{res}/conv1", cout, cout, 3, 1.0)
        modconv(f"synthesis/b{res}/torgb", cout, 3, 1, 1.0 / np.sqrt(cout))
        cin = cout
    return GeneratorParams(resolution, channels, mapping_layers, t)


def demodulated_weights(weight, style, demodulate: bool = True, eps: float = DEMOD_EPS) -> Tensor:
    """Per-sample kernels s_j * w_ijk, optionally rescaled to unit norm per output channel.

    Args:
        weight: (O, I, k, k) base kernel.
        style: (N, I) per-input-channel scales.

    Returns:
        (N, O, I, k, k) kernels.
    """
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    style = style if isinstance(style, Tensor) else Tensor(style)
    if style.ndim == 1:
        style = ad.reshape(style, (1, style.shape[0]))
    if style.shape[-1] == 0:
        raise DataError("modulated_conv: style vector is empty")
    if style.shape[-1] != weight.shape[1]:
        raise ShapeError("modulated_conv", weight.shape, style.shape)
    n, cin = style.shape
    w = ad.multiply(ad.reshape(weight, (1,) + weight.shape), ad.reshape(style, (n, 1, cin, 1, 1)))
    if demodulate:
        norm = ad.sqrt_elementwise(ad.add(ad.sum(ad.square(w), axis=(2, 3, 4), keepdims=True), eps), eps)
        w = ad.divide(w, norm)
    return w


def modulated_conv(weight, style, x, demodulate: bool = True, eps: float = DEMOD_EPS) -> Tensor:
    return ad.conv2d(x, demodulated_weights(weight, style, demodulate, eps))


def mapping_forward(g: GeneratorParams, z: LatentCode) -> LatentCode:
    require_space(z, "Z", "mapping_forward")
    h = ad.pixel_norm(z.batched(), axis=-1)
    for i in range(g.mapping_layers):
        h = ad.add(ad.matmul(h, g[f"mapping/fc{i}/weight"]), g[f"mapping/fc{i}/bias"])
        h = ad.scale(ad.leaky_relu(h, LRELU_SLOPE), LRELU_GAIN)
    return LatentCode(h, "W")


def _layer(g, prefix, w, x, demodulate=True):
    style = ad.add(ad.matmul(w, g[f"{prefix}/affine/weight"]), g[f"{prefix}/affine/bias"])
    out = modulated_conv(g[f"{prefix}/weight"], style, x, demodulate)
    bias = g[f"{prefix}/bias"]
    return ad.add(out, ad.reshape(bias, (1, bias.shape[0], 1, 1)))


def synthesize(g: GeneratorParams, w: LatentCode) -> Tensor:
    """Render a batch of (N, 3, R, R) images in [-1, 1] from W-space codes."""
    require_space(w, "W", "synthesize")
    wb = w.batched()
    n = wb.shape[0]
    const = g["synthesis/const"]
    x = ad.multiply(const, Tensor(np.ones((n, 1, 1, 1))))
    rgb = None
    for b in range(g.num_blocks):
        res = 4 << b
        if b > 0:
            x = ad.nearest_upsample(x)
        for conv in ("conv0", "conv1"):
            x = _layer(g, f"synthesis/b{res}/{conv}", wb, x)
            x = ad.scale(ad.leaky_relu(x, LRELU_SLOPE), LRELU_GAIN)
        y = _layer(g, f"synthesis/b{res}/torgb", wb, x, demodulate=False)
        rgb = y if rgb is None else ad.add(ad.nearest_upsample(rgb), y)
    return ad.tanh(ad.scale(rgb, g.rgb_gain))


def generate(g: GeneratorParams, latent: LatentCode) -> Tensor:
    """Z codes go through the mapping network first; W codes are used directly."""
    if latent.space == "Z":
        latent = mapping_forward(g, latent)
    return synthesize(g, latent)
