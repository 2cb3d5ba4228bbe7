"""VGG16-topology feature extractor and perceptual loss.

Thirteen 3x3 conv layers with the canonical VGG16 names, ReLU after each and
2x2 average pooling between stages. Channel widths are the VGG16 widths
divided by ``width_divisor`` (8 by default; 1 restores the canonical shapes
for importing real weights). Borders are replicate-padded so a constant image
yields spatially constant feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError

VGG16_LAYERS = (
    ("conv1_1", 64), ("conv1_2", 64),
    ("conv2_1", 128), ("conv2_2", 128),
    ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256),
    ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512),
    ("conv5_1", 512), ("conv5_2", 512), ("conv5_3", 512),
)
LAYER_NAMES = tuple(name for name, _ in VGG16_LAYERS)


class UnknownLayerError(DataError):
    def __init__(self, name):
        super().__init__(f"unknown layer {name!r}; valid names: {', '.join(LAYER_NAMES)}")


@dataclass(frozen=True)
class LayerSet:
    names: tuple[str, ...]
    hypercolumn: bool = False

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise DataError("layer set is empty")
        for n in names:
            if n not in LAYER_NAMES:
                raise UnknownLayerError(n)
        object.__setattr__(self, "names", names)

    def __str__(self):
        return "+".join(self.names) + (" (hypercolumn)" if self.hypercolumn else "")


# experiment id -> (latent space, layer set)
EXPERIMENTS = {
    1: ("Z", LayerSet(("conv4_3", "conv5_3"))),
    2: ("Z", LayerSet(("conv3_2", "conv4_2", "conv5_2"))),
    3: ("Z", LayerSet(("conv3_2", "conv4_2", "conv5_2"), hypercolumn=True)),
    4: ("W", LayerSet(("conv4_3", "conv5_3"))),
    5: ("W", LayerSet(("conv3_3", "conv4_3", "conv5_3"))),
    6: ("W", LayerSet(("conv1_2", "conv2_2", "conv3_2", "conv4_3"))),
}


def experiment_layerset(exp_id: int) -> tuple[str, LayerSet]:
    if exp_id not in EXPERIMENTS:
        raise DataError(f"experiment id must be in 1..6, got {exp_id}")
    return EXPERIMENTS[exp_id]


@dataclass(eq=False)
class FeatureExtractorParams:
    tensors: dict[str, Tensor]
    width_divisor: int = 8
    padding: str = "replicate"

    def widths(self) -> dict[str, int]:
        return {name: self.tensors[f"{name}/weight"].shape[0] for name in LAYER_NAMES}


def extractor_init(seed: int = 0, width_divisor: int = 8, zero_bias: bool = True) -> FeatureExtractorParams:
    """He-normal seeded weights; biases zero unless ``zero_bias`` is False."""
    rng = np.random.default_rng([seed, 16])
    tensors = {}
    cin = 3
    for name, width in VGG16_LAYERS:
        cout = max(width // width_divisor, 1)
        std = np.sqrt(2.0 / (cin * 9))
        tensors[f"{name}/weight"] = Tensor(rng.standard_normal((cout, cin, 3, 3)) * std)
        bias = np.zeros(cout) if zero_bias else rng.standard_normal(cout) * 0.01
        tensors[f"{name}/bias"] = Tensor(bias)
        cin = cout
    return FeatureExtractorParams(tensors, width_divisor)


def load_extractor(tensors: Mapping[str, np.ndarray]) -> FeatureExtractorParams:
    """Build an extractor from named arrays (``conv1_1/weight`` ...)."""
    out = {}
    cin = 3
    for name in LAYER_NAMES:
        try:
            w = np.asarray(tensors[f"{name}/weight"], dtype=np.float64)
            b = np.asarray(tensors[f"{name}/bias"], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"extractor weights missing {exc.args[0]}") from None
        if w.ndim != 4 or w.shape[1:] != (cin, 3, 3) or b.shape != (w.shape[0],):
            raise DataError(f"extractor layer {name} has shape {w.shape}/{b.shape}")
        out[f"{name}/weight"] = Tensor(w)
        out[f"{name}/bias"] = Tensor(b)
        cin = w.shape[0]
    divisor = max(512 // out["conv5_3/weight"].shape[0], 1)
    return FeatureExtractorParams(out, divisor)


def _as_image_batch(img) -> Tensor:
    t = img if isinstance(img, Tensor) else Tensor(img)
    if t.ndim == 3:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 3 or t.shape[2] != t.shape[3]:
        raise ShapeError("extract_features (expects square 3-channel images)", t.shape)
    return t


def extract_features(fe: FeatureExtractorParams, img, layers: LayerSet | Iterable[str]) -> dict[str, Tensor]:
    """Post-ReLU feature maps for the requested layers, keyed by name."""
    names = layers.names if isinstance(layers, LayerSet) else tuple(layers)
    for n in names:
        if n not in LAYER_NAMES:
            raise UnknownLayerError(n)
    x = _as_image_batch(img)
    if x.shape[-1] < 8:
        raise ShapeError("extract_features (image side must be >= 8)", x.shape)
    deepest = max(LAYER_NAMES.index(n) for n in names)
    wanted = set(names)
    maps = {}
    stage = "1"
    for name in LAYER_NAMES[:deepest + 1]:
        s = name[4]
        if s != stage:
            stage = s
            if x.shape[-1] >= 2:
                x = ad.average_pool(x, 2)
        w = fe.tensors[f"{name}/weight"]
        b = fe.tensors[f"{name}/bias"]
        x = ad.add(ad.conv2d(x, w, padding=fe.padding), ad.reshape(b, (1, b.shape[0], 1, 1)))
        x = ad.relu(x)
        if name in wanted:
            maps[name] = x
    return {n: maps[n] for n in names}


def hypercolumn(maps: Mapping[str, Tensor], target: tuple[int, int] | None = None) -> Tensor:
    """Resize every map to ``target`` (default: the largest map) and stack channels."""
    maps = list(maps.values())
    if not maps:
        raise DataError("hypercolumn needs at least one feature map")
    if target is None:
        side = max(m.shape[-1] for m in maps)
        target = (side, side)
    return ad.concat([ad.bilinear_resize(m, target) for m in maps], axis=1)


def perceptual_loss(fe: FeatureExtractorParams, generated, real, layers: LayerSet) -> Tensor:
    """Sum over layers of the per-element mean squared feature difference.

    For a batch the per-sample losses are averaged.
    """
    g = _as_image_batch(generated)
    r = _as_image_batch(real)
    if g.shape != r.shape:
        raise ShapeError("perceptual_loss", g.shape, r.shape)
    fg = extract_features(fe, g, layers)
    with ad.no_grad():
        fr = extract_features(fe, r, layers)
    if layers.hypercolumn:
        pairs = [(hypercolumn(fg), hypercolumn(fr))]
    else:
        pairs = [(fg[n], fr[n]) for n in layers.names]
    loss = None
    for a, b in pairs:
        term = ad.mean(ad.square(ad.sub(a, b)))
        loss = term if loss is None else ad.add(loss, term)
    return loss
