"""Text-to-latent multilayer perceptron: 768-d embedding -> 512-d Z or W code."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EMBED_DIM, Embedding
from .errors import DataError, ShapeError

LATENT_DIM = 512
SPACES = ("Z", "W")
LRELU_SLOPE = 0.2
LRELU_GAIN = float(np.sqrt(2.0 / (1.0 + LRELU_SLOPE ** 2)))


@dataclass(frozen=True, eq=False)
class LatentCode:
    """A (batch of) 512-d latent vectors tagged with the space they live in."""

    values: Tensor
    space: str

    def __post_init__(self):
        if self.space not in SPACES:
            raise DataError(f"latent space must be one of {SPACES}, got {self.space!r}")
        if not isinstance(self.values, Tensor):
            object.__setattr__(self, "values", Tensor(self.values))
        if self.values.shape[-1] != LATENT_DIM or self.values.ndim not in (1, 2):
            raise ShapeError("LatentCode", self.values.shape, (LATENT_DIM,))

    def batched(self) -> Tensor:
        v = self.values
        return v if v.ndim == 2 else ad.reshape(v, (1, LATENT_DIM))


def require_space(code: LatentCode, space: str, where: str) -> None:
    if code.space != space:
        raise DataError(f"{where} expects a {space}-space latent, got {code.space}")


@dataclass(eq=False)
class MlpParams:
    """Fully connected layers; leaky ReLU on hidden layers, identity output.

    ``output_multiplier`` is a constant applied to the output weights at run
    time. Values below 1 shrink the optimizer's effective step on that layer.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    target_space: str
    output_multiplier: float = 1.0

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"t2l/fc{i}/weight"] = w
            out[f"t2l/fc{i}/bias"] = b
        return out

    @property
    def hidden(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]


def t2l_init(seed: int, hidden: Sequence[int] = (512, 512, 512), target: str = "W",
             output_gain: float = 1.0, output_bias=None, output_multiplier: float = 1.0) -> MlpParams:
    """Scaled-normal fan-in initialization.

    Hidden activations start near unit RMS for unit-norm input embeddings.

    Args:
        seed: RNG seed.
        hidden: hidden layer widths (at least one).
        target: latent space the output is tagged with.
        output_gain: multiplier on the output layer's initial weights.
        output_bias: initial output bias (512 values); zeros when omitted.
        output_multiplier: run-time multiplier on the output weights. The
            stored weights are divided by it so the initial function does not
            depend on it.
    """
    hidden = list(hidden)
    if not hidden:
        raise ValueError("text-to-latent model needs at least one hidden layer")
    if any(int(h) <= 0 for h in hidden):
        raise ValueError(f"hidden widths must be positive, got {hidden}")
    if target not in SPACES:
        raise ValueError(f"target space must be Z or W, got {target!r}")
    if not output_multiplier > 0:
        raise ValueError(f"output multiplier must be positive, got {output_multiplier}")
    rng = np.random.default_rng([seed, 2])
    widths = [EMBED_DIM] + hidden + [LATENT_DIM]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        gain = output_gain / output_multiplier if last else LRELU_GAIN
        # unit-norm embeddings have per-component RMS 1/sqrt(fan_in)
        std = gain if i == 0 else gain / np.sqrt(fan_in)
        weights.append(Tensor(rng.standard_normal((fan_in, fan_out)) * std, requires_grad=True))
        bias = np.zeros(fan_out)
        if last and output_bias is not None:
            bias = np.array(output_bias, dtype=np.float64).reshape(fan_out)
        biases.append(Tensor(bias, requires_grad=True))
    return MlpParams(weights, biases, target, output_multiplier)


def _as_batch(e) -> Tensor:
    if isinstance(e, Embedding):
        e = e.values
    if isinstance(e, Tensor):
        t = e
    else:
        t = Tensor(np.asarray(e, dtype=np.float64))
    if t.ndim == 1:
        t = ad.reshape(t, (1, t.shape[0]))
    if t.ndim != 2 or t.shape[1] != EMBED_DIM:
        raise ShapeError("t2l_forward", t.shape, (EMBED_DIM,))
    return t


def t2l_forward(params: MlpParams, e) -> LatentCode:
    """Map embeddings of shape (768,) or (N, 768) to a (N, 512) latent code."""
    h = _as_batch(e)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == last and params.output_multiplier != 1.0:
            w = ad.scale(w, params.output_multiplier)
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.leaky_relu(h, LRELU_SLOPE)
    return LatentCode(h, params.target_space)
