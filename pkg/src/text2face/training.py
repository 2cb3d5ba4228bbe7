"""Training loop, checkpoints, evaluation and the six-experiment matrix.

Only the text-to-latent model is trained. The generator and the feature
extractor are frozen; their parameter digests are checked before and after
every run.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import array_to_text, read_container, tensor_digest, text_to_array, write_container
from .data import Dataset
from .encoder import TextEncoder, default_encoder
from .errors import DataError, NumericError
from .generator import GeneratorParams, gen_init, generate, mapping_forward
from .metrics import face_features, fid, format_report, fsd, fss
from .perceptual import (FeatureExtractorParams, LayerSet, extractor_init, experiment_layerset,
                         perceptual_loss)
from .text2latent import LATENT_DIM, LatentCode, MlpParams, t2l_forward, t2l_init

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    experiment: int | None = 5
    space: str | None = None
    layers: tuple[str, ...] | None = None
    hypercolumn: bool = False
    epochs: int = 500
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    resolution: int = 16
    generator_seed: int = 0
    extractor_seed: int = 0
    encoder_seed: int = 0
    width_divisor: int = 8
    hidden: tuple[int, ...] = (512, 512, 512)
    checkpoint_every: int = 50
    latent_penalty: float = 0.0
    output_gain: float = 0.1
    output_multiplier: float = 0.1
    init_mean_latent: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise DataError("batch_size and checkpoint_every must be positive")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.adam_eps <= 0:
            raise DataError("invalid optimizer hyperparameters")
        if not self.output_multiplier > 0:
            raise DataError("output_multiplier must be positive")
        if self.experiment is None and (self.space is None or not self.layers):
            raise DataError("config needs an experiment id or an explicit space and layer list")
        self.layerset()

    def layerset(self) -> tuple[str, LayerSet]:
        """Latent space and layer set, from the experiment id unless overridden."""
        space, layers = experiment_layerset(self.experiment) if self.experiment is not None else (None, None)
        if self.space is not None:
            space = self.space
        if self.layers:
            layers = LayerSet(tuple(self.layers), self.hypercolumn)
        if space not in ("Z", "W"):
            raise DataError(f"latent space must be Z or W, got {space!r}")
        return space, layers

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = ""
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse flat ``key=value`` lines; unknown keys are errors."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"config line {lineno}: expected key=value")
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in known:
                raise DataError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _convert(key, raw)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, **overrides)


_INT_KEYS = {"epochs", "batch_size", "seed", "resolution", "generator_seed", "extractor_seed",
             "encoder_seed", "width_divisor", "checkpoint_every"}
_FLOAT_KEYS = {"lr", "beta1", "beta2", "adam_eps", "latent_penalty", "output_gain", "output_multiplier"}


def _convert(key: str, raw: str):
    try:
        if key == "experiment":
            return int(raw) if raw else None
        if key == "space":
            return raw.upper() or None
        if key == "layers":
            return tuple(x.strip() for x in raw.split(",") if x.strip()) or None
        if key == "hidden":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if key in ("hypercolumn", "init_mean_latent"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse value {raw!r}") from None
    return raw


class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(eq=False)
class Checkpoint:
    params: MlpParams
    config: TrainConfig
    epoch: int = 0
    history: list[float] = field(default_factory=list)
    frozen: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"meta/config": text_to_array(self.config.to_text()),
               "meta/space": text_to_array(self.params.target_space),
               "meta/epoch": np.array(float(self.epoch)),
               "meta/history": np.array(self.history, dtype=np.float64)}
        out.update({k: v.data for k, v in self.params.named_parameters().items()})
        out.update(self.frozen)
        return out

    def save(self, path: str | os.PathLike) -> None:
        write_container(path, self.tensors())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        t = read_container(path)
        try:
            config = TrainConfig.from_text(array_to_text(t["meta/config"]))
            space = array_to_text(t["meta/space"])
            epoch = int(t["meta/epoch"])
            history = [float(x) for x in t["meta/history"]]
        except KeyError as exc:
            raise DataError(f"checkpoint {path} lacks entry {exc.args[0]}") from None
        weights, biases = [], []
        i = 0
        while f"t2l/fc{i}/weight" in t:
            weights.append(ad.Tensor(t[f"t2l/fc{i}/weight"], requires_grad=True))
            biases.append(ad.Tensor(t[f"t2l/fc{i}/bias"], requires_grad=True))
            i += 1
        if not weights:
            raise DataError(f"checkpoint {path} has no text-to-latent weights")
        frozen = {k: v for k, v in t.items() if k.startswith(("generator/", "extractor/"))}
        return cls(MlpParams(weights, biases, space, config.output_multiplier), config, epoch, history, frozen)

    def generator(self) -> GeneratorParams:
        g = gen_init(self.config.generator_seed, self.config.resolution)
        imported = {k[len("generator/"):]: v for k, v in self.frozen.items() if k.startswith("generator/")}
        return import_tensors(g, imported, "generator") if imported else g

    def extractor(self) -> FeatureExtractorParams:
        fe = extractor_init(self.config.extractor_seed, self.config.width_divisor)
        imported = {k[len("extractor/"):]: v for k, v in self.frozen.items() if k.startswith("extractor/")}
        return import_tensors(fe, imported, "extractor") if imported else fe


def import_tensors(module, arrays: dict[str, np.ndarray], what: str):
    """Overwrite a frozen module's tensors with externally supplied arrays of the same shapes."""
    for name, t in module.tensors.items():
        if name not in arrays:
            raise DataError(f"{what} weights lack {name!r}")
        if arrays[name].shape != t.shape:
            raise DataError(f"{what} weight {name!r} has shape {arrays[name].shape}, expected {t.shape}")
    for name in module.tensors:
        module.tensors[name] = ad.Tensor(arrays[name])
    return module


def export_tensors(module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.data for k, v in module.tensors.items()}


@dataclass(eq=False)
class TrainResult:
    checkpoint: Checkpoint
    history: list[float]
    generator_digest: tuple[str, str]
    extractor_digest: tuple[str, str]


def embed_dataset(data: Dataset, encoder: TextEncoder) -> np.ndarray:
    rows = []
    for r in data.records:
        e = data.embedding_for(r)
        rows.append(e.values if e is not None else encoder.encode(r.caption).values)
    return np.stack(rows)


def _mean_w(g: GeneratorParams, seed: int, n: int = 1024) -> np.ndarray:
    z = np.random.default_rng([seed, 99]).standard_normal((n, LATENT_DIM))
    with ad.no_grad():
        return mapping_forward(g, LatentCode(ad.Tensor(z), "Z")).values.data.mean(axis=0)


def init_model(config: TrainConfig, g: GeneratorParams) -> MlpParams:
    """Seeded starting point of a run.

    W-space models start with their output bias at the generator's average w,
    so the first images are the average face rather than off-manifold codes.
    The output layer uses a run-time weight multiplier, which damps the late
    loss spikes that constant-rate Adam otherwise produces on that layer.
    """
    space, _ = config.layerset()
    bias = _mean_w(g, config.seed) if space == "W" and config.init_mean_latent else None
    return t2l_init(config.seed, config.hidden, space, config.output_gain, bias, config.output_multiplier)


def train(config: TrainConfig, data: Dataset, out: str | os.PathLike | None = None,
          generator: GeneratorParams | None = None, extractor: FeatureExtractorParams | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit the text-to-latent model to a dataset with the perceptual loss.

    Every ``checkpoint_every`` epochs, and after the last epoch, the checkpoint
    is written to ``out`` (when given), with the per-epoch loss history as
    CSV beside it.
    """
    space, layers = config.layerset()
    g = generator or gen_init(config.generator_seed, config.resolution)
    fe = extractor or extractor_init(config.extractor_seed, config.width_divisor)
    if data.resolution != g.resolution:
        raise DataError(f"dataset images are {data.resolution}px but the generator renders {g.resolution}px")
    g_before, fe_before = tensor_digest(g.tensors), tensor_digest(fe.tensors)

    encoder = default_encoder(config.encoder_seed)
    embeddings = embed_dataset(data, encoder)
    params = init_model(config, g)
    opt = Adam(params.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 3])
    anchor = None
    if config.latent_penalty > 0:
        anchor = ad.Tensor(_mean_w(g, config.seed) if space == "W" else np.zeros(LATENT_DIM))

    ckpt = Checkpoint(params, config)
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            latent = t2l_forward(params, embeddings[idx])
            img = generate(g, latent)
            loss = perceptual_loss(fe, img, ad.Tensor(data.images[idx]), layers)
            if anchor is not None:
                penalty = ad.mean(ad.square(ad.sub(latent.values, anchor)))
                loss = ad.add(loss, ad.scale(penalty, config.latent_penalty))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
        mean_loss = total / n
        ckpt.history.append(mean_loss)
        ckpt.epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        log.debug("epoch %d loss %.6f", epoch, mean_loss)
        if out is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            ckpt.save(out)
            write_history(history_path(out), ckpt.history)

    g_after, fe_after = tensor_digest(g.tensors), tensor_digest(fe.tensors)
    if (g_before, fe_before) != (g_after, fe_after):
        raise NumericError("frozen generator or extractor weights changed during training")
    return TrainResult(ckpt, list(ckpt.history), (g_before, g_after), (fe_before, fe_after))


def history_path(ckpt_path: str | os.PathLike) -> Path:
    """The loss-history CSV written beside a checkpoint."""
    p = Path(ckpt_path)
    return p.with_name(p.name + ".history.csv")


def write_history(path: str | os.PathLike, history: list[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(history, 1):
            fh.write(f"{i},{v!r}\n")


def untrained_checkpoint(config: TrainConfig, g: GeneratorParams | None = None) -> Checkpoint:
    """The epoch-0 state of a run: what ``train`` starts from."""
    g = g or gen_init(config.generator_seed, config.resolution)
    return Checkpoint(init_model(config, g), config)


def generate_images(ckpt: Checkpoint, captions_or_embeddings, g: GeneratorParams | None = None,
                    batch: int = 64) -> np.ndarray:
    g = g or ckpt.generator()
    if isinstance(captions_or_embeddings, np.ndarray):
        emb = captions_or_embeddings
    else:
        encoder = default_encoder(ckpt.config.encoder_seed)
        emb = encoder.encode_batch(list(captions_or_embeddings))
    out = []
    with ad.no_grad():
        for s in range(0, len(emb), batch):
            out.append(generate(g, t2l_forward(ckpt.params, emb[s:s + batch])).data)
    return np.concatenate(out)


def image_metrics(generated: np.ndarray, real: np.ndarray, fe: FeatureExtractorParams) -> dict[str, float]:
    """FSD, FSS (percent) and FID between paired generated/real image batches."""
    fg = face_features(generated, fe)
    fr = face_features(real, fe)
    pairs = list(zip(fg, fr))
    out = {"fsd": fsd(pairs), "fss": 100.0 * fss(pairs)}
    out["fid"] = fid(fr, fg) if len(fg) >= 2 else float("nan")
    out["n"] = len(fg)
    out["d"] = fg.shape[1]
    return out


@dataclass(eq=False)
class EvalReport:
    metrics: dict
    config: TrainConfig

    def entries(self) -> list[tuple[str, object]]:
        space, layers = self.config.layerset()
        return [
            ("experiment", "" if self.config.experiment is None else f"{self.config.experiment:02d}"),
            ("space", space),
            ("layers", ",".join(layers.names)),
            ("hypercolumn", str(layers.hypercolumn).lower()),
            ("fsd", float(self.metrics["fsd"])),
            ("fss_percent", float(self.metrics["fss"])),
            ("fid", float(self.metrics["fid"])),
            ("n", int(self.metrics["n"])),
            ("d", int(self.metrics["d"])),
        ]

    def text(self) -> str:
        return format_report(self.entries())


def evaluate(ckpt: Checkpoint, data: Dataset, generator: GeneratorParams | None = None,
             extractor: FeatureExtractorParams | None = None, self_check: bool = False) -> EvalReport:
    """Generate one image per caption and compare it with the dataset image.

    With ``self_check`` the generated images are compared against themselves,
    which must give FID 0, FSD 0 and FSS 100%.
    """
    if len(data) == 0:
        raise DataError("evaluation data is empty")
    g = generator or ckpt.generator()
    fe = extractor or ckpt.extractor()
    if g.resolution != data.resolution:
        raise DataError(f"checkpoint generator renders {g.resolution}px, data has {data.resolution}px")
    emb = embed_dataset(data, default_encoder(ckpt.config.encoder_seed))
    generated = generate_images(ckpt, emb, g)
    real = generated if self_check else data.images
    return EvalReport(image_metrics(generated, real, fe), ckpt.config)


REPORT_COLUMNS = ("experiment", "space", "layers", "hypercolumn", "final_loss", "fsd", "fss_percent", "fid")


def run_experiment_matrix(base: TrainConfig, data: Dataset, out_dir: str | os.PathLike | None = None,
                          holdout: float = 0.2, experiments=range(1, 7)) -> list[dict]:
    """Train one model per experiment id on the training split and score the held-out split."""
    train_set, held = data.split(holdout)
    g = gen_init(base.generator_seed, base.resolution)
    fe = extractor_init(base.extractor_seed, base.width_divisor)
    rows = []
    for exp in experiments:
        cfg = dataclasses.replace(base, experiment=exp, space=None, layers=None, hypercolumn=False)
        ckpt_path = Path(out_dir) / f"exp{exp:02d}.t2fl" if out_dir is not None else None
        result = train(cfg, train_set, ckpt_path, g, fe)
        report = evaluate(result.checkpoint, held, g, fe)
        space, layers = cfg.layerset()
        rows.append({
            "experiment": f"{exp:02d}", "space": space, "layers": ",".join(layers.names),
            "hypercolumn": str(layers.hypercolumn).lower(), "final_loss": result.history[-1],
            "fsd": report.metrics["fsd"], "fss_percent": report.metrics["fss"], "fid": report.metrics["fid"],
        })
    if out_dir is not None:
        write_matrix_report(Path(out_dir) / "report.tsv", rows)
    return rows


def write_matrix_report(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                               for c in REPORT_COLUMNS) + "\n")
