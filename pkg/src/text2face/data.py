"""Caption/image datasets: manifest files, image loading and the synthetic oracle set.

Manifest format (UTF-8), one record per line, tab separated::

    id <TAB> image path <TAB> caption
    id <TAB> image path <TAB> embedding id <TAB> caption

Image paths are resolved relative to the manifest's directory. Lines starting
with '#' are comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .captions import ATTRIBUTES, random_attributes, render_caption
from .encoder import Embedding, load_embeddings
from .errors import DataError
from .generator import GeneratorParams, mapping_forward, synthesize
from .imageio import load_image, quantize, save_image
from .text2latent import LATENT_DIM, LatentCode
from .vectors import read_vectors, write_vectors

JITTER_SIGMA = 0.05
MANIFEST_NAME = "manifest.tsv"
LATENTS_NAME = "latents.txt"


@dataclass(frozen=True)
class Record:
    id: str
    image_path: str
    caption: str
    embedding_id: str | None = None


@dataclass(eq=False)
class Dataset:
    records: list[Record]
    images: np.ndarray  # (N, 3, R, R) in [-1, 1]
    embeddings: dict[str, Embedding] | None = None
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def captions(self) -> list[str]:
        return [r.caption for r in self.records]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "Dataset":
        index = list(index)
        return Dataset([self.records[i] for i in index], self.images[index], self.embeddings, self.root)

    def split(self, holdout: float = 0.2) -> tuple["Dataset", "Dataset"]:
        """Deterministic split: the last ``holdout`` fraction (by manifest order) is held out."""
        n = len(self)
        n_held = max(1, int(round(n * holdout)))
        n_train = n - n_held
        if n_train < 1:
            raise DataError(f"dataset of {n} records is too small to split")
        return self.subset(range(n_train)), self.subset(range(n_train, n))

    def embedding_for(self, record: Record) -> Embedding | None:
        if self.embeddings is None or record.embedding_id is None:
            return None
        try:
            return self.embeddings[record.embedding_id]
        except KeyError:
            raise DataError(f"record {record.id!r}: embedding id {record.embedding_id!r} not in embedding file") from None


def read_manifest(path: str | os.PathLike) -> list[Record]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    records, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) == 3:
            rid, image, caption = fields
            emb = None
        elif len(fields) == 4:
            rid, image, emb, caption = fields
        else:
            raise DataError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        rid = rid.strip()
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
        if not caption.strip():
            raise DataError(f"{path}:{lineno}: empty caption")
        seen.add(rid)
        records.append(Record(rid, image.strip(), caption.strip(), emb.strip() if emb else None))
    if not records:
        raise DataError(f"{path}: no records")
    return records


def write_manifest(path: str | os.PathLike, records: list[Record]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if "\t" in r.caption or "\n" in r.caption:
                raise DataError(f"record {r.id!r}: captions may not contain tabs or newlines")
            cols = [r.id, r.image_path] + ([r.embedding_id] if r.embedding_id else []) + [r.caption]
            fh.write("\t".join(cols) + "\n")


def load_dataset(manifest: str | os.PathLike, resolution: int | None = None,
                 embeddings: str | os.PathLike | None = None) -> Dataset:
    """Read a manifest and decode its images, resized to ``resolution`` if given."""
    manifest = Path(manifest)
    records = read_manifest(manifest)
    root = manifest.parent
    images = []
    for r in records:
        path = Path(r.image_path)
        if not path.is_absolute():
            path = root / path
        img = load_image(path)
        if img.shape[1] != img.shape[2]:
            raise DataError(f"record {r.id!r}: image {path} is not square")
        if resolution is not None and img.shape[1] != resolution:
            img = ad.bilinear_resize(ad.Tensor(img), (resolution, resolution)).data
        images.append(img)
    sizes = {i.shape for i in images}
    if len(sizes) != 1:
        raise DataError(f"images have mixed sizes {sorted(sizes)}; pass a resolution to resize them")
    table = load_embeddings(embeddings) if embeddings is not None else None
    ds = Dataset(records, np.stack(images), table, root)
    if table is not None:
        for r in records:
            ds.embedding_for(r)
    return ds


def oracle_directions(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-attribute 512-d directions and a shared base direction for hidden latents."""
    rng = np.random.default_rng([seed, 512])
    return rng.standard_normal(LATENT_DIM), rng.standard_normal((len(ATTRIBUTES), LATENT_DIM))


def synthesize_dataset(n: int, seed: int, g: GeneratorParams, out_dir: str | os.PathLike) -> Dataset:
    """Write an oracle dataset whose images come from attribute-determined latents.

    Each sample draws a valid attribute vector, renders its caption, and forms
    a hidden latent z* = normalize(base + sum of attribute directions + 0.05
    noise). The image is ``synthesize(mapping(z*))`` quantized to 8 bits. The
    hidden latents go to ``latents.txt`` next to the manifest.
    """
    if n < 1:
        raise DataError("dataset size must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 64])
    base, dirs = oracle_directions(seed)
    records, latents, attrs_list = [], {}, []
    z = np.empty((n, LATENT_DIM))
    width = len(str(n - 1))
    for i in range(n):
        attrs = random_attributes(rng)
        raw = base + attrs.as_array() @ dirs + JITTER_SIGMA * rng.standard_normal(LATENT_DIM)
        z[i] = raw / np.linalg.norm(raw)
        rid = f"s{i:0{width}d}"
        records.append(Record(rid, f"images/{rid}.ppm", render_caption(attrs).text))
        latents[rid] = z[i]
        attrs_list.append(attrs)
    images = render_latents(g, z)
    for r, img in zip(records, images):
        save_image(out_dir / r.image_path, img)
    write_manifest(out_dir / MANIFEST_NAME, records)
    write_vectors(out_dir / LATENTS_NAME, latents, header="hidden Z-space latents (oracle use only)")
    ds = Dataset(records, images, None, out_dir)
    ds.extra["latents"] = z
    ds.extra["attributes"] = attrs_list
    return ds


def render_latents(g: GeneratorParams, z: np.ndarray, batch: int = 64) -> np.ndarray:
    """Quantized images for Z-space latents."""
    out = []
    with ad.no_grad():
        for start in range(0, len(z), batch):
            code = LatentCode(ad.Tensor(z[start:start + batch]), "Z")
            out.append(synthesize(g, mapping_forward(g, code)).data)
    imgs = np.concatenate(out)
    return np.stack([quantize(i) for i in imgs])


def read_latents(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return read_vectors(path, dim=LATENT_DIM)
