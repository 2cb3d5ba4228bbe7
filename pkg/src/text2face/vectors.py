"""Plain-text vector tables: ``id<TAB>v1 v2 ... vD`` per line, '#' starts a comment.

Used for sentence embeddings (D=768), hidden latents (D=512) and precomputed
image features (any D). Floats are written with ``repr`` so a write/read cycle
is lossless.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .errors import DataError


def read_vectors(path: str | os.PathLike, dim: int | None = None) -> dict[str, np.ndarray]:
    """Read a vector table, preserving file order.

    Args:
        path: file to read (UTF-8).
        dim: required vector length; ``None`` accepts any length as long as
            every row agrees.

    Raises:
        DataError: on a missing file, malformed row, wrong length or duplicate id.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read vector file {path}: {exc.strerror}") from None
    table: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: expected 'id<TAB>values'")
        key, _, rest = line.partition("\t")
        key = key.strip()
        try:
            values = np.array([float(v) for v in rest.split()], dtype=np.float64)
        except ValueError:
            raise DataError(f"{path}:{lineno}: row {key!r} has a non-numeric value") from None
        expected = dim if dim is not None else (len(next(iter(table.values()))) if table else None)
        if expected is not None and len(values) != expected:
            raise DataError(f"{path}:{lineno}: row {key!r} has {len(values)} values, expected {expected}")
        if key in table:
            raise DataError(f"{path}:{lineno}: duplicate id {key!r}")
        table[key] = values
    return table


def write_vectors(path: str | os.PathLike, table: Mapping[str, np.ndarray], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for key, values in table.items():
            if "\t" in key or "\n" in key:
                raise DataError(f"vector id {key!r} contains a tab or newline")
            fh.write(key + "\t" + " ".join(repr(float(v)) for v in np.ravel(values)) + "\n")
