"""Face Semantic Distance/Similarity and Fréchet distance between feature sets.

Built-in face features come from the perceptual extractor (images resized to
299x299, deepest conv map, global average pool). Features computed by any
other network can be loaded from vector files and fed to the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError
from .perceptual import FeatureExtractorParams, extract_features

FEATURE_SIZE = 299
SYM_TOL = 1e-9
NEG_EIG_TOL = 1e-10
COV_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class FidStats:
    mu: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats, eps: float = COV_EPS) -> "FidStats":
        """Sample mean and 1/(N-1) covariance, plus ``eps`` on the diagonal."""
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"features must be an (N, D) array, got shape {x.shape}")
        if x.shape[0] < 2:
            raise DataError(f"FID needs at least 2 samples per set, got {x.shape[0]}")
        mu = x.mean(axis=0)
        centered = x - mu
        cov = centered.T @ centered / (x.shape[0] - 1)
        cov = 0.5 * (cov + cov.T) + eps * np.eye(x.shape[1])
        return cls(mu, cov)


def face_features(img, fe: FeatureExtractorParams, layer: str = "conv5_3") -> np.ndarray:
    """(N, D) feature vectors for a batch of images in [-1, 1]."""
    with ad.no_grad():
        x = img if isinstance(img, ad.Tensor) else ad.Tensor(img)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        x = ad.bilinear_resize(x, (FEATURE_SIZE, FEATURE_SIZE))
        fmap = extract_features(fe, x, [layer])[layer]
        return ad.global_average_pool(fmap).data


def _pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        raise DataError("need at least one feature pair")
    a = [np.asarray(p[0], dtype=np.float64).ravel() for p in pairs]
    b = [np.asarray(p[1], dtype=np.float64).ravel() for p in pairs]
    dims = {v.size for v in a + b}
    if len(dims) != 1:
        raise DataError(f"feature dimension mismatch: {sorted(dims)}")
    return np.stack(a), np.stack(b)


def fsd(pairs, mode: str = "l2") -> float:
    """Mean distance between generated and ground-truth feature vectors.

    ``mode="l2"`` uses the Euclidean norm of each difference; ``mode="mean_abs"``
    uses the mean absolute component difference instead.
    """
    g, t = _pairs(pairs)
    diff = g - t
    if mode == "l2":
        per_pair = np.sqrt(np.sum(diff * diff, axis=1))
    elif mode == "mean_abs":
        per_pair = np.mean(np.abs(diff), axis=1)
    else:
        raise ValueError(f"unknown FSD mode {mode!r}")
    return float(np.mean(per_pair))


def fss(pairs) -> float:
    """Mean cosine similarity between paired vectors, in [-1, 1]. Multiply by 100 for percent."""
    g, t = _pairs(pairs)
    ng = np.linalg.norm(g, axis=1)
    nt = np.linalg.norm(t, axis=1)
    if np.any(ng == 0) or np.any(nt == 0):
        raise NumericError("cosine similarity undefined for a zero-norm feature vector")
    cos = np.sum(g * t, axis=1) / (ng * nt)
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def matrix_sqrt_psd(m) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix.

    Raises:
        NumericError: if ``m`` is not symmetric (within 1e-9, relative to its
            largest entry when that exceeds 1) or has an eigenvalue below -1e-10.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NumericError(f"matrix square root needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * scale:
        raise NumericError("matrix square root: input is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.size and vals.min() < -NEG_EIG_TOL * scale:
        raise NumericError(f"matrix square root: input is indefinite (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_stats(a: FidStats, b: FidStats, clamp: bool = True) -> float:
    """Squared Fréchet distance between two Gaussians.

    The cross term Tr(sqrt(C1 C2)) is evaluated as Tr(sqrt(sqrt(C1) C2 sqrt(C1))),
    which shares its eigenvalues with C1 C2 but is symmetric PSD.
    """
    if a.mu.shape != b.mu.shape or a.cov.shape != b.cov.shape:
        raise DataError(f"feature dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    s1 = matrix_sqrt_psd(a.cov)
    inner = s1 @ b.cov @ s1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if not np.isfinite(d2):
        raise NumericError("FID is not finite")
    if d2 < -1e-8:
        raise NumericError(f"FID came out negative ({d2:.3e}); covariance inputs are inconsistent")
    if clamp and d2 < 0:
        d2 = 0.0
    return d2


def fid(set_a, set_b, eps: float = COV_EPS) -> float:
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    return fid_from_stats(FidStats.from_features(a, eps), FidStats.from_features(b, eps))


def paired(table_a: dict, table_b: dict) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair two id->vector tables on the ids of ``table_a``."""
    missing = [k for k in table_a if k not in table_b]
    if missing:
        raise DataError(f"ids missing from second feature table: {missing[:5]}")
    return [(table_a[k], table_b[k]) for k in table_a]


def format_report(entries: Sequence[tuple[str, object]]) -> str:
    """Stable ``key=value`` lines; floats use repr so reruns are byte-identical."""
    lines = []
    for key, value in entries:
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
