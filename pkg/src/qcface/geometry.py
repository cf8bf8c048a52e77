"""Vector and angle primitives shared by the loss, gradient and analysis code.

All arithmetic is float64. Cosines are clamped away from +-1 before any
``arccos`` so that (anti)parallel vectors do not produce NaN angles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearProxies, ZeroVector

COS_EPS = 1e-12
COLLINEAR_TOL = 1e-9


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def magnitude(v) -> float:
    return float(np.linalg.norm(as_vector(v)))


def clamp_cos(c):
    return np.clip(c, -1.0 + COS_EPS, 1.0 - COS_EPS)


def cosine_similarity(a, b) -> float:
    """Clamped cosine of the angle between ``a`` and ``b``.

    >>> round(cosine_similarity([3, 4], [4, 3]), 12)
    0.96
    """
    a = as_vector(a)
    b = as_vector(b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(clamp_cos(np.dot(a, b) / (na * nb)))


def angle(a, b) -> float:
    return float(np.arccos(cosine_similarity(a, b)))


def cosine_matrix(Z: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped cosines between every row of ``Z`` (n, d) and ``W`` (C, d).

    Returns ``(cos, z_norm, w_norm)`` with shapes (n, C), (n,), (C,).
    ``W`` may also be a per-sample stack of shape (n, C, d), in which case
    ``w_norm`` has shape (n, C).
    """
    z_norm = np.linalg.norm(Z, axis=1)
    w_norm = np.linalg.norm(W, axis=-1)
    if np.any(z_norm == 0.0):
        raise ZeroVector("feature batch contains a zero vector")
    if np.any(w_norm == 0.0):
        raise ZeroVector("proxy matrix contains a zero row")
    if W.ndim == 3:
        cos = np.einsum("nd,ncd->nc", Z, W) / (z_norm[:, None] * w_norm)
    else:
        cos = (Z @ W.T) / np.outer(z_norm, w_norm)
    return clamp_cos(cos), z_norm, w_norm


def orthonormal_pair(w1, w2) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt basis ``(e1, e2)`` of span(w1, w2) with ``e1 = w1/|w1|``."""
    w1 = as_vector(w1)
    w2 = as_vector(w2)
    n1 = np.linalg.norm(w1)
    n2 = np.linalg.norm(w2)
    if n1 == 0.0 or n2 == 0.0:
        raise ZeroVector("proxy is the zero vector")
    if abs(np.dot(w1, w2) / (n1 * n2)) >= 1.0 - COLLINEAR_TOL:
        raise CollinearProxies("proxies are (anti)parallel; no 2-plane to project on")
    e1 = w1 / n1
    r = w2 - np.dot(w2, e1) * e1
    e2 = r / np.linalg.norm(r)
    return e1, e2


def gram_schmidt_project(z, w1, w2) -> tuple[float, float]:
    """Coordinates of the orthogonal projection of ``z`` onto span(w1, w2).

    The coordinates are in the orthonormal basis built from ``w1`` then
    ``w2`` and are not normalized, so ``hypot(x, y) <= |z|`` with equality
    exactly when ``z`` lies in the plane.
    """
    z = as_vector(z)
    e1, e2 = orthonormal_pair(w1, w2)
    return float(np.dot(z, e1)), float(np.dot(z, e2))


def validate_proxies(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim not in (2, 3) or min(W.shape) < 1:
        raise ValueError(f"proxy matrix must be (C, d), got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("proxy matrix has non-finite entries")
    if np.any(np.linalg.norm(W, axis=-1) == 0.0):
        raise ZeroVector("proxy matrix contains a zero row")
    return W


@dataclass
class FeatureBatch:
    """Embeddings with labels and per-sample provenance."""

    features: np.ndarray
    labels: np.ndarray
    noise_sigma: np.ndarray = field(default=None)
    mislabeled: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.noise_sigma is None:
            self.noise_sigma = np.zeros(n)
        if self.mislabeled is None:
            self.mislabeled = np.zeros(n, dtype=bool)
        self.noise_sigma = np.asarray(self.noise_sigma, dtype=np.float64).reshape(-1)
        self.mislabeled = np.asarray(self.mislabeled, dtype=bool).reshape(-1)
        if n < 1:
            raise ValueError("a feature batch needs at least one sample")
        if not (len(self.labels) == len(self.noise_sigma) == len(self.mislabeled) == n):
            raise ValueError("features, labels and metadata must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if np.any(self.noise_sigma < 0):
            raise ValueError("noise_sigma must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.features, axis=1)

    def check_against(self, W: np.ndarray) -> None:
        C, d = W.shape
        if self.features.shape[1] != d:
            raise ValueError(f"feature dim {self.features.shape[1]} != proxy dim {d}")
        if np.any(self.labels < 0) or np.any(self.labels >= C):
            raise ValueError("label outside [0, C)")

    def subset(self, idx) -> FeatureBatch:
        return FeatureBatch(
            self.features[idx], self.labels[idx], self.noise_sigma[idx], self.mislabeled[idx]
        )
