"""Post-hoc analysis of a planned embedding.

Magnitude histograms per noise group, Pearson correlations, two-proxy
plane projections and desk-scale verification/identification metrics.
Similarities are plain cosines throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadEdges, DegenerateVariance, EmptyGallery, EmptyScores
from .geometry import FeatureBatch, orthonormal_pair, validate_proxies
from .margins import guidance_values

DEFAULT_FAR_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


# -- histograms ---------------------------------------------------------------


@dataclass
class MagnitudeHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    group_key: object
    clipped: int = 0


def _check_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.float64).reshape(-1)
    if e.size < 2 or not np.all(np.isfinite(e)) or np.any(np.diff(e) <= 0):
        raise BadEdges("histogram edges must be >= 2 finite, strictly ascending values")
    return e


def magnitude_histogram(batch: FeatureBatch, edges, groups=None) -> list[MagnitudeHistogram]:
    """One histogram of ``|z|`` per noise level.

    Values outside the edges are counted in the first or last bin, and the
    number of such values is reported as ``clipped``. ``groups`` lists the
    noise levels to report; by default every level present in the batch.
    """
    e = _check_edges(edges)
    mags = batch.magnitudes
    keys = np.unique(batch.noise_sigma) if groups is None else groups
    out = []
    for key in keys:
        m = mags[batch.noise_sigma == key]
        clipped = int(np.sum((m < e[0]) | (m > e[-1])))
        counts, _ = np.histogram(np.clip(m, e[0], e[-1]), bins=e)
        out.append(MagnitudeHistogram(e.copy(), counts.astype(np.int64), float(key), clipped))
    return out


# -- correlation --------------------------------------------------------------


@dataclass
class CorrelationReport:
    pearson_r: float
    n: int
    x_name: str = "x"
    y_name: str = "y"


def pearson(x, y, x_name: str = "x", y_name: str = "y") -> CorrelationReport:
    """Pearson correlation coefficient.

    >>> pearson([1, 2, 3, 4], [2, 1, 4, 3]).pearson_r
    0.6
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVariance("pearson is undefined for a constant series")
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return CorrelationReport(float(np.clip(r, -1.0, 1.0)), int(x.size), x_name, y_name)


# -- verification -------------------------------------------------------------


@dataclass
class VerificationReport:
    tar_at_far: dict
    auc: float
    threshold_at_far: dict


def _as_scores(s, name) -> np.ndarray:
    a = np.asarray(s, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise EmptyScores(f"{name} score list is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} scores must be finite")
    return a


def roc_points(genuine, impostor) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, TAR) at every distinct threshold, from (0, 0) to (1, 1)."""
    g = np.sort(_as_scores(genuine, "genuine"))
    i = np.sort(_as_scores(impostor, "impostor"))
    thr = np.unique(np.concatenate([g, i]))[::-1]
    tar = (g.size - np.searchsorted(g, thr, side="left")) / g.size
    far = (i.size - np.searchsorted(i, thr, side="left")) / i.size
    return np.concatenate([[0.0], far]), np.concatenate([[0.0], tar])


def auc_trapezoid(genuine, impostor) -> float:
    far, tar = roc_points(genuine, impostor)
    return float(np.sum(np.diff(far) * (tar[1:] + tar[:-1]) * 0.5))


def auc_pair_counting(genuine, impostor) -> float:
    """Mann-Whitney estimate P(g > i) + P(g = i)/2."""
    g = _as_scores(genuine, "genuine")
    i = np.sort(_as_scores(impostor, "impostor"))
    below = np.searchsorted(i, g, side="left")
    ties = np.searchsorted(i, g, side="right") - below
    return float((np.sum(below) + 0.5 * np.sum(ties)) / (g.size * i.size))


def verification_metrics(genuine, impostor, far_grid=DEFAULT_FAR_GRID) -> VerificationReport:
    """TAR at each FAR target plus ROC AUC.

    A pair is accepted when its score is >= the threshold. For each target
    the threshold is the smallest candidate whose impostor acceptance is at
    most the target; candidates are the observed scores plus one value just
    above the largest, which accepts nothing.
    """
    g = np.sort(_as_scores(genuine, "genuine"))
    i = np.sort(_as_scores(impostor, "impostor"))
    cands = np.unique(np.concatenate([g, i]))
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))
    far_c = (i.size - np.searchsorted(i, cands, side="left")) / i.size
    tars, thrs = {}, {}
    for far in far_grid:
        t = float(cands[np.argmax(far_c <= far)])  # far_c is non-increasing
        thrs[far] = t
        tars[far] = float((g.size - np.searchsorted(g, t, side="left")) / g.size)
    return VerificationReport(tars, auc_trapezoid(g, i), thrs)


def pair_scores(features, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores of all unordered pairs split into genuine and impostor."""
    F = np.asarray(features, dtype=np.float64)
    F = F / np.linalg.norm(F, axis=1, keepdims=True)
    S = F @ F.T
    iu = np.triu_indices(F.shape[0], k=1)
    same = np.asarray(labels)[iu[0]] == np.asarray(labels)[iu[1]]
    s = S[iu]
    return s[same], s[~same]


# -- identification -----------------------------------------------------------


def class_scores(gallery: FeatureBatch, probes: FeatureBatch) -> tuple[np.ndarray, np.ndarray]:
    """Max cosine of each probe to each gallery class; returns (scores, classes)."""
    if len(gallery) == 0:
        raise EmptyGallery("gallery is empty")
    G = gallery.features / gallery.magnitudes[:, None]
    P = probes.features / probes.magnitudes[:, None]
    S = P @ G.T
    classes = np.unique(gallery.labels)
    out = np.stack([S[:, gallery.labels == c].max(axis=1) for c in classes], axis=1)
    return out, classes


def identification_metrics(gallery: FeatureBatch, probes: FeatureBatch, ranks=(1, 5)) -> dict:
    """Rank-k accuracy with per-class max-cosine gallery scores.

    A probe's rank is one plus the number of gallery classes scoring strictly
    higher than its own class.
    """
    scores, classes = class_scores(gallery, probes)
    pos = np.searchsorted(classes, probes.labels)
    pos = np.minimum(pos, classes.size - 1)
    if np.any(classes[pos] != probes.labels):
        raise EmptyGallery("a probe's class has no gallery exemplar")
    own = scores[np.arange(len(probes)), pos]
    rank = 1 + np.sum(scores > own[:, None], axis=1)
    return {int(k): float(np.mean(rank <= k)) for k in ranks}


def split_gallery_probe(batch: FeatureBatch) -> tuple[FeatureBatch, FeatureBatch]:
    """Even positions within each class go to the gallery, odd ones are probes."""
    order = np.zeros(len(batch), dtype=np.int64)
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        order[idx] = np.arange(idx.size)
    g = order % 2 == 0
    gal = batch.subset(np.flatnonzero(g))
    probe_idx = np.flatnonzero(~g)
    # a probe whose class has a single sample has no exemplar; drop it
    probe_idx = probe_idx[np.isin(batch.labels[probe_idx], gal.labels)]
    return gal, batch.subset(probe_idx)


# -- projection ---------------------------------------------------------------


@dataclass
class ProjectionRow:
    sample_id: int
    x: float
    y: float
    magnitude: float
    p_d: float


@dataclass
class ProjectionExport:
    rows: list
    proxy_rays: dict


def projection_export(batch: FeatureBatch, proxies, class_pair, s: float = 64.0) -> ProjectionExport:
    """Project the samples of two classes onto the plane of their proxies.

    Coordinates use the orthonormal basis built from the first proxy, so the
    first proxy lands on the positive x-axis. ``p_d`` is the margin-free
    guidance value at scale ``s``.
    """
    W = validate_proxies(proxies)
    a, b = (int(c) for c in class_pair)
    if a == b:
        raise ValueError("class_pair needs two distinct classes")
    e1, e2 = orthonormal_pair(W[a], W[b])
    idx = np.flatnonzero(np.isin(batch.labels, (a, b)))
    rows = []
    if idx.size:
        Z = batch.features[idx]
        p_d = np.atleast_1d(guidance_values(Z, batch.labels[idx], W, s))
        xs, ys, mags = Z @ e1, Z @ e2, np.linalg.norm(Z, axis=1)
        rows = [ProjectionRow(int(i), float(x), float(y), float(m), float(p))
                for i, x, y, m, p in zip(idx, xs, ys, mags, p_d)]
    rays = {c: (float(W[c] @ e1), float(W[c] @ e2)) for c in (a, b)}
    return ProjectionExport(rows, rays)
