"""Learned point-to-set Mahalanobis metric.

The metric matrix of a source is kept in factored form ``M = U U^T`` with
``U`` of shape (hidden, rank), so it is PSD by construction and the distance
of an encoding ``h`` to a domain centre ``c`` is::

    d = sqrt(||U^T (h - c)||^2 + DIST_EPS)

Two confidence functions turn distances into expert scores:

``mcd``      |d(x, S+) - d(x, S-)| for binary tasks (distance to each class mean)
``negdist``  -d(x, S) for multi-class / token tagging (distance to the domain mean)

Scores are normalised into mixture weights with a softmax.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from metamoe.errors import ContractError
from metamoe.numerics import softmax

DIST_EPS = 1e-12
CONFIDENCE_KINDS = ("mcd", "negdist")


@dataclass
class DomainStats:
    mean: np.ndarray
    class_means: np.ndarray | None = None  # (n_classes, hidden)
    support_count: int = 1

    def __post_init__(self):
        if self.support_count < 1:
            raise ValueError("support_count must be >= 1")


def compute_domain_stats(encodings, labels=None, n_classes: int | None = None) -> DomainStats:
    H = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    if H.shape[0] == 0:
        raise ValueError("cannot compute statistics of an empty set")
    class_means = None
    if labels is not None:
        y = np.asarray(labels, dtype=np.int64)
        if y.shape[0] != H.shape[0]:
            raise ValueError("labels and encodings differ in length")
        C = int(n_classes) if n_classes is not None else int(y.max()) + 1
        counts = np.bincount(y, minlength=C)
        if np.any(counts == 0):
            warnings.warn(
                f"classes {np.flatnonzero(counts == 0).tolist()} have no members; class means omitted",
                RuntimeWarning,
                stacklevel=2,
            )
        else:
            class_means = np.stack([H[y == c].mean(0) for c in range(C)])
    return DomainStats(H.mean(0), class_means, H.shape[0])


def point_to_set_distance(h, center, U) -> float:
    h = np.asarray(h, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if h.shape != center.shape or U.ndim != 2 or U.shape[0] != h.shape[0]:
        raise ValueError(f"dimension mismatch: h {h.shape}, center {center.shape}, U {U.shape}")
    z = U.T @ (h - center)
    return float(np.sqrt(z @ z + DIST_EPS))


def confidence_mcd(h, stats: DomainStats, U) -> float:
    if stats.class_means is None or len(stats.class_means) != 2:
        raise ContractError("maximum cluster difference needs both class means of a binary domain")
    d_neg = point_to_set_distance(h, stats.class_means[0], U)
    d_pos = point_to_set_distance(h, stats.class_means[1], U)
    return abs(d_pos - d_neg)


def confidence_negdist(h, stats: DomainStats, U) -> float:
    return -point_to_set_distance(h, stats.mean, U)


def normalize_alpha(confidences) -> np.ndarray:
    e = np.asarray(confidences, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no active sources to normalise over")
    if not np.all(np.isfinite(e)):
        raise ValueError("confidences must be finite")
    return softmax(e)


# ---------------------------------------------------------------------------
# batched forward / backward used by the training objective


def batch_distances(H: np.ndarray, center: np.ndarray, U: np.ndarray):
    delta = H - center
    Z = delta @ U
    d = np.sqrt((Z * Z).sum(1) + DIST_EPS)
    return d, (delta, Z, d)


def batch_distances_backward(gd: np.ndarray, U: np.ndarray, cache):
    """Returns (grad wrt H rows, grad wrt center, grad wrt U)."""
    delta, Z, d = cache
    gZ = (gd / d)[:, None] * Z
    g_delta = gZ @ U.T
    return g_delta, -g_delta.sum(0), delta.T @ gZ


@dataclass
class _ConfCache:
    kind: str
    centers: list  # (member mask or None, center cache) per centre
    parts: list  # distance caches, aligned with centers
    sign: np.ndarray | None
    n_src: int
    stop_grad: bool
    degenerate: bool = False


def _centres(Hs, ys, kind):
    """Centre vectors and the source rows that form each of them."""
    if kind == "negdist":
        return [(None, Hs.mean(0))]
    out = []
    for c in (0, 1):
        mask = ys == c
        if not mask.any():
            return None
        out.append((mask, Hs[mask].mean(0)))
    return out


def confidence_forward(Hq, Hs, ys, U, kind: str, stop_grad: bool = False):
    """Confidence of every query row w.r.t. a source batch (Hs, ys).

    The source centres are batch means of ``Hs``, so gradients also flow into
    the source encodings unless ``stop_grad`` is set. If the batch is missing
    a class needed by ``mcd`` the confidence is a constant 0.
    """
    if kind not in CONFIDENCE_KINDS:
        raise ValueError(f"unknown confidence kind {kind!r}")
    centres = _centres(Hs, ys, kind)
    if centres is None:
        return np.zeros(len(Hq)), _ConfCache(kind, [], [], None, len(Hs), stop_grad, degenerate=True)
    parts = []
    dists = []
    for _, c in centres:
        d, cache = batch_distances(Hq, c, U)
        dists.append(d)
        parts.append(cache)
    if kind == "negdist":
        return -dists[0], _ConfCache(kind, centres, parts, None, len(Hs), stop_grad)
    diff = dists[1] - dists[0]
    return np.abs(diff), _ConfCache(kind, centres, parts, np.sign(diff), len(Hs), stop_grad)


def confidence_backward(ge: np.ndarray, U: np.ndarray, cache: _ConfCache, n_src_rows: int):
    """Returns (grad wrt query rows, grad wrt source rows, grad wrt U)."""
    h = U.shape[0]
    gHs = np.zeros((n_src_rows, h))
    if cache.degenerate:
        return np.zeros((len(ge), h)), gHs, np.zeros_like(U)
    if cache.kind == "negdist":
        gds = [-ge]
    else:
        gds = [-ge * cache.sign, ge * cache.sign]
    gHq = np.zeros((len(ge), h))
    gU = np.zeros_like(U)
    for (mask, _), part, gd in zip(cache.centers, cache.parts, gds):
        gq, gc, gu = batch_distances_backward(gd, U, part)
        gHq += gq
        gU += gu
        if not cache.stop_grad:
            if mask is None:
                gHs += gc / n_src_rows
            else:
                gHs[mask] += gc / mask.sum()
    return gHq, gHs, gU


def confidences_from_stats(H: np.ndarray, stats: DomainStats, U: np.ndarray, kind: str) -> np.ndarray:
    """Vectorised confidences against precomputed (full-domain) statistics."""
    if kind == "negdist":
        return -batch_distances(H, stats.mean, U)[0]
    if kind != "mcd":
        raise ValueError(f"unknown confidence kind {kind!r}")
    if stats.class_means is None or len(stats.class_means) != 2:
        raise ContractError("maximum cluster difference needs both class means of a binary domain")
    d_neg = batch_distances(H, stats.class_means[0], U)[0]
    d_pos = batch_distances(H, stats.class_means[1], U)[0]
    return np.abs(d_pos - d_neg)
