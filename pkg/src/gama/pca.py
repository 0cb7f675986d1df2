"""Two-component PCA by power iteration with deflation, for the
clean-vs-perturbed embedding diagnostic."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

_TOL = 1e-12
_MAX_ITERS = 500_000  # near-degenerate eigenpairs converge slowly


def _power_top(cov: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    val = 0.0
    for _ in range(_MAX_ITERS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < _TOL:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w  # sign-align so the step criterion sees true movement
        new_val = float(w @ cov @ w)
        if (np.linalg.norm(w - v) < 1e-14
                and abs(new_val - val) < 1e-15 * max(1.0, abs(new_val))):
            return w, new_val
        v, val = w, new_val
    return v, val


def pca_top2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(coords (N, 2), components (2, K) orthonormal, eigenvalues desc).

    Covariance uses the n-1 denominator. The start vector is fixed, not
    random, so results are reproducible."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ConfigError(f"need at least 3 rows of embeddings, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = (centered.T @ centered) / (x.shape[0] - 1)
    if float(np.abs(cov).max()) < _TOL:
        raise ConfigError("embeddings are all identical; no principal plane")

    k = cov.shape[0]
    start = np.ones(k) + 1e-3 * np.arange(k)  # breaks symmetric-start stalls
    v1, l1 = _power_top(cov, start)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, l2 = _power_top(deflated, start)
    v2 = v2 - (v2 @ v1) * v1
    n2 = np.linalg.norm(v2)
    if n2 < 1e-9:
        raise ConfigError("covariance rank < 2; no second component")
    v2 /= n2
    l2 = float(v2 @ cov @ v2)
    comps = np.stack([v1, v2])
    return centered @ comps.T, comps, np.array([l1, l2])


def centroid_separation(coords: np.ndarray, groups: np.ndarray) -> float:
    """Euclidean distance between the two group centroids in the plane."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) != 2:
        raise ConfigError(f"need exactly 2 groups, got {len(uniq)}")
    a = coords[groups == uniq[0]].mean(axis=0)
    b = coords[groups == uniq[1]].mean(axis=0)
    return float(np.linalg.norm(a - b))


def pca_export_csv(coords: np.ndarray, groups: list) -> str:
    lines = ["x,y,group"]
    for (cx, cy), g in zip(coords, groups):
        lines.append(f"{cx:.6f},{cy:.6f},{g}")
    return "\n".join(lines) + "\n"
