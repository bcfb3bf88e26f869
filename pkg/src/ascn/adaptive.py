"""Eigenentropy-driven choice of the neighbourhood size of every point.

For each candidate size M the neighbourhood is the point itself plus its M
nearest neighbours. Its covariance eigenvalues, normalised to sum one, give
a Shannon entropy that is low for linear or planar patches and ln 3 for
isotropic ones; the smallest entropy wins.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cloudio import PointCloud
from .errors import DegenerateCloudWarning, InvalidParam, NumericalError
from .spatial import SpatialIndex, k_nearest

LN3 = float(np.log(3.0))
# entropies closer than this are treated as tied (resolved toward smaller M)
ENTROPY_TIE_TOL = 1e-12
_MAX_SWEEPS = 30


@dataclass(frozen=True)
class AdaptiveConfig:
    m_min: int = 3
    m_max: int = 10

    def __post_init__(self):
        if not 2 <= self.m_min <= self.m_max:
            raise InvalidParam(f"need 2 <= m_min <= m_max, got ({self.m_min}, {self.m_max})")

    @property
    def candidates(self) -> np.ndarray:
        return np.arange(self.m_min, self.m_max + 1)


@dataclass(frozen=True, eq=False)
class EigenAnalysis:
    lam: np.ndarray  # descending, clamped
    e: np.ndarray
    entropy: float


def covariance3(points) -> np.ndarray:
    """Mean-centred covariance with 1/K normalisation.

    Accepts ``(K, 3)`` or a batch ``(..., K, 3)``.
    """
    x = np.asarray(points, dtype=np.float64)
    k = x.shape[-2]
    xc = x - x.mean(axis=-2, keepdims=True)
    c = np.einsum("...ki,...kj->...ij", xc, xc) / k
    return 0.5 * (c + np.swapaxes(c, -1, -2))


def _jacobi_eigvals(a: np.ndarray) -> np.ndarray:
    """Cyclic Jacobi on a batch of symmetric 3x3 matrices, (B, 3, 3) -> (B, 3) unsorted."""
    d = [a[:, 0, 0].copy(), a[:, 1, 1].copy(), a[:, 2, 2].copy()]
    # off-diagonal entries keyed by (p, q), p < q
    off = {(0, 1): a[:, 0, 1].copy(), (0, 2): a[:, 0, 2].copy(), (1, 2): a[:, 1, 2].copy()}
    for _ in range(_MAX_SWEEPS):
        if not any(np.any(v != 0.0) for v in off.values()):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            r = 3 - p - q
            apq = off[(p, q)]
            app, aqq = d[p], d[q]
            tiny = np.abs(apq) <= 1e-18 * (np.abs(app) + np.abs(aqq))
            live = (apq != 0.0) & ~tiny
            if not np.any(live):
                apq[tiny] = 0.0
                continue
            safe = np.where(live, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            sgn = np.where(theta >= 0.0, 1.0, -1.0)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         sgn / (np.abs(theta) + np.sqrt(np.where(big, 0.0, theta * theta) + 1.0)))
            t = np.where(live, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            arp = off[(min(r, p), max(r, p))]
            arq = off[(min(r, q), max(r, q))]
            new_rp = c * arp - s * arq
            new_rq = s * arp + c * arq
            d[p] = app - t * apq
            d[q] = aqq + t * apq
            off[(min(r, p), max(r, p))] = new_rp
            off[(min(r, q), max(r, q))] = new_rq
            off[(p, q)] = np.where(live | tiny, 0.0, apq)
    else:
        raise NumericalError("Jacobi iteration did not converge")
    return np.stack(d, axis=-1)


def eigvals_sym3(c) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices, sorted descending; shape (..., 3)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-2:] != (3, 3):
        raise InvalidParam(f"expected (..., 3, 3) matrices, got {c.shape}")
    lead = c.shape[:-2]
    flat = c.reshape(-1, 3, 3)
    scale = np.maximum(1.0, np.abs(flat).max(axis=(1, 2)))
    asym = np.abs(flat - np.swapaxes(flat, 1, 2)).max(axis=(1, 2))
    if np.any(asym > 1e-9 * scale):
        raise NumericalError("matrix is not symmetric within 1e-9")
    if flat.shape[0] == 0:
        return np.empty(lead + (3,))
    sym = 0.5 * (flat + np.swapaxes(flat, 1, 2))
    lam = -np.sort(-_jacobi_eigvals(sym), axis=-1)
    top = np.maximum(1.0, np.abs(lam).max(axis=-1, keepdims=True))
    lam = np.where((lam < 0.0) & (lam > -1e-12 * top), 0.0, lam)
    return lam.reshape(lead + (3,))


def eigenentropy(lam) -> np.ndarray | float:
    """Shannon entropy (nats) of normalised eigenvalues, with 0 ln 0 = 0.

    All-zero eigenvalues give ``+inf`` so degenerate neighbourhoods lose every
    comparison against a real one.
    """
    lam = np.asarray(lam, dtype=np.float64)
    total = lam.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        e = lam / total
        terms = np.where(e > 0.0, -e * np.log(np.where(e > 0.0, e, 1.0)), 0.0)
    ent = np.where(total[..., 0] > 0.0, terms.sum(axis=-1), np.inf)
    return float(ent) if ent.ndim == 0 else ent


def eig_sym3(c) -> EigenAnalysis:
    lam = eigvals_sym3(c)
    total = lam.sum()
    e = lam / total if total > 0 else np.zeros(3)
    return EigenAnalysis(lam, e, eigenentropy(lam))


def _select(entropies: np.ndarray) -> np.ndarray:
    """Index of the smallest entropy per row, ties (within tolerance) to the lowest index.

    NaN marks infeasible candidates and is ignored.
    """
    ent = np.where(np.isnan(entropies), np.inf, entropies)
    best = ent.min(axis=-1, keepdims=True)
    finite_best = np.isfinite(best)
    within = np.where(finite_best, ent <= best + ENTROPY_TIE_TOL, np.isinf(ent))
    return np.argmax(within, axis=-1)


def _neighbourhood_entropies(rel: np.ndarray, cfg: AdaptiveConfig) -> np.ndarray:
    """Entropies for every candidate size given sorted relative neighbour vectors.

    ``rel`` has shape (N, k, 3) with k <= m_max; candidates larger than k are NaN.
    """
    n, k, _ = rel.shape
    cands = cfg.candidates
    out = np.full((n, cands.size), np.nan)
    feasible = [j for j, m in enumerate(cands) if m <= k]
    if not feasible or n == 0:
        return out
    covs = []
    for j in feasible:
        m = cands[j]
        pts = np.concatenate([np.zeros((n, 1, 3)), rel[:, :m]], axis=1)
        covs.append(covariance3(pts))
    lam = eigvals_sym3(np.stack(covs, axis=1))
    out[:, feasible] = eigenentropy(lam)
    return out


def optimal_neighborhood(cloud: PointCloud, index: SpatialIndex, n: int,
                         cfg: AdaptiveConfig = AdaptiveConfig()) -> tuple[int, np.ndarray]:
    """Best neighbourhood size for point ``n`` and the entropy of every candidate.

    The entropy array is aligned with ``cfg.candidates``; sizes exceeding the
    available neighbours are NaN. Clouds too small for ``m_min`` return
    ``N - 1`` with a warning.
    """
    nbrs = k_nearest(index, n, cfg.m_max)
    if len(nbrs) < cfg.m_min:
        warnings.warn(f"cloud has {len(cloud)} points; using M = {len(nbrs)}",
                      DegenerateCloudWarning, stacklevel=2)
        return len(nbrs), np.full(cfg.candidates.size, np.nan)
    rel = cloud.points[nbrs] - cloud.points[n]
    ent = _neighbourhood_entropies(rel[None], cfg)[0]
    return int(cfg.candidates[_select(ent)]), ent


def optimal_sizes_from_table(points: np.ndarray, table: np.ndarray,
                             cfg: AdaptiveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised selection for all points from a precomputed k-NN table."""
    n, k = table.shape
    if k < cfg.m_min:
        if n > 0:
            warnings.warn(f"cloud has {n} points; using M = {k}", DegenerateCloudWarning, stacklevel=3)
        return np.full(n, k, dtype=np.int64), np.full((n, cfg.candidates.size), np.nan)
    rel = points[table[:, :cfg.m_max]] - points[:, None, :]
    ent = _neighbourhood_entropies(rel, cfg)
    return cfg.candidates[_select(ent)].astype(np.int64), ent


def optimal_neighborhoods_all(cloud: PointCloud, index: SpatialIndex,
                              cfg: AdaptiveConfig = AdaptiveConfig()) -> tuple[np.ndarray, np.ndarray]:
    """``(M_star, entropies)`` for every point; the k-NN lists are fetched once."""
    return optimal_sizes_from_table(cloud.points, index.knn_table(cfg.m_max), cfg)


__all__ = ["AdaptiveConfig", "EigenAnalysis", "covariance3", "eig_sym3", "eigvals_sym3",
           "eigenentropy", "optimal_neighborhood", "optimal_neighborhoods_all",
           "optimal_sizes_from_table", "LN3", "ENTROPY_TIE_TOL"]
