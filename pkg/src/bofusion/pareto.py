"""Pareto fronts and hypervolume under the all-maximize convention.

All score vectors are normalized higher-is-better values, so the reference
point is the zero vector throughout. Hypervolume is exact for K <= 3
(descending sweep in 2-d, slicing in 3-d) and seeded Monte Carlo above that.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

MC_SAMPLES_DEFAULT = 100_000


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return pts.reshape(0, 0)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2:
        raise ValueError(f"points must form a 2-d array, got shape {pts.shape}")
    return pts


def dominates(a, b) -> bool:
    """Weak Pareto domination: a >= b everywhere and a > b somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("dominates() needs two equal-length vectors")
    return bool(np.all(a >= b) and np.any(a > b))


@dataclass(frozen=True)
class ParetoFront:
    """Maximal points (by weak domination) that strictly dominate the zero
    reference, in first-seen id order."""

    points: np.ndarray
    ids: tuple[int, ...]

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.ids) != len(pts):
            raise ValueError("ids/points length mismatch")

    def __len__(self) -> int:
        return len(self.points)


def pareto_front(points, ids=None) -> ParetoFront:
    """Extract the maximal set, dropping points that fail to dominate zero.

    Exact duplicate vectors keep only the earliest id. All-dropped input
    yields an empty front (hypervolume 0), which happens legitimately when
    every evaluation so far clipped to a zero coordinate.
    """
    pts = _as_points(points)
    n = len(pts)
    if ids is None:
        ids = list(range(n))
    ids = [int(i) for i in ids]
    if len(ids) != n:
        raise ValueError("ids/points length mismatch")
    if n == 0:
        return ParetoFront(np.zeros((0, 0)), ())

    keep = np.all(pts > 0.0, axis=1) & np.all(np.isfinite(pts), axis=1)
    pts_k = pts[keep]
    ids_k = [i for i, k in zip(ids, keep) if k]
    if len(pts_k) == 0:
        return ParetoFront(np.zeros((0, pts.shape[1])), ())

    ge = np.all(pts_k[:, None, :] >= pts_k[None, :, :], axis=-1)
    gt = np.any(pts_k[:, None, :] > pts_k[None, :, :], axis=-1)
    dominated = np.any(ge & gt, axis=0)

    out_pts, out_ids, seen = [], [], set()
    for row, pid, dom in zip(pts_k, ids_k, dominated):
        if dom:
            continue
        key = row.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out_pts.append(row)
        out_ids.append(pid)
    return ParetoFront(np.array(out_pts), tuple(out_ids))


def _staircase2d(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mutually nondominated 2-d points sorted by x descending (y ascending)."""
    order = np.argsort(-pts[:, 0], kind="stable")
    return pts[order, 0], pts[order, 1]


def _hv2(pts: np.ndarray) -> float:
    if len(pts) == 0:
        return 0.0
    sx, sy = _staircase2d(pts)
    widths = sx - np.append(sx[1:], 0.0)
    return float(np.dot(widths, sy))


def _hv3(pts: np.ndarray) -> float:
    # Slice along z: between consecutive z levels the attained 2-d region is
    # the front of every point at or above the slab.
    if len(pts) == 0:
        return 0.0
    order = np.argsort(-pts[:, 2], kind="stable")
    pts = pts[order]
    z = np.append(pts[:, 2], 0.0)
    hv = 0.0
    for i in range(len(pts)):
        depth = z[i] - z[i + 1]
        if depth <= 0.0:
            continue
        prefix = pareto_front(pts[: i + 1, :2]).points
        hv += depth * _hv2(prefix)
    return float(hv)


def hypervolume_mc(points, ref=None, n_samples: int = MC_SAMPLES_DEFAULT, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo hypervolume estimate and its standard error."""
    pts = _as_points(points)
    if len(pts) == 0:
        return 0.0, 0.0
    if ref is not None:
        pts = pts - np.asarray(ref, dtype=float)
    hi = pts.max(axis=0)
    box = float(np.prod(hi))
    if box <= 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    samples = rng.uniform(size=(n_samples, pts.shape[1])) * hi
    covered = np.zeros(n_samples, dtype=bool)
    for p in pts:
        covered |= np.all(samples <= p, axis=1)
    p_hat = covered.mean()
    stderr = box * float(np.sqrt(p_hat * (1.0 - p_hat) / n_samples))
    return box * float(p_hat), stderr


def hypervolume(front, ref=None, *, mc_samples: int = MC_SAMPLES_DEFAULT, mc_seed: int = 0) -> float:
    """Dominated volume between `ref` (default zero) and the given points.

    Exact for K <= 3; seeded Monte Carlo with `mc_samples` draws for K >= 4.
    Points are screened first: any input point not strictly dominating the
    reference is an error here (fronts built by pareto_front never contain
    one).
    """
    if isinstance(front, ParetoFront):
        pts = front.points
    else:
        pts = _as_points(front)
    if len(pts) == 0:
        return 0.0
    if ref is not None:
        pts = pts - np.asarray(ref, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise NumericalError("hypervolume: non-finite point")
    if np.any(pts <= 0.0):
        raise NumericalError("hypervolume: point does not strictly dominate the reference")
    pts = pareto_front(pts).points
    k = pts.shape[1]
    if k == 1:
        return float(pts.max())
    if k == 2:
        return _hv2(pts)
    if k == 3:
        return _hv3(pts)
    est, _ = hypervolume_mc(pts, None, mc_samples, mc_seed)
    return est


def hv_method(k: int) -> str:
    """'exact' or 'mc', matching what hypervolume() will do for K objectives."""
    return "exact" if k <= 3 else "mc"


def _hvi2(sx: np.ndarray, sy: np.ndarray, a: float, b: float) -> float:
    """2-d hypervolume gain of candidate (a, b) over a staircase (x desc)."""
    if a <= 0.0 or b <= 0.0:
        return 0.0
    if len(sx) == 0:
        return a * b
    gain = max(0.0, a - sx[0]) * b
    nxt = np.append(sx[1:], 0.0)
    seg = np.maximum(0.0, np.minimum(a, sx) - nxt)
    gain += float(np.dot(seg, np.maximum(0.0, b - sy)))
    return gain


def hv_improvement(front, candidate, ref=None) -> float:
    """hypervolume(front + candidate) - hypervolume(front).

    A candidate dominated by the front, or one failing to dominate the
    reference, contributes exactly 0.
    """
    if isinstance(front, ParetoFront):
        pts = front.points
    else:
        pts = pareto_front(front).points
    cand = np.asarray(candidate, dtype=float)
    if cand.ndim != 1:
        raise ValueError("candidate must be a vector")
    if ref is not None:
        r = np.asarray(ref, dtype=float)
        pts = pts - r if len(pts) else pts
        cand = cand - r
    if len(pts) and pts.shape[1] != cand.size:
        raise ValueError("candidate/front dimension mismatch")
    if not np.all(np.isfinite(cand)) or np.any(cand <= 0.0):
        return 0.0
    if cand.size == 1:
        best = pts.max() if len(pts) else 0.0
        return float(max(0.0, cand[0] - best))
    if cand.size == 2:
        if len(pts):
            sx, sy = _staircase2d(pts)
        else:
            sx = sy = np.empty(0)
        return _hvi2(sx, sy, float(cand[0]), float(cand[1]))
    base = hypervolume(pts) if len(pts) else 0.0
    joined = np.vstack([pts, cand]) if len(pts) else cand.reshape(1, -1)
    return float(max(0.0, hypervolume(pareto_front(joined)) - base))
