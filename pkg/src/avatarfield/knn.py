"""Exact K-nearest-neighbour queries over a point cloud.

Results are ordered by ascending distance, ties broken by ascending point
index, and the uniform-grid index must agree with :func:`brute_force_knn`
bit for bit.  Squared distances are always formed as ``dx*dx + dy*dy + dz*dz``
in that order so every code path rounds identically.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

_MARGIN = 1e-9


@dataclass(frozen=True)
class KnnResult:
    indices: np.ndarray    # (k,) int64, ascending distance
    distances: np.ndarray  # (k,) float64, unsquared

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class BatchKnn:
    """Padded batch result; missing entries have index -1 and distance inf."""
    indices: np.ndarray    # (N, K)
    distances: np.ndarray  # (N, K)

    @property
    def counts(self) -> np.ndarray:
        return (self.indices >= 0).sum(axis=1)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def __getitem__(self, i) -> KnnResult:
        keep = self.indices[i] >= 0
        return KnnResult(self.indices[i][keep], self.distances[i][keep])


# ---------------------------------------------------------------- oracle

def brute_force_knn(points: np.ndarray, queries: np.ndarray, k: int, chunk: int = 2048) -> BatchKnn:
    """Reference search: full distance matrix, stable ordering by (d², index)."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n, p = len(queries), len(points)
    if not 1 <= k <= p:
        raise ValueError(f"k={k} must lie in [1, {p}]")
    out_i = np.empty((n, k), dtype=np.int64)
    out_d = np.empty((n, k))
    for s in range(0, n, chunk):
        q = queries[s:s + chunk]
        d2 = q[:, None, 0] - points[None, :, 0]
        d2 *= d2
        for a in (1, 2):
            t = q[:, None, a] - points[None, :, a]
            t *= t
            d2 += t
        if k < p:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            ties = (d2 <= kth[:, None]).sum(axis=1) > k
        else:
            ties = np.ones(len(q), dtype=bool)
        cand = np.empty((len(q), k), dtype=np.int64)
        if (~ties).any():
            sel = part[~ties]
            vals = np.take_along_axis(d2[~ties], sel, axis=1)
            order = np.lexsort((sel, vals), axis=1)
            cand[~ties] = np.take_along_axis(sel, order, axis=1)
        for r in np.flatnonzero(ties):
            cand[r] = np.argsort(d2[r], kind="stable")[:k]
        out_i[s:s + chunk] = cand
        out_d[s:s + chunk] = np.sqrt(np.take_along_axis(d2, cand, axis=1))
    return BatchKnn(out_i, out_d)


# ---------------------------------------------------------------- grid kernels

@numba.njit(cache=True)
def _insert(best_d, best_i, k, d2, idx):
    """Insert into the sorted top-k; caller has already checked that (d2, idx) beats slot k-1."""
    j = k - 1
    while j > 0 and (best_d[j - 1] > d2 or (best_d[j - 1] == d2 and best_i[j - 1] > idx)):
        best_d[j] = best_d[j - 1]
        best_i[j] = best_i[j - 1]
        j -= 1
    best_d[j] = d2
    best_i[j] = idx


@numba.njit(cache=True)
def _build(points, lo, cell, g):
    n = points.shape[0]
    cell_of = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = np.empty(3, dtype=np.int64)
        for a in range(3):
            v = int(np.floor((points[i, a] - lo[a]) / cell))
            c[a] = min(max(v, 0), g - 1)
        cell_of[i] = (c[0] * g + c[1]) * g + c[2]
    start = np.zeros(g * g * g + 1, dtype=np.int64)
    for i in range(n):
        start[cell_of[i] + 1] += 1
    for c in range(g * g * g):
        start[c + 1] += start[c]
    fill = start[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = cell_of[i]
        order[fill[c]] = i
        fill[c] += 1
    return start, order


@numba.njit(cache=True)
def _query_one(q, points, start, order, lo, cell, g, k, best_d, best_i):
    px = points[:, 0]
    py = points[:, 1]
    pz = points[:, 2]
    n = points.shape[0]
    c = np.empty(3, dtype=np.int64)
    for a in range(3):
        v = int(np.floor((q[a] - lo[a]) / cell))
        c[a] = min(max(v, 0), g - 1)
    for j in range(k):
        best_d[j] = np.inf
        best_i[j] = -1
    cells_seen = 0
    r = 0
    while True:
        blo = np.empty(3, dtype=np.int64)
        bhi = np.empty(3, dtype=np.int64)
        for a in range(3):
            blo[a] = max(c[a] - r, 0)
            bhi[a] = min(c[a] + r, g - 1)
        shell = (bhi[0] - blo[0] + 1) * (bhi[1] - blo[1] + 1) * (bhi[2] - blo[2] + 1) - cells_seen
        if cells_seen + shell > n // 4 + 27:
            # far from every point the ring walk costs more than a linear scan
            for j in range(k):
                best_d[j] = np.inf
                best_i[j] = -1
            for i in range(n):
                dx = q[0] - px[i]
                dy = q[1] - py[i]
                dz = q[2] - pz[i]
                d2 = dx * dx + dy * dy + dz * dz
                # best_d starts at +inf and best_i at -1, so unfilled slots always lose
                if d2 < best_d[k - 1] or (d2 == best_d[k - 1] and i < best_i[k - 1]):
                    _insert(best_d, best_i, k, d2, i)
            return
        for i0 in range(blo[0], bhi[0] + 1):
            for i1 in range(blo[1], bhi[1] + 1):
                on_ring = abs(i0 - c[0]) == r or abs(i1 - c[1]) == r
                i2 = blo[2]
                while i2 <= bhi[2]:
                    if on_ring or abs(i2 - c[2]) == r:
                        cid = (i0 * g + i1) * g + i2
                        for s in range(start[cid], start[cid + 1]):
                            j = order[s]
                            dx = q[0] - px[j]
                            dy = q[1] - py[j]
                            dz = q[2] - pz[j]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best_d[k - 1] or (d2 == best_d[k - 1] and j < best_i[k - 1]):
                                _insert(best_d, best_i, k, d2, j)
                    if on_ring or i2 >= c[2] + r:
                        i2 += 1
                    else:
                        # jump across the interior straight to the far face of the ring
                        i2 = max(i2 + 1, c[2] + r)
        cells_seen += shell
        # lower bound on the distance to any point outside the visited block
        bound = np.inf
        for a in range(3):
            if blo[a] > 0:
                bound = min(bound, q[a] - (lo[a] + blo[a] * cell))
            if bhi[a] < g - 1:
                bound = min(bound, lo[a] + (bhi[a] + 1) * cell - q[a])
        if bound == np.inf:
            return
        if bound > _MARGIN:
            b = bound - _MARGIN
            if best_d[k - 1] < b * b:
                return
        r += 1


@numba.njit(cache=True, parallel=True)
def _query_batch(queries, points, start, order, lo, cell, g, k, out_d2, out_i):
    for qi in numba.prange(queries.shape[0]):
        bd = np.empty(k)
        bi = np.empty(k, dtype=np.int64)
        _query_one(queries[qi], points, start, order, lo, cell, g, k, bd, bi)
        for j in range(k):
            out_d2[qi, j] = bd[j]
            out_i[qi, j] = bi[j]


class GridIndex:
    """Uniform-grid spatial index; immutable snapshot of the cloud it was built on."""

    def __init__(self, points: np.ndarray, bound: float | None = None, cells_per_axis: int = 32):
        points = np.array(points, dtype=np.float64, order="C")
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError("index needs a non-empty (P, 3) point array")
        if not np.isfinite(points).all():
            raise ValueError("point positions must be finite")
        points.setflags(write=False)
        self.points = points
        if bound is None:
            lo = points.min(axis=0)
            extent = float((points.max(axis=0) - lo).max())
        else:
            lo = np.full(3, -float(bound))
            extent = 2.0 * float(bound)
        self.g = int(cells_per_axis)
        self.cell = max(extent, 1e-12) / self.g
        self.lo = lo.astype(np.float64)
        t0 = time.perf_counter()
        self.start, self.order = _build(points, self.lo, self.cell, self.g)
        self.build_seconds = time.perf_counter() - t0

    def __len__(self):
        return len(self.points)

    def query(self, x, k: int) -> KnnResult:
        return self.query_batch(np.asarray(x, dtype=np.float64).reshape(1, 3), k)[0]

    def query_batch(self, xs: np.ndarray, k: int, radius_cap: float | None = None) -> BatchKnn:
        xs = np.ascontiguousarray(np.asarray(xs, dtype=np.float64).reshape(-1, 3))
        if not 1 <= k <= len(self.points):
            raise ValueError(f"k={k} must lie in [1, {len(self.points)}]")
        d2 = np.empty((len(xs), k))
        idx = np.empty((len(xs), k), dtype=np.int64)
        if len(xs):
            _query_batch(xs, self.points, self.start, self.order, self.lo, self.cell, self.g, k, d2, idx)
        dist = np.sqrt(d2)
        if radius_cap is not None:
            far = dist > radius_cap
            idx[far] = -1
            dist[far] = np.inf
        return BatchKnn(idx, dist)


class BruteIndex:
    """Same interface as :class:`GridIndex`, backed by the reference search."""

    def __init__(self, points: np.ndarray, **_):
        self.points = np.array(points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("index needs a non-empty (P, 3) point array")

    def __len__(self):
        return len(self.points)

    def query(self, x, k):
        return self.query_batch(np.reshape(x, (1, 3)), k)[0]

    def query_batch(self, xs, k, radius_cap=None):
        res = brute_force_knn(self.points, np.reshape(xs, (-1, 3)), k)
        return _apply_cap(res, radius_cap)


class KDTreeIndex:
    """scipy cKDTree alternative, used only by the benchmark.

    cKDTree forms distances its own way, so last-bit agreement with the grid
    is not guaranteed.
    """

    def __init__(self, points: np.ndarray, **_):
        from scipy.spatial import cKDTree
        self.points = np.array(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, x, k):
        return self.query_batch(np.reshape(x, (1, 3)), k)[0]

    def query_batch(self, xs, k, radius_cap=None):
        d, i = self.tree.query(np.reshape(xs, (-1, 3)), k=k)
        d, i = np.reshape(d, (-1, k)), np.reshape(i, (-1, k)).astype(np.int64)
        order = np.lexsort((i, d), axis=1)
        res = BatchKnn(np.take_along_axis(i, order, 1), np.take_along_axis(d, order, 1))
        return _apply_cap(res, radius_cap)


def _apply_cap(res: BatchKnn, cap):
    if cap is None:
        return res
    idx, dist = res.indices.copy(), res.distances.copy()
    far = dist > cap
    idx[far] = -1
    dist[far] = np.inf
    return BatchKnn(idx, dist)


INDEX_KINDS = {"grid": GridIndex, "brute": BruteIndex, "kdtree": KDTreeIndex}


def build_index(cloud: np.ndarray, bound: float | None = None, kind: str = "grid"):
    return INDEX_KINDS[kind](cloud, bound=bound)


def knn_query(index, x, k: int) -> KnnResult:
    return index.query(x, k)


def knn_query_batch(index, xs, k: int, radius_cap: float | None = None) -> BatchKnn:
    return index.query_batch(xs, k, radius_cap=radius_cap)


def set_threads(n: int):
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
