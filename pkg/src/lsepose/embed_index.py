"""Per-model embedding database, exact kNN matching and 2D-3D correspondences."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFrameError, FormatError
from ._kernels import dists_to, neighborhood_moments, rank_rows, scatter_matrices, suppress_rows
from .lse_core import (
    LseParams, LseVector, NormalizationStats, fit_normalization, frames_from_scatter_batch, normalize_array,
)
from .mesh_geom import PointSamples

DEFAULT_K = 100
DEFAULT_THRESHOLD = 0.5


class LseIndex:
    """Normalised embeddings of one model's surface samples.

    Entries whose local frame was degenerate are dropped at build time;
    ``stable`` records the frame stability flag of the kept ones.
    """

    def __init__(self, model_id, samples, raw, stable, stats, params):
        self.model_id = str(model_id)
        self.samples = samples
        self.raw = np.asarray(raw, dtype=np.float64)
        self.stable = np.asarray(stable, dtype=bool)
        self.stats = stats
        self.params = params
        self.vectors = normalize_array(self.raw, stats)
        if len(self.vectors) == 0:
            raise ValueError("index needs at least one entry")
        for a in (self.raw, self.stable, self.vectors):
            a.flags.writeable = False

    def __len__(self):
        return len(self.vectors)

    @property
    def positions(self):
        return self.samples.positions

    @cached_property
    def vector_tree(self):
        return cKDTree(self.rotated(self.vectors), leafsize=64)

    @cached_property
    def position_tree(self):
        return cKDTree(self.positions)

    @cached_property
    def _pca(self):
        """Mean and principal axes of the vectors; the tree is built in this basis,
        where the first few coordinates carry most of the spread."""
        X = self.vectors
        mean = X.mean(axis=0)
        _, _, Vt = np.linalg.svd(X - mean, full_matrices=False)
        return mean, Vt.T

    def rotated(self, Q):
        mean, axes = self._pca
        return (np.asarray(Q, dtype=np.float64) - mean) @ axes

    def entry_vector(self, i):
        return LseVector(self.vectors[i], True, self.stats.model_id)

    def nearest_entries(self, points):
        """Index of the entry nearest to each 3D object-frame point, and its distance."""
        d, i = self.position_tree.query(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return i, d

    def __eq__(self, other):
        if not isinstance(other, LseIndex):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.params == other.params
            and np.array_equal(self.samples.positions, other.samples.positions)
            and np.array_equal(self.samples.normals, other.samples.normals)
            and np.array_equal(self.samples.triangle_ids, other.samples.triangle_ids)
            and np.array_equal(self.raw, other.raw)
            and np.array_equal(self.stable, other.stable)
            and np.array_equal(self.stats.mean, other.stats.mean)
            and np.array_equal(self.stats.std, other.stats.std)
            and np.array_equal(self.stats.zero_variance, other.stats.zero_variance)
        )


def compute_raw_embeddings(samples, params):
    """Raw LSE of every sample against all others.

    :return: ``(raw, stable, ok)`` where ``ok`` marks non-degenerate frames.
    """
    pos = samples.positions
    r = params.radius_model
    C, _ = scatter_matrices(pos, r)
    R, stable, ok = frames_from_scatter_batch(C, samples.normals, params.degeneracy_gap)
    raw = neighborhood_moments(pos, R, r, params.unit_scale_to_cm, params.sigma, params.exponents, ok)
    return raw, stable, ok


def build_index(samples, params=LseParams(), model_id="model"):
    """Embed every sample, fit per-model normalisation and store the result."""
    if len(samples) == 0:
        raise ValueError("no samples")
    raw, stable, ok = compute_raw_embeddings(samples, params)
    if not ok.any():
        raise DegenerateFrameError("every local frame is degenerate")
    kept = samples[np.flatnonzero(ok)]
    stats = fit_normalization(raw[ok], model_id) if ok.sum() >= 2 else NormalizationStats(
        raw[ok][0], np.ones(params.dim), model_id, np.ones(params.dim, bool)
    )
    return LseIndex(model_id, kept, raw[ok], stable[ok], stats, params)


# ---------------------------------------------------------------------------
# nearest neighbours

def _dists(X, q):
    return dists_to(np.ascontiguousarray(X, dtype=np.float64), np.asarray(q, dtype=np.float64).reshape(1, -1))


def _rank(ids, dists, unstable):
    """Order by distance, unstable after stable on ties, then entry id."""
    return np.lexsort((ids, unstable[ids], dists))


def knn_brute(index, query, k):
    """Reference linear scan."""
    q = _query_values(query)
    d = _dists(index.vectors, q)
    ids = np.arange(len(d))
    order = _rank(ids, d, ~index.stable)[:k]
    return ids[order], d[order]


def _query_values(query):
    if isinstance(query, LseVector):
        if not query.normalized:
            raise ValueError("knn queries must be normalised vectors")
        return query.values
    return np.asarray(query, dtype=np.float64)


def _finish_rows(index, Q, cand, bound, k):
    """Exact distances and ranking for candidate lists, with a brute fallback per row.

    ``cand[row]`` must hold every entry strictly closer than ``bound[row]``.
    """
    n = len(index)
    kq = min(k, n)
    out_i, out_d = rank_rows(index.vectors, np.ascontiguousarray(Q), np.ascontiguousarray(cand),
                             (~index.stable).astype(np.int64), kq)
    if cand.shape[1] < n:
        # the candidate list is only guaranteed complete below its own bound
        for r in np.flatnonzero(~(out_d[:, kq - 1] < bound * (1 - 1e-9) - 1e-12)):
            out_i[r], out_d[r] = knn_brute(index, Q[r], k)
    return out_i, out_d


def _knn_tree_rows(index, Q, k):
    # repeated query vectors (common in oracle maps) are answered once
    U, inverse = np.unique(Q, axis=0, return_inverse=True)
    if len(U) < len(Q):
        ids, d = _knn_tree_rows(index, U, k)
        inverse = inverse.reshape(-1)
        return ids[inverse], d[inverse]
    kk = min(len(index), k + 1)
    tree_d, tree_i = index.vector_tree.query(index.rotated(Q), k=kk)
    return _finish_rows(index, Q, tree_i.reshape(len(Q), kk), tree_d.reshape(len(Q), kk)[:, -1], k)


def knn_query(index, query, k=DEFAULT_K, method="tree"):
    """The ``k`` entries nearest to ``query`` in embedding space, ascending.

    :return: ``(entry_ids, distances)``; fewer than ``k`` when the index is smaller.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if method == "brute":
        return knn_brute(index, query, k)
    ids, d = knn_query_batch(index, _query_values(query)[None, :], k, method)
    return ids[0], d[0]


KNN_METHODS = ("tree", "brute")


def knn_query_batch(index, queries, k=DEFAULT_K, method="tree"):
    """Row-wise :func:`knn_query`.

    ``"tree"`` draws candidates from a k-d tree, ``"brute"`` is the linear
    reference; both return identical results.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if method not in KNN_METHODS:
        raise ValueError(f"method must be one of {KNN_METHODS}")
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, index.vectors.shape[1])
    if method == "brute":
        res = [knn_brute(index, q, k) for q in Q]
        return np.array([r[0] for r in res]), np.array([r[1] for r in res])
    return _knn_tree_rows(index, Q, k)


def suppress_clusters(candidate_ids, positions, radius):
    """Greedy spatial non-maximum suppression over a distance-sorted candidate list.

    The best remaining candidate is kept and every later candidate within
    ``radius`` of it (3D distance) is discarded; repeated until the list is empty.

    :param candidate_ids: entry ids sorted by ascending embedding distance.
    :param positions: (N, 3) entry positions indexed by the ids.
    :return: positions into ``candidate_ids`` of the survivors, in order.
    """
    ids = np.asarray(candidate_ids)
    P = np.asarray(positions, dtype=np.float64)[ids]
    alive = np.ones(len(ids), dtype=bool)
    kept = []
    r2 = radius * radius
    while True:
        rest = np.flatnonzero(alive)
        if len(rest) == 0:
            break
        head = rest[0]
        kept.append(head)
        d = P[rest] - P[head]
        alive[rest[(d * d).sum(axis=1) <= r2]] = False
    return np.array(kept, dtype=np.int64)


# ---------------------------------------------------------------------------
# correspondences

def discriminative_mask(lse_map, threshold=DEFAULT_THRESHOLD):
    """Foreground pixels whose largest absolute normalised LSE value reaches ``threshold``."""
    values = lse_map.values
    fg = np.all(np.isfinite(values), axis=-1)
    peak = np.max(np.abs(np.where(fg[..., None], values, 0.0)), axis=-1)
    return fg & (peak >= threshold)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Candidate 3D points per image location.

    ``pixels[i]`` is an ``(x, y)`` pixel whose candidates are
    ``entries[offsets[i]:offsets[i+1]]`` sorted by embedding distance.
    """

    model_id: str
    pixels: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    points: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.pixels)

    @property
    def counts(self):
        return np.diff(self.offsets)

    def candidates(self, i):
        s, e = self.offsets[i], self.offsets[i + 1]
        return self.points[s:e], self.distances[s:e]

    @property
    def pixel_of_candidate(self):
        return np.repeat(np.arange(len(self.pixels)), self.counts)

    def restrict(self, mask):
        """Sub-set of pixels that fall inside a boolean image mask."""
        mask = np.asarray(mask, dtype=bool)
        if len(self.pixels) == 0:
            return self
        keep = mask[self.pixels[:, 1], self.pixels[:, 0]]
        return self.select(np.flatnonzero(keep))

    def select(self, rows):
        counts = self.counts[rows]
        starts = self.offsets[rows]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        cand = np.repeat(starts - offsets[:-1], counts) + np.arange(offsets[-1])
        return CorrespondenceSet(
            self.model_id, self.pixels[rows], offsets, self.entries[cand], self.points[cand], self.distances[cand]
        )

    @staticmethod
    def empty(model_id):
        return CorrespondenceSet(
            model_id, np.zeros((0, 2), np.int64), np.zeros(1, np.int64),
            np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0),
        )


def build_correspondences(lse_map, masks, index, k=DEFAULT_K, suppression_radius=None,
                          threshold=DEFAULT_THRESHOLD, method="tree"):
    """Match every discriminative in-mask pixel against ``index``.

    The map is expected in normalised embedding space. Each query's kNN list is
    thinned by :func:`suppress_clusters` so the candidates of one pixel are
    spread over the model.
    """
    H, W = lse_map.values.shape[:2]
    union = np.zeros((H, W), dtype=bool)
    for m in (masks.values() if isinstance(masks, dict) else masks):
        m = np.asarray(m, dtype=bool)
        if m.shape != (H, W):
            raise ValueError(f"mask shape {m.shape} does not match map {(H, W)}")
        union |= m
    if lse_map.values.shape[-1] != index.vectors.shape[1]:
        raise ValueError("LSE map channel count does not match the index")
    radius = index.params.radius_model if suppression_radius is None else suppression_radius
    ys, xs = np.nonzero(discriminative_mask(lse_map, threshold) & union)
    if len(xs) == 0:
        return CorrespondenceSet.empty(index.model_id)
    Q = lse_map.values[ys, xs].astype(np.float64)
    ids, dists = knn_query_batch(index, Q, k, method)
    pos = index.positions
    keep = suppress_rows(ids, np.full(len(ids), ids.shape[1], np.int64), pos, float(radius) ** 2)
    entries = ids[keep]
    offsets = np.concatenate([[0], np.cumsum(keep.sum(axis=1))]).astype(np.int64)
    return CorrespondenceSet(
        index.model_id, np.stack([xs, ys], axis=1).astype(np.int64), offsets,
        entries, pos[entries], dists[keep],
    )


# ---------------------------------------------------------------------------
# serialisation
#
# Layout (little-endian):
#   b"LSEI", u32 version
#   f64 radius, f64 sigma, f64 degeneracy_gap, f64 unit_scale_to_cm
#   u32 n_exp, n_exp * (u32 i, u32 j, u32 k)
#   u32 len, utf-8 model id
#   u32 dim, f64[dim] mean, f64[dim] std, u8[dim] zero-variance flags
#   u32 n, f64[n*3] positions, f64[n*3] normals, i64[n] triangle ids,
#   f64[n*dim] raw, u8[n] stable

INDEX_MAGIC = b"LSEI"
INDEX_VERSION = 1


def dump_index(index):
    p = index.params
    out = [INDEX_MAGIC, struct.pack("<I", INDEX_VERSION)]
    out.append(struct.pack("<4d", p.radius, p.sigma, p.degeneracy_gap, p.unit_scale_to_cm))
    out.append(struct.pack("<I", len(p.exponents)))
    out.extend(struct.pack("<3I", *e) for e in p.exponents)
    mid = index.model_id.encode("utf-8")
    out.append(struct.pack("<I", len(mid)) + mid)
    dim = p.dim
    out.append(struct.pack("<I", dim))
    out.append(index.stats.mean.astype("<f8").tobytes())
    out.append(index.stats.std.astype("<f8").tobytes())
    out.append(index.stats.zero_variance.astype("u1").tobytes())
    out.append(struct.pack("<I", len(index)))
    out.append(index.samples.positions.astype("<f8").tobytes())
    out.append(index.samples.normals.astype("<f8").tobytes())
    out.append(index.samples.triangle_ids.astype("<i8").tobytes())
    out.append(index.raw.astype("<f8").tobytes())
    out.append(index.stable.astype("u1").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def load_index_bytes(data):
    r = _Reader(data)
    if r.take(4) != INDEX_MAGIC:
        raise FormatError("not an LSE index (bad magic)")
    (version,) = r.unpack("<I")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    radius, sigma, gap, scale = r.unpack("<4d")
    (n_exp,) = r.unpack("<I")
    exps = tuple(r.unpack("<3I") for _ in range(n_exp))
    params = LseParams(radius, sigma, exps, gap, scale)
    (ln,) = r.unpack("<I")
    model_id = r.take(ln).decode("utf-8")
    (dim,) = r.unpack("<I")
    mean = r.array("<f8", dim)
    std = r.array("<f8", dim)
    zero = r.array("u1", dim).astype(bool)
    stats = NormalizationStats(mean, std, model_id, zero)
    (n,) = r.unpack("<I")
    pos = r.array("<f8", n * 3).reshape(n, 3)
    nrm = r.array("<f8", n * 3).reshape(n, 3)
    tid = r.array("<i8", n)
    raw = r.array("<f8", n * dim).reshape(n, dim)
    stable = r.array("u1", n).astype(bool)
    if r.pos != len(data):
        raise FormatError("trailing bytes after index payload")
    return LseIndex(model_id, PointSamples(pos, nrm, tid), raw, stable, stats, params)


def save_index(path, index):
    with open(path, "wb") as fh:
        fh.write(dump_index(index))


def load_index(path):
    with open(path, "rb") as fh:
        return load_index_bytes(fh.read())
