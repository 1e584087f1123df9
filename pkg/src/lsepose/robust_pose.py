"""Mask-constrained LO-RANSAC over embedding correspondences.

Each iteration solves PnP on a small random sample (one candidate 3D point for
each of n distinct pixels), scores the pose by mask overlap and embedding
agreement, and polishes every new best on its inliers.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _ransac_kernel as rk
from .pnp import refine_pose, solve_pnp
from .projective import Pose, SceneMaps, iou, projected_bbox, render_into

FORMAT_VERSION = 1
CANDIDATE_RULES = ("rank", "uniform")
SCORE_GATES = ("inliers", "all")


@dataclass(frozen=True)
class RansacConfig:
    """Robust estimation settings.

    :param candidate_rule: ``"rank"`` draws a pixel's k-th best candidate with
        probability proportional to ``1/k**2``; ``"uniform"`` ignores the ranking.
    :param score_gate: ``"inliers"`` only renders and scores a hypothesis whose
        inlier count beats every previously scored one; ``"all"`` scores each
        hypothesis that passes the sample pre-test.
    :param gate_pixels: size of the fixed random pixel subset the gate counts inliers on.
    :param lo_rounds: refine/re-collect rounds per local optimisation.
    :param pixel_pool: samples are drawn from the pixels whose best/second-best
        embedding distance ratio is within this quantile (ties included);
        1.0 samples all pixels uniformly.
    """

    n_iter: int = 2000
    sample_min: int = 6
    sample_max: int = 10
    min_score: float = 0.3
    inlier_threshold: float = 5.0
    alpha: float = 0.5
    seed: int = 0
    candidate_rule: str = "rank"
    score_gate: str = "inliers"
    lo_rounds: int = 3
    gate_pixels: int = 400
    pixel_pool: float = 0.25

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not 4 <= self.sample_min <= self.sample_max:
            raise ValueError("sample range must satisfy 4 <= min <= max")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.min_score <= 1.0:
            raise ValueError("min_score must lie in [0, 1]")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")
        if self.candidate_rule not in CANDIDATE_RULES:
            raise ValueError(f"candidate_rule must be one of {CANDIDATE_RULES}")
        if self.score_gate not in SCORE_GATES:
            raise ValueError(f"score_gate must be one of {SCORE_GATES}")
        if self.gate_pixels < 1:
            raise ValueError("gate_pixels must be >= 1")
        if not 0.0 < self.pixel_pool <= 1.0:
            raise ValueError("pixel_pool must lie in (0, 1]")
        if self.lo_rounds < 0:
            raise ValueError("lo_rounds must be >= 0")


@dataclass
class PoseHypothesis:
    pose: Pose
    score: float
    model_id: str
    mask_id: int
    inlier_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    inlier_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def to_record(self):
        return {"model_id": self.model_id, "mask_id": int(self.mask_id), "score": float(self.score),
                **self.pose.to_record()}

    @classmethod
    def from_record(cls, rec):
        return cls(Pose.from_record(rec), float(rec["score"]), str(rec["model_id"]), int(rec["mask_id"]))


def hypotheses_to_json(hyps):
    return {"format_version": FORMAT_VERSION, "hypotheses": [h.to_record() for h in hyps]}


def hypotheses_from_json(obj):
    return [PoseHypothesis.from_record(r) for r in obj["hypotheses"]]


# ---------------------------------------------------------------------------
# scoring

def _bbox_of(mask):
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if len(ys) == 0:
        return None
    return xs[0], ys[0], xs[-1] + 1, ys[-1] + 1


class PoseScorer:
    """Scores poses of one model against one detected mask.

    Caches the mask box so repeated scoring only renders a crop covering the
    mask and the projected model.
    """

    def __init__(self, mesh, cam, mask, lse_map, index, alpha=0.5):
        self.mesh, self.cam, self.index, self.alpha = mesh, cam, index, alpha
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != cam.shape:
            raise ValueError("mask does not match the camera")
        self.values = lse_map.values
        self.mask_box = _bbox_of(self.mask)

    def __call__(self, pose):
        x0, y0, x1, y1 = projected_bbox(self.mesh, pose, self.cam)
        if self.mask_box is not None:
            mx0, my0, mx1, my1 = self.mask_box
            if x1 <= x0 or y1 <= y0:
                x0, y0, x1, y1 = mx0, my0, mx1, my1
            else:
                x0, y0, x1, y1 = min(x0, mx0), min(y0, my0), max(x1, mx1), max(y1, my1)
        if x1 <= x0 or y1 <= y0:
            return 0.0
        crop = SceneMaps(np.full((y1 - y0, x1 - x0), np.inf), np.zeros((y1 - y0, x1 - x0), np.int32),
                         np.full((y1 - y0, x1 - x0, 3), np.nan))
        render_into(crop, self.mesh, pose, self.cam, 1, origin=(x0, y0))
        rendered = crop.ids == 1
        det = self.mask[y0:y1, x0:x1]
        overlap_iou = iou(rendered, det)
        lse = self.values[y0:y1, x0:x1]
        both = rendered & det & np.all(np.isfinite(lse), axis=-1)
        agreement = 0.0
        if both.any():
            ids, _ = self.index.nearest_entries(crop.object_points[both])
            diff = lse[both].astype(np.float64) - self.index.vectors[ids]
            agreement = float(np.mean(np.exp(-0.5 * np.einsum("ij,ij->i", diff, diff))))
        return float(self.alpha * overlap_iou + (1.0 - self.alpha) * agreement)


def score_pose(pose, mesh, cam, mask, lse_map, index, cfg=RansacConfig()):
    """``alpha * IoU + (1 - alpha) * E`` in [0, 1].

    E is the mean of ``exp(-d**2 / 2)`` over pixels both rendered and detected
    that carry an embedding, ``d`` being the distance between the pixel's
    embedding and that of the model point rendered there. E = 0 without overlap.
    """
    return PoseScorer(mesh, cam, mask, lse_map, index, cfg.alpha)(pose)


# ---------------------------------------------------------------------------
# estimation

def _cum_weights(max_count, rule):
    cum = np.ones((max_count + 1, max(max_count, 1)))
    for c in range(1, max_count + 1):
        w = 1.0 / np.arange(1, c + 1) ** 2 if rule == "rank" else np.ones(c)
        cum[c, :c] = np.cumsum(w) / w.sum()
        cum[c, c - 1] = 1.0
    return cum


def _best_candidates(pose, corr, cam):
    """Per pixel: reprojection error of the best candidate and that candidate's row."""
    pc = pose.apply(corr.points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = cam.fx * pc[:, 0] / z + cam.cx - corr.pixels[corr.pixel_of_candidate, 0]
        dv = cam.fy * pc[:, 1] / z + cam.cy - corr.pixels[corr.pixel_of_candidate, 1]
        err = np.sqrt(du * du + dv * dv)
    err[~(z > 0)] = np.inf
    order = np.lexsort((err, corr.pixel_of_candidate))
    best = order[corr.offsets[:-1]]
    return err[best], best


def inliers_of(pose, corr, cam, threshold):
    """``(pixels, points)`` of every pixel whose best candidate reprojects under ``threshold``."""
    if len(corr) == 0:
        return np.zeros((0, 2)), np.zeros((0, 3))
    err, best = _best_candidates(pose, corr, cam)
    keep = err < threshold
    return corr.pixels[keep].astype(np.float64), corr.points[best[keep]]


def _local_optimisation(pose, corr, cam, cfg, min_points):
    n_prev = -1
    for _ in range(cfg.lo_rounds):
        px, pts = inliers_of(pose, corr, cam, cfg.inlier_threshold)
        if len(px) < min_points or len(px) <= n_prev:
            break
        n_prev = len(px)
        pose = refine_pose(pose, px, pts, cam)
    return pose


def sampling_pool(corr, quantile):
    """Rows of the pixels RANSAC samples from, ordered by row.

    A pixel's reliability is the ratio of its best to its second-best
    embedding distance (0 for a single candidate); the pool keeps every pixel
    at or below the ``quantile`` of that ratio.
    """
    n = len(corr)
    if quantile >= 1.0 or n == 0:
        return np.arange(n)
    o = corr.offsets
    d0 = corr.distances[o[:-1]]
    second = np.minimum(o[:-1] + 1, len(corr.distances) - 1)
    d1 = np.where(corr.counts > 1, corr.distances[second], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d1 > 0, d0 / d1, 1.0)
    return np.flatnonzero(ratio <= np.quantile(ratio, quantile))


def mask_rng(seed, mask_id, model_id):
    return np.random.default_rng([int(seed), int(mask_id), zlib.crc32(str(model_id).encode("utf-8"))])


def estimate_pose_for_mask(corr, mesh, index, cam, mask, lse_map, cfg=RansacConfig(), mask_id=1, trace=None):
    """LO-RANSAC pose of ``index.model_id`` inside one mask.

    :param corr: correspondences already restricted to the mask.
    :param trace: optional list receiving ``(iteration, best score)`` after every iteration.
    :return: a :class:`PoseHypothesis`, or ``None`` for no detection.
    """
    if len(corr) < cfg.sample_min:
        return None
    rng = mask_rng(cfg.seed, mask_id, index.model_id)
    pool = sampling_pool(corr, cfg.pixel_pool)
    if len(pool) < cfg.sample_max:
        pool = np.arange(len(corr))
    sp = corr.select(pool)
    smax = min(cfg.sample_max, len(sp))
    smin = min(cfg.sample_min, smax)
    U = rng.random((cfg.n_iter, 1 + 2 * smax))
    pixels = np.ascontiguousarray(sp.pixels, dtype=np.int64)
    offsets = np.ascontiguousarray(sp.offsets, dtype=np.int64)
    points = np.ascontiguousarray(sp.points, dtype=np.float64)
    cumw = _cum_weights(int(sp.counts.max()), cfg.candidate_rule)
    gate_rows = np.arange(len(corr))
    if len(corr) > cfg.gate_pixels:
        gate_rows = np.sort(rng.choice(len(corr), cfg.gate_pixels, replace=False))
    g = corr.select(gate_rows)
    gpix, goff, gpts = (np.ascontiguousarray(g.pixels, dtype=np.int64), np.ascontiguousarray(g.offsets),
                        np.ascontiguousarray(g.points, dtype=np.float64))
    Rs, ts, status, n_inl = rk.generate(U, smin, smax, pixels, offsets, points, cumw, gpix, goff, gpts,
                                        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
                                        float(cfg.inlier_threshold))
    scorer = PoseScorer(mesh, cam, mask, lse_map, index, cfg.alpha)
    best_pose, best_score, gate = None, -np.inf, -1
    for i in range(cfg.n_iter):
        if status[i] == rk.OK and (cfg.score_gate == "all" or n_inl[i] > gate):
            pose = Pose(Rs[i], ts[i], check=False)
            s = scorer(pose)
            gate = max(gate, int(n_inl[i]))
            if s > best_score:
                best_pose, best_score = pose, s
                lo = _local_optimisation(pose, corr, cam, cfg, smin)
                if lo is not pose:
                    s_lo = scorer(lo)
                    gate = max(gate, rk.count_inliers(lo.R, lo.t, gpix, goff, gpts, cam.fx, cam.fy,
                                                      cam.cx, cam.cy, float(cfg.inlier_threshold)))
                    if s_lo > best_score:
                        best_pose, best_score = lo, s_lo
        if trace is not None:
            trace.append((i, best_score if best_pose is not None else 0.0))
    if best_pose is None:
        return None
    final = _local_optimisation(best_pose, corr, cam, cfg, smin)
    if final is not best_pose:
        s_final = scorer(final)
        if s_final >= best_score:
            best_pose, best_score = final, s_final
    if best_score < cfg.min_score:
        return None
    px, pts = inliers_of(best_pose, corr, cam, cfg.inlier_threshold)
    return PoseHypothesis(best_pose, float(best_score), index.model_id, int(mask_id), px, pts)


def _one(mask_id, mask, corr, mesh, index, cam, lse_map, cfg):
    return estimate_pose_for_mask(corr.restrict(mask), mesh, index, cam, mask, lse_map, cfg, mask_id)


def estimate_all(masks, correspondences, meshes, indices, cam, lse_map, cfg=RansacConfig(), threads=1):
    """Best-scoring model and pose for every mask; at most one hypothesis per mask.

    :param masks: ``{mask_id: bool (H, W)}``.
    :param correspondences: ``{model_id: CorrespondenceSet}`` over the whole image.
    :param meshes: ``{model_id: SurfaceMesh}``; ``indices`` likewise.
    :return: hypotheses ordered by mask id. Ties between models go to the
        model id that sorts first.
    """
    models = sorted(correspondences)
    jobs = [(mid, m, correspondences[model], meshes[model], indices[model])
            for mid, m in sorted(masks.items()) for model in models]
    if threads > 1 and len(jobs) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=threads)(delayed(_one)(mid, m, c, me, ix, cam, lse_map, cfg)
                                           for mid, m, c, me, ix in jobs)
    else:
        results = [_one(mid, m, c, me, ix, cam, lse_map, cfg) for mid, m, c, me, ix in jobs]
    best = {}
    for (mid, *_), hyp in zip(jobs, results):
        if hyp is not None and (mid not in best or hyp.score > best[mid].score):
            best[mid] = hyp
    return [best[mid] for mid in sorted(best)]


__all__ = [
    "RansacConfig", "PoseHypothesis", "PoseScorer", "score_pose", "estimate_pose_for_mask", "estimate_all",
    "inliers_of", "solve_pnp", "refine_pose", "hypotheses_to_json", "hypotheses_from_json",
]
