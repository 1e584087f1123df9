"""Pose-error metrics: ADD, ADI, the diameter test and visible surface discrepancy."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .projective import SceneMaps, render

FORMAT_VERSION = 1


def _points(samples):
    P = getattr(samples, "positions", samples)
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("no model points")
    return P


def add_error(samples, gt, est):
    """Mean distance between corresponding model points under the two poses."""
    P = _points(samples)
    d = gt.apply(P) - est.apply(P)
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", d, d))))


def adi_error(samples, gt, est):
    """Mean distance from each ground-truth-posed point to the closest estimated-posed point."""
    P = _points(samples)
    d, _ = cKDTree(est.apply(P)).query(gt.apply(P))
    return float(np.mean(d))


def add_correct(error, diameter, symmetric=False):
    """``error < 0.1 * diameter``; pass the ADI error for symmetric objects."""
    if not diameter > 0:
        raise ValueError("diameter must be positive")
    return bool(error < 0.1 * diameter)


@dataclass(frozen=True)
class VsdParams:
    """:param tau: misalignment tolerance in millimetres, also used as the occlusion tolerance.
    :param mm_per_unit: millimetres per model unit.
    :param min_visibility: objects at or below this visible fraction are left out of recalls.
    """

    tau: float = 20.0
    threshold: float = 0.3
    min_visibility: float = 0.10
    mm_per_unit: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        if not 0 <= self.min_visibility <= 1:
            raise ValueError("min_visibility must lie in [0, 1]")
        if not self.mm_per_unit > 0:
            raise ValueError("mm_per_unit must be > 0")

    @property
    def tau_model(self):
        return self.tau / self.mm_per_unit


def _depth(m):
    return np.asarray(m.depth if isinstance(m, SceneMaps) else m, dtype=np.float64)


def vsd_error(depth_gt, depth_est, depth_scene, params=VsdParams()):
    """Visible surface discrepancy between two single-object renders.

    An object pixel is visible when its depth is at most the scene depth plus
    tau. The error is the fraction of pixels visible in either render that are
    not visible in both with depths closer than tau.

    :return: ``(error, visibility)``; visibility is the visible fraction of the ground-truth render.
    """
    Sg, Se, D = _depth(depth_gt), _depth(depth_est), _depth(depth_scene)
    if not Sg.shape == Se.shape == D.shape:
        raise ValueError("depth maps differ in shape")
    tau = params.tau_model
    rend_g = np.isfinite(Sg)
    vis_g = rend_g & (Sg <= D + tau)
    vis_e = np.isfinite(Se) & (Se <= D + tau)
    union = vis_g | vis_e
    n_rend = np.count_nonzero(rend_g)
    visibility = np.count_nonzero(vis_g) / n_rend if n_rend else 0.0
    n_union = np.count_nonzero(union)
    if n_union == 0:
        return 1.0, float(visibility)
    both = vis_g & vis_e
    good = both & (np.abs(np.where(both, Sg, 0.0) - np.where(both, Se, 0.0)) < tau)
    return float((n_union - np.count_nonzero(good)) / n_union), float(visibility)


@dataclass
class MetricRecord:
    scene_id: str
    object_id: int
    model_id: str
    detected: bool
    add: float | None
    adi: float | None
    add_correct: bool
    vsd: float
    vsd_correct: bool
    visibility: float


@dataclass
class MetricReport:
    records: list
    add_recall: float
    vsd_recall: float
    n_evaluated: int

    def to_json(self):
        return {"format_version": FORMAT_VERSION, "add_recall": self.add_recall, "vsd_recall": self.vsd_recall,
                "n_records": len(self.records), "n_evaluated": self.n_evaluated,
                "records": [asdict(r) for r in self.records]}

    CSV_COLUMNS = ("scene", "object", "model", "detected", "add", "adi", "vsd", "visibility",
                   "add_correct", "vsd_correct")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        fmt = lambda v: "" if v is None else repr(float(v))
        for r in self.records:
            w.writerow([r.scene_id, r.object_id, r.model_id, int(r.detected), fmt(r.add), fmt(r.adi), fmt(r.vsd),
                        fmt(r.visibility), int(r.add_correct), int(r.vsd_correct)])
        return buf.getvalue()

    def write(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())


def aggregate(records, params=VsdParams()):
    """Recalls over records whose visibility exceeds the floor; misses count as incorrect."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    used = [r for r in records if r.visibility > params.min_visibility]
    n = len(used)
    add_r = sum(r.add_correct for r in used) / n if n else 0.0
    vsd_r = sum(r.vsd_correct for r in used) / n if n else 0.0
    return MetricReport(records, float(add_r), float(vsd_r), n)


def evaluate_scene(scene_id, scene, hypotheses, meshes, model_points, diameters, symmetric, params=VsdParams()):
    """One record per ground-truth instance, matched to the hypothesis of the same mask id.

    :param model_points: ``{model_id: (N, 3)}`` surface points for ADD/ADI.
    :param symmetric: ``{model_id: bool}`` selects ADI for the diameter test.
    """
    by_mask = {h.mask_id: h for h in hypotheses}
    cam = scene.camera
    records = []
    for g in scene.gt:
        gt_maps = render(meshes[g.model_id], g.pose, cam)
        h = by_mask.get(g.instance_id)
        if h is None or h.model_id != g.model_id:
            _, vis = vsd_error(gt_maps, np.full(cam.shape, np.inf), scene.depth, params)
            records.append(MetricRecord(scene_id, g.instance_id, g.model_id, h is not None, None, None,
                                        False, 1.0, False, vis))
            continue
        P = model_points[g.model_id]
        add = add_error(P, g.pose, h.pose)
        adi = adi_error(P, g.pose, h.pose)
        err = adi if symmetric[g.model_id] else add
        vsd, vis = vsd_error(gt_maps, render(meshes[g.model_id], h.pose, cam), scene.depth, params)
        records.append(MetricRecord(scene_id, g.instance_id, g.model_id, True, add, adi,
                                    add_correct(err, diameters[g.model_id]), vsd,
                                    bool(vsd < params.threshold), vis))
    return records

