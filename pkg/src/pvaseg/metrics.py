"""Segmentation and centerline metrics for tubular structures.

Volumetric overlap (Dice), a tolerance-forgiving variant (RDice) that
discards predicted voxels farther than a clinical-relevance distance from
the ground truth, and two centerline scores: symmetric overlap (OV) between
ground-truth centerline points and the prediction's skeleton, and per-branch
overlap until first error (OF), the fraction of a branch covered proximal to
distal before the first miss.

Matching runs in millimetres: voxel coordinates are scaled by the volume
spacing, and tolerances default to 2 voxels (3 for RDice) at that spacing.
A radius-based mode instead matches each centerline point within its own
tube radius.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, find_objects
from scipy.ndimage import label as ndi_label
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize as _thin

from .phantom import CenterlineTree
from .volgrid import ValidationError, Volume


@dataclass(frozen=True)
class MetricConfig:
    tolerance_mm: float | None = None  # None: 2 voxels at volume spacing
    rdice_tolerance_mm: float | None = None  # None: 3 voxels
    radius_based: bool = False
    centerline_step: float = 1.0  # voxels between resampled gt points


@dataclass
class MetricReport:
    per_volume: list
    aggregate: dict

    def to_json_dict(self) -> dict:
        return {"per_volume": self.per_volume, "aggregate": self.aggregate}


def _binary(vol: Volume, what: str) -> np.ndarray:
    if vol.role != "mask":
        raise ValidationError(f"{what} must be a mask volume, got role "
                              f"{vol.role!r}")
    return vol.data


def _check_same_grid(pred: Volume, gt: Volume):
    if pred.dims != gt.dims:
        raise ValidationError(
            f"pred dims {pred.dims} do not match gt dims {gt.dims}")


def dice(pred: Volume, gt: Volume) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _check_same_grid(pred, gt)
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    ps, gs = int(p.sum()), int(g.sum())
    if ps + gs == 0:
        return 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / (ps + gs)


def rdice(pred: Volume, gt: Volume, tolerance_mm: float | None = None) -> float:
    """Dice after dropping predicted voxels farther than the tolerance
    from the ground truth."""
    _check_same_grid(pred, gt)
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if tolerance_mm is None:
        tolerance_mm = 3.0 * max(pred.spacing)
    if g.any():
        dist = distance_transform_edt(g == 0, sampling=pred.spacing)
    else:
        dist = np.full(pred.dims, np.inf)
    kept = p & (dist <= tolerance_mm)
    ps, gs = int(kept.sum()), int(g.sum())
    if ps + gs == 0:
        return 1.0
    return 2.0 * int((kept & g).sum()) / (ps + gs)


def skeletonize(mask: Volume) -> Volume:
    """One-voxel-thick medial skeleton, preserving 26-connected components.

    Thinning can fully erode small blobs; any component whose skeleton comes
    back empty is restored as its most interior voxel, so the component
    count never changes.
    """
    m = _binary(mask, "mask").astype(bool)
    skel = _thin(m).astype(bool)
    lab, n = ndi_label(m, structure=np.ones((3, 3, 3)))
    if n:
        counts = np.bincount((lab * skel).ravel(), minlength=n + 1)
        objs = find_objects(lab)
        for i in np.nonzero(counts[1:] == 0)[0] + 1:
            sl = objs[i - 1]
            comp = lab[sl] == i
            d = distance_transform_edt(comp)
            idx = np.unravel_index(int(np.argmax(d)), d.shape)
            skel[tuple(s.start + j for s, j in zip(sl, idx))] = True
    return Volume.from_array(skel.astype(np.uint8), spacing=mask.spacing,
                             role="mask")


def _points_mm(coords: np.ndarray, spacing) -> np.ndarray:
    return coords.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def gt_centerline_points(tree: CenterlineTree, spacing, step: float = 1.0):
    """Resampled centerline points over every branch, in mm, with radii."""
    pts, radii = [], []
    for name in sorted(tree.branches):
        p, r, _ = tree.resample_branch(name, step=step)
        pts.append(p)
        radii.append(r)
    p = np.concatenate(pts)
    r = np.concatenate(radii)
    return _points_mm(p, spacing), r * float(max(spacing))


def _skeleton_points_mm(pred: Volume):
    skel = skeletonize(pred)
    coords = np.argwhere(skel.data == 1)
    return _points_mm(coords, pred.spacing)


def _match_tolerances(base_tol, radii_mm, radius_based):
    if radius_based:
        return np.maximum(radii_mm, 1e-6)
    return np.full(len(radii_mm), base_tol)


def ov(pred: Volume, gt_tree: CenterlineTree,
       tolerance_mm: float | None = None, radius_based: bool = False,
       centerline_step: float = 1.0) -> float:
    """Symmetric centerline overlap.

    Ground-truth centerline points within tolerance of the prediction's
    skeleton count as TPa (else FNa); skeleton points within tolerance of
    the centerline count as TPb (else FPb).  Returns
    (TPa+TPb) / (TPa+TPb+FNa+FPb).
    """
    if tolerance_mm is None:
        tolerance_mm = 2.0 * max(pred.spacing)
    gt_pts, gt_rad = gt_centerline_points(gt_tree, pred.spacing,
                                          step=centerline_step)
    tols = _match_tolerances(tolerance_mm, gt_rad, radius_based)
    skel_pts = _skeleton_points_mm(pred)

    if len(skel_pts) == 0:
        tpa = 0
        fna = len(gt_pts)
        tpb = fpb = 0
    else:
        d_gt, _ = cKDTree(skel_pts).query(gt_pts, k=1)
        matched_a = d_gt <= tols
        tpa = int(matched_a.sum())
        fna = len(gt_pts) - tpa
        d_sk, idx = cKDTree(gt_pts).query(skel_pts, k=1)
        matched_b = d_sk <= tols[idx]
        tpb = int(matched_b.sum())
        fpb = len(skel_pts) - tpb
    denom = tpa + tpb + fna + fpb
    return (tpa + tpb) / denom if denom else 1.0


def of_per_branch(pred: Volume, gt_tree: CenterlineTree, branch: str,
                  tolerance_mm: float | None = None,
                  radius_based: bool = False,
                  centerline_step: float = 1.0) -> float:
    """Fraction of a branch covered before the first miss, walking the
    centerline from its proximal end."""
    if branch not in gt_tree.branches:
        raise ValidationError(f"unknown branch {branch!r}")
    if tolerance_mm is None:
        tolerance_mm = 2.0 * max(pred.spacing)
    pts, rad, _ = gt_tree.resample_branch(branch, step=centerline_step)
    pts_mm = _points_mm(pts, pred.spacing)
    tols = _match_tolerances(tolerance_mm, rad * float(max(pred.spacing)),
                             radius_based)
    skel_pts = _skeleton_points_mm(pred)
    if len(skel_pts) == 0:
        return 0.0
    d, _ = cKDTree(skel_pts).query(pts_mm, k=1)
    missed = np.nonzero(d > tols)[0]
    if len(missed) == 0:
        return 1.0
    return float(missed[0]) / len(pts_mm)


def evaluate(preds, gt_masks, gt_trees, config: MetricConfig | None = None,
             ids=None) -> MetricReport:
    """Score one or more volumes and aggregate mean/std per metric.

    Accepts single items or equal-length sequences.  OF is reported per
    main branch; the aggregate carries each metric as {mean, std} with
    population std, plus of_mean pooled over every (volume, branch) pair.
    """
    if isinstance(preds, Volume):
        preds, gt_masks, gt_trees = [preds], [gt_masks], [gt_trees]
    preds, gt_masks, gt_trees = list(preds), list(gt_masks), list(gt_trees)
    if not len(preds) == len(gt_masks) == len(gt_trees):
        raise ValidationError("pred/gt/tree sequences differ in length")
    if ids is None:
        ids = [f"vol_{i:03d}" for i in range(len(preds))]
    config = config or MetricConfig()

    per_volume = []
    for vid, p, g, t in zip(ids, preds, gt_masks, gt_trees):
        row = {
            "id": vid,
            "dice": dice(p, g),
            "rdice": rdice(p, g, config.rdice_tolerance_mm),
            "ov": ov(p, t, config.tolerance_mm, config.radius_based,
                     config.centerline_step),
            "of": {},
        }
        for name in t.main_branch_names():
            row["of"][name] = of_per_branch(
                p, t, name, config.tolerance_mm, config.radius_based,
                config.centerline_step)
        per_volume.append(row)

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    aggregate = {}
    for key in ("dice", "rdice", "ov"):
        aggregate[key] = stats([row[key] for row in per_volume])
    branch_names = sorted({n for row in per_volume for n in row["of"]})
    for name in branch_names:
        vals = [row["of"][name] for row in per_volume if name in row["of"]]
        aggregate[f"of.{name}"] = stats(vals)
    pooled = [v for row in per_volume for v in row["of"].values()]
    if pooled:
        aggregate["of_mean"] = stats(pooled)
    return MetricReport(per_volume=per_volume, aggregate=aggregate)


def write_report(report: MetricReport, json_path, csv_path=None):
    """Emit the report as canonical JSON (byte-stable) and optional CSV."""
    with open(json_path, "w") as f:
        json.dump(report.to_json_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    if csv_path is None:
        return
    branch_names = sorted({n for row in report.per_volume for n in row["of"]})
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "dice", "rdice", "ov"]
                   + [f"of.{n}" for n in branch_names])
        for row in report.per_volume:
            w.writerow([row["id"], repr(row["dice"]), repr(row["rdice"]),
                        repr(row["ov"])]
                       + [repr(row["of"][n]) if n in row["of"] else ""
                          for n in branch_names])
