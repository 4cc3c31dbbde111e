"""Relevancy thresholding, DBSCAN instance separation and centroid localization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cloud import EmbeddedCloud
from .errors import NoObjectFoundError, ValidationError
from .relevancy import RelevancyField

POLICIES = ("largest", "highest-mean")
DEFAULT_MIN_PTS = 10
SWEEP_HEADER = ("tau", "precision", "recall", "iou", "cluster_count", "selected_size")


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    """DBSCAN output over a subset of a cloud.

    ``labels[i]`` belongs to cloud point ``indices[i]``; ``indices`` is sorted.
    """

    indices: np.ndarray
    labels: np.ndarray
    cluster_count: int
    eps: float
    min_pts: int

    def members(self, cluster_id: int) -> np.ndarray:
        return self.indices[self.labels == cluster_id]


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    selected_indices: np.ndarray
    centroid: np.ndarray
    threshold_used: float
    cluster_id: int
    labeling: ClusterLabeling


@dataclass(frozen=True)
class SweepRow:
    tau: float
    precision: float
    recall: float
    iou: float
    cluster_count: int
    selected_size: int


def threshold_filter(field: RelevancyField, tau: float) -> np.ndarray:
    return np.flatnonzero(field.scores >= tau)


def default_eps(points: np.ndarray, min_pts: int = DEFAULT_MIN_PTS) -> float:
    """Twice the median distance to the ``min_pts``-th nearest point (self included).

    Tying the radius to ``min_pts`` keeps the typical surface point a core
    point; a radius built from the first-neighbor spacing alone encloses only
    three or four samples on a randomly sampled surface.
    """
    if len(points) < 2:
        return 1e-6
    k = min(max(min_pts, 2), len(points))
    d, _ = cKDTree(points).query(points, k=k)
    med = float(np.median(d[:, -1]))
    return 2.0 * med if med > 0 else 1e-9


def dbscan_cluster(cloud: EmbeddedCloud, subset, eps: float,
                   min_pts: int = DEFAULT_MIN_PTS) -> ClusterLabeling:
    """DBSCAN restricted to ``subset``.

    Neighborhoods are closed balls of radius ``eps`` and count the point itself.
    A border point joins the cluster of its nearest core neighbor (lower index on
    ties). Clusters are numbered in order of their smallest member index.
    """
    idx = np.unique(np.asarray(subset, dtype=np.int64))
    if idx.size == 0:
        raise ValidationError("dbscan_cluster needs a non-empty subset")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if min_pts < 1:
        raise ValidationError("min_pts must be >= 1")
    pts = cloud.points[idx]
    n = len(pts)

    pairs = cKDTree(pts).query_pairs(eps * (1 + 1e-9), output_type="ndarray")
    if len(pairs):
        d2 = ((pts[pairs[:, 0]] - pts[pairs[:, 1]]) ** 2).sum(axis=1)
        pairs = pairs[d2 <= eps * eps]
    a, b = pairs[:, 0], pairs[:, 1]
    counts = 1 + np.bincount(a, minlength=n) + np.bincount(b, minlength=n)
    core = counts >= min_pts

    labels = np.full(n, -1, dtype=np.int64)
    cc = core[a] & core[b]
    core_idx = np.flatnonzero(core)
    if core_idx.size:
        pos = np.full(n, -1)
        pos[core_idx] = np.arange(core_idx.size)
        g = coo_matrix((np.ones(cc.sum()), (pos[a[cc]], pos[b[cc]])),
                       shape=(core_idx.size, core_idx.size))
        _, comp = connected_components(g, directed=False)
        labels[core_idx] = comp

        # border points: non-core with a core neighbor
        mixed = core[a] ^ core[b]
        border = np.where(core[a[mixed]], b[mixed], a[mixed])
        anchor = np.where(core[a[mixed]], a[mixed], b[mixed])
        if border.size:
            dist = ((pts[border] - pts[anchor]) ** 2).sum(axis=1)
            order = np.lexsort((anchor, dist, border))
            border, anchor = border[order], anchor[order]
            first = np.r_[True, border[1:] != border[:-1]]
            labels[border[first]] = labels[anchor[first]]

    # renumber by smallest member (idx is sorted, so position order == index order)
    count = 0
    if core_idx.size:
        remap = {}
        for lab in labels:
            if lab >= 0 and lab not in remap:
                remap[lab] = len(remap)
        lut = np.full(labels.max() + 1, -1, dtype=np.int64)
        for old, new in remap.items():
            lut[old] = new
        labels = np.where(labels >= 0, lut[np.maximum(labels, 0)], -1)
        count = len(remap)
    return ClusterLabeling(idx, labels, count, float(eps), int(min_pts))


def select_target_cluster(labeling: ClusterLabeling, field: RelevancyField,
                          policy: str = "highest-mean") -> int:
    if policy not in POLICIES:
        raise ValidationError(f"unknown selection policy {policy!r}")
    if labeling.cluster_count == 0:
        raise NoObjectFoundError("no cluster survived thresholding and clustering")
    lab = labeling.labels
    keep = lab >= 0
    sizes = np.bincount(lab[keep], minlength=labeling.cluster_count)
    if policy == "largest":
        return int(np.argmax(sizes))
    sums = np.bincount(lab[keep], weights=field.scores[labeling.indices[keep]],
                       minlength=labeling.cluster_count)
    return int(np.argmax(sums / sizes))


def object_centroid(cloud: EmbeddedCloud, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("centroid of an empty index set")
    return cloud.points[idx].mean(axis=0)


def crop_region(cloud: EmbeddedCloud, center, radius: float) -> np.ndarray:
    if not radius > 0:
        raise ValidationError("crop radius must be positive")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    center = np.asarray(center, dtype=float).reshape(3)
    d2 = ((cloud.points - center) ** 2).sum(axis=1)
    return np.flatnonzero(d2 <= radius * radius)


def model_diameter(points: np.ndarray) -> float:
    """Diameter of the centroid-centered bounding sphere."""
    pts = np.asarray(points, dtype=float)
    return 2.0 * float(np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).max()))


def segment(cloud: EmbeddedCloud, field: RelevancyField, tau: float,
            eps: Optional[float] = None, min_pts: int = DEFAULT_MIN_PTS,
            policy: str = "highest-mean") -> SegmentationResult:
    """Threshold, cluster and pick the target instance.

    ``eps=None`` derives it from the filtered subset via :func:`default_eps`.
    """
    if len(field) != len(cloud):
        raise ValidationError("relevancy field and cloud differ in length")
    subset = threshold_filter(field, tau)
    if subset.size == 0:
        raise NoObjectFoundError(f"no point reaches relevancy threshold {tau}")
    if eps is None:
        eps = default_eps(cloud.points[subset], min_pts)
    labeling = dbscan_cluster(cloud, subset, eps, min_pts)
    cid = select_target_cluster(labeling, field, policy)
    sel = labeling.members(cid)
    return SegmentationResult(sel, object_centroid(cloud, sel), float(tau), cid, labeling)


def set_metrics(selected, gt) -> tuple[float, float, float]:
    sel = np.unique(np.asarray(selected, dtype=np.int64))
    gt = np.unique(np.asarray(gt, dtype=np.int64))
    if gt.size == 0:
        raise ValidationError("ground-truth index set is empty")
    inter = np.intersect1d(sel, gt, assume_unique=True).size
    union = sel.size + gt.size - inter
    precision = inter / sel.size if sel.size else 0.0
    return precision, inter / gt.size, inter / union


def threshold_sweep(cloud: EmbeddedCloud, field: RelevancyField, taus: Sequence[float],
                    eps: Optional[float], min_pts: int, gt_label: int) -> list[SweepRow]:
    """Score filter -> cluster -> highest-mean selection against a labeled instance.

    ``selected_size`` is the number of points passing the threshold, before
    clustering.
    """
    if cloud.labels is None:
        raise ValidationError("threshold sweep needs ground-truth labels")
    if len(taus) == 0:
        raise ValidationError("threshold sweep needs at least one tau")
    gt = np.flatnonzero(cloud.labels == gt_label)
    rows = []
    for tau in taus:
        subset = threshold_filter(field, tau)
        if subset.size == 0:
            rows.append(SweepRow(float(tau), 0.0, 0.0, 0.0, 0, 0))
            continue
        e = default_eps(cloud.points[subset], min_pts) if eps is None else eps
        labeling = dbscan_cluster(cloud, subset, e, min_pts)
        if labeling.cluster_count == 0:
            rows.append(SweepRow(float(tau), 0.0, 0.0, 0.0, 0, int(subset.size)))
            continue
        sel = labeling.members(select_target_cluster(labeling, field, "highest-mean"))
        p, r, iou = set_metrics(sel, gt)
        rows.append(SweepRow(float(tau), p, r, iou, labeling.cluster_count, int(subset.size)))
    return rows


def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` (within 1e-12)."""
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ValidationError(f"bad threshold grid {spec!r}, expected start:stop:step") from None
    if not step > 0 or stop < start:
        raise ValidationError(f"bad threshold grid {spec!r}")
    n = int(math.floor((stop - start) / step + 1e-12 / step)) + 1
    return [start + i * step for i in range(n)]


def fmt9(x: float) -> str:
    return f"{x:.9g}"


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([fmt9(r.tau), fmt9(r.precision), fmt9(r.recall), fmt9(r.iou),
                        r.cluster_count, r.selected_size])
