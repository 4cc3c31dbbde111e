"""Geometry + color descriptors and mutual-nearest-neighbor matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .cloud import EmbeddedCloud, knn_indices
from .errors import ValidationError

N_BINS = 11
NEUTRAL_COLOR = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Descriptor:
    geometric: np.ndarray
    color: np.ndarray
    valid: bool


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Per-point descriptors stored column-wise.

    ``geometric`` is (N, 33): three 11-bin angle histograms, L1-normalized.
    ``color`` is (N, 3) mean neighborhood RGB. ``has_color`` is False when the
    source cloud had no colors, in which case matching ignores the color part.
    """

    geometric: np.ndarray
    color: np.ndarray
    valid: np.ndarray
    has_color: bool

    def __len__(self):
        return len(self.valid)

    def __getitem__(self, i) -> Descriptor:
        return Descriptor(self.geometric[i], self.color[i], bool(self.valid[i]))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Putative matches ``src[i] <-> dst[i]``; ``scores`` are match costs (lower is better)."""

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray
    source_size: int
    target_size: int

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if not (len(src) == len(dst) == len(scores)):
            raise ValidationError("correspondence arrays differ in length")
        if len(src) and (src.min() < 0 or src.max() >= self.source_size
                         or dst.min() < 0 or dst.max() >= self.target_size):
            raise ValidationError("correspondence index out of range")
        if len(np.unique(src * max(self.target_size, 1) + dst)) != len(src):
            raise ValidationError("duplicate correspondence pair")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.src)

    def subset(self, keep) -> "CorrespondenceSet":
        keep = np.asarray(keep)
        return CorrespondenceSet(self.src[keep], self.dst[keep], self.scores[keep],
                                 self.source_size, self.target_size)


def _pair_features(p, n_p, q, n_q):
    """Darboux-frame features (theta, alpha, phi) for point pairs, source chosen as in FPFH.

    All inputs are (..., 3). Returns three arrays plus a mask of usable pairs.
    """
    dp = q - p
    d = np.linalg.norm(dp, axis=-1)
    ok = d > 0
    d_safe = np.where(ok, d, 1.0)
    a1 = np.einsum("...i,...i->...", n_p, dp) / d_safe
    a2 = np.einsum("...i,...i->...", n_q, dp) / d_safe
    swap = np.abs(a1) < np.abs(a2)  # same as acos(|a1|) > acos(|a2|)
    u = np.where(swap[..., None], n_q, n_p)
    nt = np.where(swap[..., None], n_p, n_q)
    dp = np.where(swap[..., None], -dp, dp)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dp, u)
    vn = np.linalg.norm(v, axis=-1)
    ok &= vn > 1e-12
    v = v / np.where(vn > 0, vn, 1.0)[..., None]
    w = np.cross(u, v)
    alpha = np.einsum("...i,...i->...", v, nt)
    theta = np.arctan2(np.einsum("...i,...i->...", w, nt), np.einsum("...i,...i->...", u, nt))
    return theta, alpha, phi, ok


def _bin(x, lo, hi):
    b = np.floor((x - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def compute_descriptors(cloud: EmbeddedCloud, k: int, normals, valid=None) -> DescriptorSet:
    """FPFH-style 33-bin geometric histogram plus mean neighborhood color.

    ``normals`` comes from :func:`promptpose.cloud.estimate_normals`; pass its
    validity mask as ``valid`` (NaN rows are treated as invalid otherwise).
    """
    if normals is None:
        raise ValidationError("descriptors need normals")
    if k < 5:
        raise ValidationError("descriptor neighborhood needs k >= 5")
    normals = np.asarray(normals, dtype=float)
    n = len(cloud)
    if normals.shape != (n, 3):
        raise ValidationError("normals do not match the cloud")
    if valid is None:
        valid = np.all(np.isfinite(normals), axis=1)
    valid = np.asarray(valid, dtype=bool)
    k = min(k, n - 1)
    if k < 1:
        raise ValidationError("cloud too small for descriptors")

    raw = knn_indices(cloud, k + 1)
    not_self = raw != np.arange(n)[:, None]
    # drop self (or the last entry if self is hidden among duplicates)
    not_self[not_self.all(axis=1), -1] = False
    nb = raw[not_self].reshape(n, k)

    safe_n = np.where(valid[:, None], normals, 0.0)
    P = cloud.points
    theta, alpha, phi, ok = _pair_features(P[:, None, :], safe_n[:, None, :], P[nb], safe_n[nb])
    ok &= valid[:, None] & valid[nb]

    spfh = np.zeros((n, 3 * N_BINS))
    rows = np.broadcast_to(np.arange(n)[:, None], nb.shape)[ok]
    for j, (feat, lo, hi) in enumerate(((theta, -np.pi, np.pi), (alpha, -1.0, 1.0), (phi, -1.0, 1.0))):
        np.add.at(spfh, (rows, j * N_BINS + _bin(feat[ok], lo, hi)), 1.0)
    npairs = ok.sum(axis=1)
    spfh /= np.maximum(npairs, 1)[:, None]

    # FPFH: own histogram plus the distance-weighted average of the neighbors'
    dist = np.linalg.norm(P[nb] - P[:, None, :], axis=2)
    wgt = np.where(valid[nb], 1.0 / np.maximum(dist, 1e-9), 0.0)
    wsum = wgt.sum(axis=1, keepdims=True)
    neigh = np.einsum("nk,nkb->nb", wgt / np.maximum(wsum, 1e-300), spfh[nb])
    geom = spfh + neigh
    total = geom.sum(axis=1)
    desc_valid = valid & (npairs > 0) & (total > 0)
    geom = geom / np.where(total > 0, total, 1.0)[:, None]

    if cloud.colors is not None:
        hood = np.concatenate([np.arange(n)[:, None], nb], axis=1)
        color = cloud.colors[hood].mean(axis=1)
        has_color = True
    else:
        color = np.tile(NEUTRAL_COLOR, (n, 1))
        has_color = False
    geom[~desc_valid] = 0.0
    return DescriptorSet(geom, color, desc_valid, has_color)


def match_costs(src: DescriptorSet, dst: DescriptorSet, lambda_color: float,
                src_rows=None, dst_rows=None) -> np.ndarray:
    si = np.arange(len(src)) if src_rows is None else src_rows
    di = np.arange(len(dst)) if dst_rows is None else dst_rows
    geom = cdist(src.geometric[si], dst.geometric[di], "cityblock")
    if lambda_color == 0 or not (src.has_color and dst.has_color):
        return geom
    col = cdist(src.color[si], dst.color[di], "euclidean")
    return (1.0 - lambda_color) * geom + lambda_color * col


def match_correspondences(src: DescriptorSet, dst: DescriptorSet, lambda_color: float = 0.3,
                          max_pairs: Optional[int] = None) -> CorrespondenceSet:
    """Mutual nearest neighbors under the blended geometry/color cost.

    Pairs are returned sorted by cost, then source index, then target index,
    truncated to the ``max_pairs`` cheapest.
    """
    if not 0.0 <= lambda_color <= 1.0:
        raise ValidationError("lambda_color must lie in [0, 1]")
    si = np.flatnonzero(src.valid)
    di = np.flatnonzero(dst.valid)
    if si.size == 0 or di.size == 0:
        raise ValidationError("no valid descriptors on one side of the match")
    cost = match_costs(src, dst, lambda_color, si, di)
    fwd = np.argmin(cost, axis=1)
    bwd = np.argmin(cost, axis=0)
    mutual = np.flatnonzero(bwd[fwd] == np.arange(si.size))
    s, d = si[mutual], di[fwd[mutual]]
    c = cost[mutual, fwd[mutual]]
    order = np.lexsort((d, s, c))
    if max_pairs is not None:
        order = order[:max_pairs]
    return CorrespondenceSet(s[order], d[order], c[order], len(src), len(dst))


def save_correspondences(corr: CorrespondenceSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("src_index", "dst_index", "score"))
        for s, d, c in zip(corr.src, corr.dst, corr.scores):
            w.writerow((int(s), int(d), f"{c:.9g}"))


def load_correspondences(path, source_size: int, target_size: int) -> CorrespondenceSet:
    src, dst, sc = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src_index", "dst_index", "score"]:
            raise ValidationError("correspondence CSV must start with src_index,dst_index,score")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                src.append(int(row[0]))
                dst.append(int(row[1]))
                sc.append(float(row[2]))
            except (ValueError, IndexError):
                raise ValidationError(f"bad correspondence row at line {lineno}") from None
    return CorrespondenceSet(np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                             np.array(sc), source_size, target_size)
