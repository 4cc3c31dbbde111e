"""Robust model-to-observation registration.

Decoupled solver: translation-invariant measurements (TIMs), adaptive scale
voting, maximum-clique pruning of the pairwise consistency graph, GNC-TLS
rotation, per-axis translation voting and an optional point-to-point ICP
polish. The pose maps the model frame into the observation frame,
``q = scale * R @ p + t``, expressed in whatever frame the observation cloud
was recorded in.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import EmbeddedCloud, RigidTransform, centroid, estimate_normals
from .correspondence import CorrespondenceSet, compute_descriptors, match_correspondences
from .errors import (CliqueTooSmallError, DegenerateGeometryError, EmptyGraphError,
                     PromptPoseError, RegistrationError, ValidationError)
from .maxclique import adjacency_from_edges, is_clique, max_clique

COMPLETE_GRAPH_LIMIT = 200


@dataclass(frozen=True)
class RegistrationParams:
    noise_bound: float = 0.01
    estimate_scale: bool = False
    lambda_color: float = 0.3
    max_pairs: int = 200
    refine: bool = True
    normal_k: int = 20
    feature_k: int = 30
    max_edges: int = 20000
    tim_bound_factor: float = 2.0
    gnc_factor: float = 1.4
    gnc_max_iterations: int = 100
    clique_exact_limit: int = 150
    clique_time_cap: float = 5.0
    icp_max_iter: int = 50
    icp_tol: float = 1e-6
    icp_trim_factor: float = 1.5
    # drop correspondences whose endpoint colors differ by more than this (L2, RGB in [0,1])
    color_gate: Optional[float] = None
    seed: int = 0
    record_timings: bool = False


@dataclass(frozen=True, eq=False)
class TIMGraph:
    edges: np.ndarray
    src_vectors: np.ndarray
    dst_vectors: np.ndarray
    noise_bounds: np.ndarray
    n_correspondences: int

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    transform: RigidTransform
    inlier_indices: np.ndarray
    converged: bool
    iterations: int
    residual_rms: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    associated: bool
    iterations: int
    rms_history: list


# ---------------------------------------------------------------------------
# building blocks

def adaptive_voting(centers, half_widths):
    """Stab the largest number of intervals ``[c - b, c + b]``.

    Returns ``(estimate, mask)``: the mean of the centers whose interval holds
    the smallest maximally-stabbed point, and the mask of those intervals.
    """
    c = np.asarray(centers, dtype=float).reshape(-1)
    b = np.asarray(half_widths, dtype=float) * np.ones_like(c)
    if c.size == 0:
        raise ValidationError("voting over an empty set")
    lo, hi = c - b, c + b
    x = np.concatenate([lo, hi])
    kind = np.concatenate([np.zeros(c.size), np.ones(c.size)])  # opens sort before closes
    order = np.lexsort((kind, x))
    steps = np.where(kind[order] == 0, 1, -1)
    depth = np.cumsum(steps)
    best = int(np.argmax(depth))
    point = x[order][best]
    mask = (lo <= point) & (point <= hi)
    return float(c[mask].mean()), mask


def _points(a) -> np.ndarray:
    return a.points if isinstance(a, EmbeddedCloud) else np.asarray(a, dtype=float).reshape(-1, 3)


def build_tims(corr: CorrespondenceSet, src, dst, noise_bound: float,
               max_edges: int = 20000, seed: int = 0, bound_factor: float = 2.0) -> TIMGraph:
    """Pairwise differences of corresponded points.

    Uses every pair for up to 200 correspondences, otherwise ``max_edges``
    pairs sampled without replacement from a generator seeded with ``seed``.
    """
    n = len(corr)
    if n < 3:
        raise RegistrationError(f"need at least 3 correspondences, got {n}", stage="tims")
    if not noise_bound > 0:
        raise ValidationError("noise_bound must be positive")
    p = _points(src)[corr.src]
    q = _points(dst)[corr.dst]
    i, j = np.triu_indices(n, 1)
    if n > COMPLETE_GRAPH_LIMIT and max_edges < len(i):
        pick = np.sort(np.random.default_rng(seed).choice(len(i), size=max_edges, replace=False))
        i, j = i[pick], j[pick]
    edges = np.stack([i, j], axis=1)
    return TIMGraph(edges, p[i] - p[j], q[i] - q[j],
                    np.full(len(i), bound_factor * noise_bound), n)


def estimate_scale_voting(tims: TIMGraph, estimate_scale: bool = True):
    ns = np.linalg.norm(tims.src_vectors, axis=1)
    nd = np.linalg.norm(tims.dst_vectors, axis=1)
    usable = ns > 1e-12
    if not usable.any():
        raise DegenerateGeometryError("all source TIM vectors vanish", stage="scale")
    if not estimate_scale:
        return 1.0, np.abs(nd - ns) <= tims.noise_bounds
    raw = nd[usable] / ns[usable]
    beta = tims.noise_bounds[usable] / ns[usable]
    scale, sub = adaptive_voting(raw, beta)
    mask = np.zeros(len(tims), dtype=bool)
    mask[np.flatnonzero(usable)[sub]] = True
    return scale, mask


def consistency_edges(tims: TIMGraph, scale: float) -> np.ndarray:
    ns = np.linalg.norm(tims.src_vectors, axis=1)
    nd = np.linalg.norm(tims.dst_vectors, axis=1)
    return np.abs(nd - scale * ns) <= tims.noise_bounds


def prune_max_clique(tims: TIMGraph, scale: float, exact_limit: int = 150,
                     time_cap: float = 5.0, min_size: int = 3):
    """Largest mutually consistent correspondence subset (sorted indices).

    Also returns the search method used (``"exact"`` or ``"greedy"``).
    """
    ok = consistency_edges(tims, scale)
    if tims.n_correspondences == 0 or not ok.any():
        raise EmptyGraphError("consistency graph has no edges", stage="clique")
    used = np.unique(tims.edges[ok])
    local = np.searchsorted(used, tims.edges[ok])
    adj = adjacency_from_edges(len(used), local)
    clique, method = max_clique(adj, exact_limit, time_cap)
    if not is_clique(adj, clique):
        raise RegistrationError("clique search returned an inconsistent set", stage="clique")
    if len(clique) < min_size:
        raise CliqueTooSmallError(
            f"largest consistent set has {len(clique)} correspondences, need {min_size}",
            stage="clique")
    return used[np.asarray(clique, dtype=np.int64)], method


def weighted_rotation(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> np.ndarray:
    """argmin_R sum w |dst - R src|^2 over SO(3)."""
    H = (w[:, None] * src).T @ dst
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def solve_rotation_gnc(src_vectors, dst_vectors, noise_bound, gnc_factor: float = 1.4,
                       max_iterations: int = 100):
    """GNC with the truncated-least-squares surrogate.

    ``noise_bound`` may be a scalar or one bound per vector. Returns
    ``(R, converged, iterations, weights)``.
    """
    src = np.asarray(src_vectors, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst_vectors, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValidationError("source and target vector counts differ")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least 3 vector pairs for rotation", stage="rotation")
    sv = np.linalg.svd(src, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("rotation input vectors are collinear", stage="rotation")
    cbar2 = (np.asarray(noise_bound, dtype=float) * np.ones(len(src))) ** 2

    w = np.ones(len(src))
    R = weighted_rotation(src, dst, w)
    r2 = ((dst - src @ R.T) ** 2).sum(axis=1)
    ratio = float((r2 / cbar2).max())
    if 2.0 * ratio - 1.0 <= 0:
        return R, True, 0, w
    mu = max(1.0 / (2.0 * ratio - 1.0), 1e-6)
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        upper = (mu + 1.0) / mu * cbar2
        lower = mu / (mu + 1.0) * cbar2
        with np.errstate(divide="ignore"):
            mid = np.sqrt(cbar2 * mu * (mu + 1.0) / r2) - mu
        w = np.where(r2 >= upper, 0.0, np.where(r2 <= lower, 1.0, mid))
        if not w.any():
            raise RegistrationError("GNC rejected every measurement", stage="rotation")
        R = weighted_rotation(src, dst, w)
        r2 = ((dst - src @ R.T) ** 2).sum(axis=1)
        if np.all(np.minimum(w, 1.0 - w) <= 1e-6):
            converged = True
            break
        mu *= gnc_factor
    return R, converged, it, w


def solve_translation_voting(src, dst, scale: float, rotation: np.ndarray, noise_bound: float):
    """Per-axis interval voting over ``q - s R p``.

    ``src``/``dst`` are the corresponded point arrays (M, 3). Returns the
    translation and the indices of pairs within ``noise_bound`` of it on every
    axis.
    """
    p = np.asarray(src, dtype=float).reshape(-1, 3)
    q = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise ValidationError("translation voting needs at least one correspondence")
    tc = q - scale * p @ np.asarray(rotation).T
    t = np.array([adaptive_voting(tc[:, a], noise_bound)[0] for a in range(3)])
    inliers = np.flatnonzero(np.all(np.abs(tc - t) <= noise_bound * (1 + 1e-12), axis=1))
    return t, inliers


def best_fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid alignment (Kabsch/Horn)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    R = weighted_rotation(src - cs, dst - cd, np.ones(len(src)))
    return RigidTransform(R, cd - R @ cs)


def refine_icp(model, observation, initial: RigidTransform, max_iter: int = 50,
               tol: float = 1e-6, max_distance: float = 0.03,
               trim_distance: Optional[float] = None) -> IcpResult:
    """Point-to-point ICP keeping the initial scale.

    Every observed point is paired with its closest transformed model point, so
    a dense clean model serves as the reference surface for a noisy, partial
    observation. Fewer than three pairs within ``max_distance`` at the start
    leaves ``initial`` untouched with ``associated=False``. Pairs farther than
    ``trim_distance`` (default ``max_distance``) take no part in the update;
    the tracked residual is the truncated RMS
    ``sqrt(mean(min(d^2, trim_distance^2)))``, which cannot increase from one
    iteration to the next.
    """
    src = _points(model)
    obs = _points(observation)
    if len(src) == 0 or len(obs) == 0:
        return IcpResult(initial, False, 0, [])
    trim = max_distance if trim_distance is None else min(trim_distance, max_distance)
    tree = cKDTree(src)
    tau2 = trim ** 2
    s = initial.scale

    def associate(T):
        local = (obs - T.translation) @ T.rotation / s
        d, j = tree.query(local)
        return d * s, j

    def rms_of(d):
        return float(np.sqrt(np.minimum(d ** 2, tau2).mean()))

    T = initial
    d, j = associate(T)
    if (d <= max_distance).sum() < 3:
        return IcpResult(initial, False, 0, [])
    m = d <= trim
    if m.sum() < 3:
        return IcpResult(initial, True, 0, [rms_of(d)])
    hist = [rms_of(d)]
    it = 0
    for it in range(1, max_iter + 1):
        fit = best_fit_rigid(s * src[j[m]], obs[m])
        T_new = RigidTransform(fit.rotation, fit.translation, s)
        d_new, j_new = associate(T_new)
        rms = rms_of(d_new)
        if rms > hist[-1]:
            # rounding-level uphill step; keep the previous iterate
            break
        T, d, j = T_new, d_new, j_new
        m = d <= trim
        hist.append(rms)
        if hist[-2] - rms < tol or m.sum() < 3:
            break
    return IcpResult(T, True, it, hist)


# ---------------------------------------------------------------------------
# full solver

class _Stages:
    def __init__(self, record):
        self.record = record
        self.timings = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except RegistrationError as exc:
            if exc.stage in (None, "registration"):
                exc.stage = name
            raise
        except PromptPoseError as exc:
            raise RegistrationError(f"{name}: {exc}", stage=name) from exc
        finally:
            if self.record:
                ms = (time.perf_counter() - t0) * 1000.0
                self.timings[name] = round(self.timings.get(name, 0.0) + ms, 3)


def solve_correspondences(corr: CorrespondenceSet, src, dst,
                          params: RegistrationParams = RegistrationParams(),
                          stages: Optional[_Stages] = None) -> PoseEstimate:
    """Robust pose from given correspondences (no ICP)."""
    st = stages or _Stages(params.record_timings)
    P, Q = _points(src), _points(dst)
    tims = st.run("tims", build_tims, corr, P, Q, params.noise_bound, params.max_edges,
                  params.seed, params.tim_bound_factor)
    scale, _ = st.run("scale", estimate_scale_voting, tims, params.estimate_scale)
    clique, method = st.run("clique", prune_max_clique, tims, scale, params.clique_exact_limit,
                            params.clique_time_cap)

    in_clique = np.zeros(len(corr), dtype=bool)
    in_clique[clique] = True
    sel = in_clique[tims.edges[:, 0]] & in_clique[tims.edges[:, 1]]
    R, converged, iters, weights = st.run(
        "rotation", solve_rotation_gnc, scale * tims.src_vectors[sel], tims.dst_vectors[sel],
        tims.noise_bounds[sel], params.gnc_factor, params.gnc_max_iterations)

    p, q = P[corr.src[clique]], Q[corr.dst[clique]]
    t, local_inliers = st.run("translation", solve_translation_voting, p, q, scale, R,
                              params.noise_bound)
    inliers = clique[local_inliers]
    T = RigidTransform(R, t, scale)
    res = T.apply(P[corr.src[inliers]]) - Q[corr.dst[inliers]]
    rms = float(np.sqrt((res ** 2).sum(axis=1).mean())) if len(inliers) else 0.0
    diag = {
        "correspondences": int(len(corr)),
        "tims": int(len(tims)),
        "clique_size": int(len(clique)),
        "clique_method": method,
        "rotation_inlier_tims": int((weights > 0.5).sum()),
    }
    return PoseEstimate(T, inliers, bool(converged), int(iters), rms, diag)


def _color_gate(corr, model, observation, gate):
    if gate is None or model.colors is None or observation.colors is None:
        return corr
    d = np.linalg.norm(model.colors[corr.src] - observation.colors[corr.dst], axis=1)
    return corr.subset(d <= gate)


def register(model: EmbeddedCloud, observation: EmbeddedCloud,
             params: RegistrationParams = RegistrationParams()) -> PoseEstimate:
    """Estimate the pose of ``model`` inside ``observation``.

    Normals of each cloud are oriented toward that cloud's centroid so the
    descriptors of both sides use the same convention regardless of where
    the observation sits.
    """
    if len(model) == 0 or len(observation) == 0:
        raise RegistrationError("model and observation must be non-empty", stage="input")
    st = _Stages(params.record_timings)

    def features(cloud):
        normals, valid = estimate_normals(cloud, min(params.normal_k, len(cloud)),
                                          viewpoint=centroid(cloud.points))
        return compute_descriptors(cloud, params.feature_k, normals, valid)

    src_desc = st.run("descriptors", features, model)
    dst_desc = st.run("descriptors", features, observation)
    corr = st.run("matching", match_correspondences, src_desc, dst_desc, params.lambda_color,
                  params.max_pairs)
    corr = _color_gate(corr, model, observation, params.color_gate)

    est = solve_correspondences(corr, model, observation, params, st)
    T, rms, icp_iters = est.transform, est.residual_rms, 0
    diag = dict(est.diagnostics)
    if params.refine:
        icp = st.run("refine", refine_icp, model, observation, T, params.icp_max_iter,
                     params.icp_tol, 3.0 * params.noise_bound,
                     params.icp_trim_factor * params.noise_bound)
        diag["icp_associated"] = icp.associated
        if icp.associated:
            T, rms, icp_iters = icp.transform, icp.rms_history[-1], icp.iterations
    diag["icp_iterations"] = icp_iters
    diag["stage_timings_ms"] = dict(st.timings)
    return PoseEstimate(T, est.inlier_indices, est.converged, est.iterations, rms, diag)
