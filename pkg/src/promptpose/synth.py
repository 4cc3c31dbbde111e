"""Labeled synthetic desk scenes with known object poses and language embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import EmbeddedCloud, RigidTransform
from .correspondence import CorrespondenceSet
from .errors import ValidationError

SHAPES = ("cube", "sphere", "lshape", "external-ply")
COLOR_SCHEMES = ("uniform", "red-face", "gradient")
CLUTTER_MAX_SIMILARITY = 0.3

CUBE_SIDE = 0.1
SPHERE_RADIUS = 0.05
# L profile in the xy-plane with unequal arms (no proper rotational symmetry), extruded along z
L_LONG, L_SHORT, L_THICK, L_HEIGHT = 0.20, 0.15, 0.06, 0.08

GRAY = (0.5, 0.5, 0.5)
RED = (1.0, 0.0, 0.0)


@dataclass
class ObjectSpec:
    shape: str
    points: int = 800
    color: object = "uniform"  # scheme name or an RGB triple
    pose: Optional[RigidTransform] = None  # None: random placement on the desk
    signature: Optional[np.ndarray] = None  # None: drawn orthogonal to the other objects
    path: Optional[str] = None  # external-ply only
    model_points: Optional[int] = None  # size of the object prior; None: same as points

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.points < 1:
            raise ValidationError("objects need at least one point")
        if self.model_points is not None and self.model_points < 1:
            raise ValidationError("model_points must be positive")
        if self.shape == "external-ply" and not self.path:
            raise ValidationError("external-ply objects need a path")
        if isinstance(self.color, str) and self.color not in COLOR_SCHEMES:
            raise ValidationError(f"unknown color scheme {self.color!r}")
        if self.color == "red-face" and self.shape != "cube":
            raise ValidationError("the red-face scheme applies to cubes only")


@dataclass
class SceneSpec:
    objects: list
    clutter_points: int = 0
    noise_sigma: float = 0.0
    seed: int = 0
    embedding_dim: int = 16
    embedding_noise: float = 0.05
    canonical_count: int = 4
    desk_half_extent: float = 0.6
    desk_height: float = 0.4
    min_separation: float = 0.45

    def __post_init__(self):
        if not self.objects:
            raise ValidationError("a scene needs at least one object")
        if self.embedding_dim < len(self.objects) + 1:
            raise ValidationError("embedding_dim must exceed the number of objects")
        if self.noise_sigma < 0 or self.clutter_points < 0:
            raise ValidationError("noise_sigma and clutter_points must be non-negative")


@dataclass(eq=False)
class Scene:
    cloud: EmbeddedCloud
    ground_truth: list
    models: list
    signatures: np.ndarray
    canonicals: np.ndarray
    spec: SceneSpec = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# shape sampling, model frame centered on the bounding box

def _sample_cube(rng, n):
    a = CUBE_SIDE / 2
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-a, a, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for ax in range(3):
        m = axis == ax
        others = [o for o in range(3) if o != ax]
        pts[m, ax] = sign[m] * a
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return SPHERE_RADIUS * v / np.linalg.norm(v, axis=1, keepdims=True)


_L_POLY = np.array([[0, 0], [L_LONG, 0], [L_LONG, L_THICK], [L_THICK, L_THICK],
                    [L_THICK, L_SHORT], [0, L_SHORT]])


def _sample_lshape(rng, n):
    rects = [(0, 0, L_LONG, L_THICK), (0, L_THICK, L_THICK, L_SHORT)]
    cap_areas = [(x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in rects]
    edges = [(_L_POLY[i], _L_POLY[(i + 1) % len(_L_POLY)]) for i in range(len(_L_POLY))]
    wall_areas = [np.linalg.norm(b - a) * L_HEIGHT for a, b in edges]
    areas = np.array(2 * cap_areas + wall_areas)
    part = rng.choice(len(areas), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for k in range(len(areas)):
        m = part == k
        cnt = int(m.sum())
        if k < 4:
            x0, y0, x1, y1 = rects[k % 2]
            pts[m, 0] = rng.uniform(x0, x1, cnt)
            pts[m, 1] = rng.uniform(y0, y1, cnt)
            pts[m, 2] = 0.0 if k < 2 else L_HEIGHT
        else:
            a, b = edges[k - 4]
            s = rng.uniform(0, 1, cnt)[:, None]
            pts[m, :2] = a + s * (b - a)
            pts[m, 2] = rng.uniform(0, L_HEIGHT, cnt)
    return pts - np.array([L_LONG / 2, L_SHORT / 2, L_HEIGHT / 2])


def _sample_external(rng, n, path):
    from .ingest import load_cloud

    src = load_cloud(path)
    if len(src) == 0:
        raise ValidationError(f"external model {path} has no points")
    pick = rng.choice(len(src), size=n, replace=n > len(src))
    pts = src.points[pick]
    colors = None if src.colors is None else src.colors[pick]
    return pts - src.points.mean(axis=0), colors


def sample_shape(obj: ObjectSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``obj.points`` surface points and their colors in the model frame."""
    ext_colors = None
    if obj.shape == "cube":
        pts = _sample_cube(rng, obj.points)
    elif obj.shape == "sphere":
        pts = _sample_sphere(rng, obj.points)
    elif obj.shape == "lshape":
        pts = _sample_lshape(rng, obj.points)
    else:
        pts, ext_colors = _sample_external(rng, obj.points, obj.path)
    return pts, _colorize(obj, pts, ext_colors)


def _colorize(obj, pts, ext_colors):
    n = len(pts)
    if obj.color == "uniform":
        c = np.tile(GRAY, (n, 1)) if ext_colors is None else ext_colors
    elif obj.color == "red-face":
        c = np.tile(GRAY, (n, 1))
        c[pts[:, 2] >= CUBE_SIDE / 2 - 1e-12] = RED
    elif obj.color == "gradient":
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        c = (pts - lo) / np.where(hi > lo, hi - lo, 1.0)
    else:
        c = np.tile(np.asarray(obj.color, dtype=float).reshape(3), (n, 1))
    # store colors exactly as PLY uchar channels will hold them
    return np.rint(np.clip(c, 0, 1) * 255) / 255


# ---------------------------------------------------------------------------

def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def _place_objects(spec: SceneSpec, rng):
    poses = []
    placed = []
    h = spec.desk_half_extent
    for obj in spec.objects:
        if obj.pose is not None:
            poses.append(obj.pose)
            placed.append(obj.pose.translation)
            continue
        for _ in range(10000):
            t = np.array([rng.uniform(-h + 0.15, h - 0.15), rng.uniform(-h + 0.15, h - 0.15),
                          rng.uniform(0.1, spec.desk_height - 0.1)])
            if all(np.linalg.norm(t - p) >= spec.min_separation for p in placed):
                break
        else:
            raise ValidationError("could not place objects with the requested separation")
        placed.append(t)
        poses.append(RigidTransform(random_rotation(rng), t))
    return poses


def _embedding_basis(spec: SceneSpec, rng):
    m, d = len(spec.objects), spec.embedding_dim
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    sig = Q[:, :m].T.copy()
    for i, obj in enumerate(spec.objects):
        if obj.signature is not None:
            s = np.asarray(obj.signature, dtype=float).reshape(d)
            sig[i] = s / np.linalg.norm(s)
    complement = Q[:, m:].T
    mix = rng.normal(size=(spec.canonical_count, len(complement)))
    can = mix @ complement
    can /= np.linalg.norm(can, axis=1, keepdims=True)
    return sig, can


def _perturbed(rows, sigma, rng):
    e = rows + rng.normal(scale=sigma, size=rows.shape)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _clutter_embeddings(n, signatures, canonicals, rng):
    """Background features resembling the canonical phrases, rejection-sampled
    to stay below the similarity cap against every object signature."""
    out = np.empty((n, signatures.shape[1]))
    filled = 0
    while filled < n:
        m = max(2 * (n - filled), 16)
        base = canonicals[rng.integers(0, len(canonicals), m)]
        cand = _perturbed(base, 0.4, rng)
        ok = (cand @ signatures.T).max(axis=1) < CLUTTER_MAX_SIMILARITY
        take = cand[ok][: n - filled]
        out[filled:filled + len(take)] = take
        filled += len(take)
    return out


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    signatures, canonicals = _embedding_basis(spec, rng)
    poses = _place_objects(spec, rng)

    pts, cols, embs, labs, models = [], [], [], [], []
    for i, (obj, pose) in enumerate(zip(spec.objects, poses)):
        local, colors = sample_shape(obj, rng)
        world = pose.apply(local)
        if spec.noise_sigma > 0:
            world = world + rng.normal(scale=spec.noise_sigma, size=world.shape)
        pts.append(world)
        cols.append(colors)
        embs.append(_perturbed(np.tile(signatures[i], (len(local), 1)), spec.embedding_noise, rng))
        labs.append(np.full(len(local), i))
        # independent sample of the same surface serves as the object prior
        prior = obj if obj.model_points is None else replace(obj, points=obj.model_points)
        m_pts, m_cols = sample_shape(prior, rng)
        models.append(EmbeddedCloud(m_pts, colors=m_cols))

    if spec.clutter_points:
        h = spec.desk_half_extent
        n = spec.clutter_points
        pts.append(np.column_stack([rng.uniform(-h, h, n), rng.uniform(-h, h, n),
                                    rng.uniform(0, spec.desk_height, n)]))
        cols.append(np.rint(rng.uniform(0, 1, (n, 3)) * 255) / 255)
        embs.append(_clutter_embeddings(n, signatures, canonicals, rng))
        labs.append(np.full(n, -1))

    cloud = EmbeddedCloud(np.concatenate(pts), colors=np.concatenate(cols),
                          embeddings=np.concatenate(embs), labels=np.concatenate(labs))
    return Scene(cloud, poses, models, signatures, canonicals, spec)


def perturb_correspondences(corr: CorrespondenceSet, outlier_fraction: float, seed: int = 0):
    """Replace the target index of ``floor(fraction * len)`` pairs with a random one.

    Returns ``(corrupted_set, corrupted_positions)``. A replacement never equals
    the original target and never duplicates another pair.
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise ValidationError("outlier_fraction must lie in [0, 1)")
    n = len(corr)
    k = int(np.floor(outlier_fraction * n))
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    dst = corr.dst.copy()
    taken = set(zip(corr.src.tolist(), dst.tolist()))
    for p in pos:
        s, old = int(corr.src[p]), int(dst[p])
        if corr.target_size < 2:
            raise ValidationError("target too small to corrupt correspondences")
        while True:
            new = int(rng.integers(0, corr.target_size))
            if new != old and (s, new) not in taken:
                break
        taken.discard((s, old))
        taken.add((s, new))
        dst[p] = new
    out = CorrespondenceSet(corr.src.copy(), dst, corr.scores.copy(),
                            corr.source_size, corr.target_size)
    return out, pos


# ---------------------------------------------------------------------------
# preset scenes and JSON I/O

def desk_scene_spec(seed: int = 0, points: int = 3000, clutter_fraction: float = 0.5,
                    noise_sigma: float = 0.005, target_color="gradient",
                    model_points: Optional[int] = 6000) -> SceneSpec:
    """Three-object desk: a textured L-bracket (object 0, the usual target), a cube and a sphere.

    ``clutter_fraction`` is the share of clutter among all scene points;
    ``model_points`` sets the density of every object prior.
    """
    objects = [ObjectSpec("lshape", points, target_color, model_points=model_points),
               ObjectSpec("cube", points, "uniform", model_points=model_points),
               ObjectSpec("sphere", points, "uniform", model_points=model_points)]
    n_obj = 3 * points
    clutter = int(round(n_obj * clutter_fraction / (1.0 - clutter_fraction))) if clutter_fraction else 0
    return SceneSpec(objects, clutter, noise_sigma, seed)


def red_face_cube_spec(seed: int = 0, points: int = 1200, noise_sigma: float = 0.0) -> SceneSpec:
    return SceneSpec([ObjectSpec("cube", points, "red-face")], 0, noise_sigma, seed)


def pose_to_dict(t: RigidTransform) -> dict:
    return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist(),
            "scale": t.scale}


def pose_from_dict(d: dict) -> RigidTransform:
    return RigidTransform.from_matrix(d["rotation"], d["translation"], d.get("scale", 1.0),
                                      project=True)


def spec_from_dict(d: dict) -> SceneSpec:
    objects = []
    for o in d.get("objects", []):
        pose = pose_from_dict(o["pose"]) if o.get("pose") else None
        objects.append(ObjectSpec(o["shape"], int(o.get("points", 800)), o.get("color", "uniform"),
                                  pose, o.get("signature"), o.get("path"),
                                  o.get("model_points")))
    keys = ("clutter_points", "noise_sigma", "seed", "embedding_dim", "embedding_noise",
            "canonical_count", "desk_half_extent", "desk_height", "min_separation")
    return SceneSpec(objects, **{k: d[k] for k in keys if k in d})


def load_scene_spec(path) -> SceneSpec:
    try:
        return spec_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"bad scene spec {path}: {exc}") from None
