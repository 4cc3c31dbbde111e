"""Command-line front end: ``promptpose <subcommand> [flags]``.

Every stage can run on its own, and ``pipeline`` chains them. Flags override
values from ``--config``; both override the defaults of :class:`PipelineConfig`.
Exit codes: 0 success, 1 input error, 2 no object found, 3 registration failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .cloud import RigidTransform
from .errors import NoObjectFoundError, PromptPoseError, RegistrationError, ValidationError
from .evaluation import add_metrics, pose_errors, pose_record, read_pose, write_json
from .ingest import (load_cloud, load_embedded_cloud, load_query_set, save_cloud,
                     save_embedding_matrix)
from .registration import RegistrationParams, register
from .relevancy import METHODS, colorize, compute_relevancy, relevancy_stats
from .segmentation import (POLICIES, crop_region, model_diameter, parse_grid, segment,
                           set_metrics, threshold_sweep, write_sweep_csv)
from .synth import desk_scene_spec, generate_scene, load_scene_spec, red_face_cube_spec

log = logging.getLogger("promptpose")

EXIT_OK, EXIT_INPUT, EXIT_NO_OBJECT, EXIT_REGISTRATION = 0, 1, 2, 3
SUBCOMMANDS = ("synth", "relevancy", "segment", "localize", "register", "pipeline", "sweep", "eval")
PRESETS = ("desk", "red-cube")
PATH_FIELDS = ("cloud", "embeddings", "query", "canonicals", "model", "ground_truth", "pose",
               "spec", "out")


@dataclass
class PipelineConfig:
    # paths
    cloud: Optional[str] = None
    embeddings: Optional[str] = None
    query: Optional[str] = None
    canonicals: Optional[str] = None
    model: Optional[str] = None
    ground_truth: Optional[str] = None
    pose: Optional[str] = None
    spec: Optional[str] = None
    out: Optional[str] = None
    # relevancy and segmentation
    method: str = "lerf"
    threshold: object = 0.6  # float, or "min" for no cutoff
    eps: Optional[float] = None
    min_pts: int = 10
    select: str = "highest-mean"
    crop_factor: float = 1.5
    target_label: int = 0
    thresholds: str = "0:1:0.05"
    # registration
    noise_bound: float = 0.01
    estimate_scale: bool = False
    lambda_color: float = 0.3
    max_pairs: int = 200
    refine: bool = True
    # misc
    seed: Optional[int] = None  # None: 0, or the seed stored in a scene spec
    preset: str = "desk"
    prompt: str = ""
    colorize: bool = False
    timings: bool = False

    @property
    def tau(self) -> float:
        return parse_threshold(self.threshold)

    def registration_params(self) -> RegistrationParams:
        return RegistrationParams(noise_bound=self.noise_bound, estimate_scale=self.estimate_scale,
                                  lambda_color=self.lambda_color, max_pairs=self.max_pairs,
                                  refine=self.refine, seed=self.seed or 0,
                                  record_timings=self.timings)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        if self.select not in POLICIES:
            raise ValidationError(f"select must be one of {POLICIES}")
        if self.preset not in PRESETS:
            raise ValidationError(f"preset must be one of {PRESETS}")
        self.tau  # noqa: B018 - parses the threshold
        if self.eps is not None and not self.eps > 0:
            raise ValidationError("eps must be positive")
        if self.min_pts < 1:
            raise ValidationError("min-pts must be >= 1")
        if not self.crop_factor > 0:
            raise ValidationError("crop factor must be positive")
        if not self.noise_bound > 0:
            raise ValidationError("noise bound must be positive")
        if not 0.0 <= self.lambda_color <= 1.0:
            raise ValidationError("lambda-color must lie in [0, 1]")
        if self.max_pairs < 3:
            raise ValidationError("max-pairs must be >= 3")
        if self.seed is not None and self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def require(self, *names: str) -> None:
        """Fail before any computation if a needed path is unset or missing."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ValidationError(f"--{name.replace('_', '-')} is required")
            if not Path(value).is_file():
                raise ValidationError(f"{name.replace('_', ' ')} file not found: {value}")

    def out_path(self, default: str) -> Path:
        return Path(self.out if self.out is not None else default)


def parse_threshold(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() == "min":
            return -math.inf
        try:
            value = float(value)
        except ValueError:
            raise ValidationError(f"threshold must be a number or 'min', got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise ValidationError(f"threshold must be a number or 'min', got {value!r}")
    return float(value)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _u32(text) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 32:
        raise argparse.ArgumentTypeError(f"{text} is outside the u32 range")
    return v


def _u64(text) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"{text} is outside the u64 range")
    return v


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptpose",
                                     description="Promptable zero-shot 6D pose from language-embedded point clouds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    S = argparse.SUPPRESS  # unset flags must not mask config values

    def common(p):
        p.add_argument("--seed", type=_u64, default=S, help="random seed (default 0)")
        p.add_argument("--out", default=S, help="output file or directory")
        p.add_argument("--config", default=None, help="JSON file with PipelineConfig fields")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    def inputs(p, *names):
        for name in names:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=S)

    def relevancy_flags(p):
        p.add_argument("--method", choices=METHODS, default=S)
        p.add_argument("--prompt", default=S, help="prompt text stored as metadata")

    def segment_flags(p):
        p.add_argument("--threshold", default=S, help="relevancy cutoff, or 'min' for none")
        p.add_argument("--eps", type=float, default=S)
        p.add_argument("--min-pts", dest="min_pts", type=_u32, default=S)
        p.add_argument("--select", choices=POLICIES, default=S)
        p.add_argument("--target-label", dest="target_label", type=int, default=S,
                       help="ground-truth label (or object index) of the prompted object")

    def registration_flags(p):
        p.add_argument("--noise-bound", dest="noise_bound", type=float, default=S)
        p.add_argument("--estimate-scale", dest="estimate_scale", type=parse_bool, default=S)
        p.add_argument("--lambda-color", dest="lambda_color", type=float, default=S)
        p.add_argument("--max-pairs", dest="max_pairs", type=_u32, default=S)
        p.add_argument("--refine", type=parse_bool, default=S)
        p.add_argument("--timings", type=parse_bool, default=S,
                       help="record per-stage wall time (output is then not reproducible)")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    common(p)
    inputs(p, "spec")
    p.add_argument("--preset", choices=PRESETS, default=S)

    p = sub.add_parser("relevancy", help="score every point against a prompt embedding")
    common(p)
    inputs(p, "cloud", "embeddings", "query", "canonicals")
    relevancy_flags(p)
    p.add_argument("--colorize", type=parse_bool, default=S, help="paint scores into the red channel")

    p = sub.add_parser("segment", help="threshold and cluster the relevancy field")
    common(p)
    inputs(p, "cloud", "embeddings", "query", "canonicals")
    relevancy_flags(p)
    segment_flags(p)

    p = sub.add_parser("localize", help="segment, then crop around the object centroid")
    common(p)
    inputs(p, "cloud", "embeddings", "query", "canonicals", "model")
    relevancy_flags(p)
    segment_flags(p)
    p.add_argument("--crop-factor", dest="crop_factor", type=float, default=S)

    p = sub.add_parser("register", help="estimate the pose of a model inside an observed cloud")
    common(p)
    inputs(p, "cloud", "model")
    registration_flags(p)

    p = sub.add_parser("pipeline", help="relevancy, segmentation, localization and registration")
    common(p)
    inputs(p, "cloud", "embeddings", "query", "canonicals", "model", "ground_truth")
    relevancy_flags(p)
    segment_flags(p)
    p.add_argument("--crop-factor", dest="crop_factor", type=float, default=S)
    registration_flags(p)

    p = sub.add_parser("sweep", help="segmentation quality over a grid of thresholds")
    common(p)
    inputs(p, "cloud", "embeddings", "query", "canonicals")
    relevancy_flags(p)
    segment_flags(p)
    p.add_argument("--thresholds", default=S, help="start:stop:step, stop inclusive")

    p = sub.add_parser("eval", help="compare a pose file with ground truth")
    common(p)
    inputs(p, "pose", "ground_truth", "model")
    p.add_argument("--target-label", dest="target_label", type=int, default=S)
    return parser


def load_config(path: Optional[str], overrides: dict) -> PipelineConfig:
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        # relative paths inside a config file are taken relative to that file
        base = Path(path).parent
        for key in PATH_FIELDS:
            if isinstance(cfg.get(key), str) and not Path(cfg[key]).is_absolute():
                cfg[key] = str(base / cfg[key])
        for key in ("estimate_scale", "refine", "colorize", "timings"):
            if key in cfg:
                try:
                    cfg[key] = parse_bool(cfg[key])
                except argparse.ArgumentTypeError as exc:
                    raise ValidationError(f"config {key}: {exc}") from None
    cfg.update(overrides)
    try:
        config = PipelineConfig(**cfg)
    except TypeError as exc:
        raise ValidationError(f"bad config: {exc}") from None
    config.validate()
    return config


# ---------------------------------------------------------------------------
# stage helpers

class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.timings = {}

    def stage(self, name):
        clock = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                if clock.enabled:
                    clock.timings[name] = round((time.perf_counter() - self.t0) * 1000.0, 3)
                return False
        return _Ctx()


def _scene_and_field(cfg: PipelineConfig):
    cfg.require("cloud", "embeddings", "query", "canonicals")
    cloud = load_embedded_cloud(cfg.cloud, cfg.embeddings)
    q = load_query_set(cfg.query, cfg.canonicals, cfg.prompt)
    field = compute_relevancy(cloud, q, cfg.method)
    return cloud, field


def _relevancy_summary(field) -> dict:
    st = relevancy_stats(field)
    return {"method": field.method, "min": st.min, "max": st.max, "mean": st.mean}


def _segmentation_summary(cloud, seg, cfg: PipelineConfig) -> dict:
    out = {"threshold": cfg.threshold, "eps": seg.labeling.eps, "min_pts": seg.labeling.min_pts,
           "policy": cfg.select, "cluster_count": seg.labeling.cluster_count,
           "cluster_id": seg.cluster_id, "selected_size": int(seg.selected_indices.size),
           "centroid": seg.centroid.tolist()}
    if cloud.labels is not None and np.any(cloud.labels == cfg.target_label):
        p, r, iou = set_metrics(seg.selected_indices, np.flatnonzero(cloud.labels == cfg.target_label))
        out["metrics"] = {"precision": p, "recall": r, "iou": iou}
    return out


def _load_ground_truth(path, target: int) -> RigidTransform:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"ground truth {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list) or not 0 <= target < len(data):
        raise ValidationError(f"ground truth has no pose for object {target}")
    d = data[target]
    try:
        return RigidTransform.from_matrix(d["rotation"], d["translation"], d.get("scale", 1.0),
                                          project=True)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad ground-truth pose: {exc}") from None


def _pose_errors_dict(model, est: RigidTransform, gt: RigidTransform) -> dict:
    r, t = pose_errors(est, gt)
    out = {"rotation_deg": r, "translation_m": t}
    if model is not None:
        add, adds = add_metrics(model, est, gt)
        out.update(add=add, add_s=adds)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: PipelineConfig) -> int:
    if cfg.spec is not None:
        cfg.require("spec")
        spec = load_scene_spec(cfg.spec)
        if cfg.seed is not None:
            spec.seed = cfg.seed
    elif cfg.preset == "red-cube":
        spec = red_face_cube_spec(cfg.seed or 0)
    else:
        spec = desk_scene_spec(cfg.seed or 0)
    scene = generate_scene(spec)
    out = cfg.out_path("scene")
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(scene.cloud, out / "scene.ply")
    save_embedding_matrix(scene.cloud.embeddings, out / "scene.lemb")
    save_embedding_matrix(scene.canonicals, out / "canonicals.lemb")
    for i, (sig, model) in enumerate(zip(scene.signatures, scene.models)):
        save_embedding_matrix(sig[None, :], out / f"query_{i}.lemb")
        save_cloud(model, out / f"model_{i}.ply")
    write_json([pose_record(t) for t in scene.ground_truth], out / "ground_truth.json")
    write_json({"cloud": "scene.ply", "embeddings": "scene.lemb", "query": "query_0.lemb",
                "canonicals": "canonicals.lemb", "model": "model_0.ply",
                "ground_truth": "ground_truth.json", "target_label": 0},
               out / "pipeline_config.json")
    log.info("wrote %d points, %d objects to %s", len(scene.cloud), len(scene.models), out)
    return EXIT_OK


def cmd_relevancy(cfg: PipelineConfig) -> int:
    cloud, field = _scene_and_field(cfg)
    out = cfg.out_path("relevancy.ply")
    result = colorize(cloud, field) if cfg.colorize else cloud.replace(relevancy=field.scores)
    save_cloud(result, out)
    s = relevancy_stats(field)
    log.info("relevancy %s: min %.4f max %.4f mean %.4f -> %s", field.method, s.min, s.max, s.mean, out)
    return EXIT_OK


def cmd_segment(cfg: PipelineConfig) -> int:
    cloud, field = _scene_and_field(cfg)
    seg = segment(cloud, field, cfg.tau, cfg.eps, cfg.min_pts, cfg.select)
    summary = _segmentation_summary(cloud, seg, cfg)
    summary["selected_indices"] = seg.selected_indices.tolist()
    write_json(summary, cfg.out_path("segment.json"))
    log.info("selected %d points in cluster %d of %d", seg.selected_indices.size,
             seg.cluster_id, seg.labeling.cluster_count)
    return EXIT_OK


def cmd_localize(cfg: PipelineConfig) -> int:
    cfg.require("model")
    cloud, field = _scene_and_field(cfg)
    model = load_cloud(cfg.model)
    seg = segment(cloud, field, cfg.tau, cfg.eps, cfg.min_pts, cfg.select)
    radius = cfg.crop_factor * model_diameter(model.points)
    crop = crop_region(cloud, seg.centroid, radius)
    write_json({"centroid": seg.centroid.tolist(), "crop_radius": radius,
                "crop_size": int(crop.size), "crop_indices": crop.tolist()},
               cfg.out_path("localize.json"))
    log.info("centroid %s, %d points within %.4f m", np.round(seg.centroid, 4), crop.size, radius)
    return EXIT_OK


def cmd_register(cfg: PipelineConfig) -> int:
    cfg.require("cloud", "model")
    observation = load_cloud(cfg.cloud)
    model = load_cloud(cfg.model)
    est = register(model, observation, cfg.registration_params())
    write_json(pose_record(est.transform, len(est.inlier_indices), est.converged,
                           est.residual_rms, est.diagnostics.get("stage_timings_ms")),
               cfg.out_path("pose.json"))
    log.info("registered with %d inliers, residual %.5f m", len(est.inlier_indices), est.residual_rms)
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig) -> int:
    cfg.require("cloud", "embeddings", "query", "canonicals", "model")
    if cfg.ground_truth is not None:
        cfg.require("ground_truth")
    out = cfg.out_path("run")
    clock = _Clock(cfg.timings)
    report = {"status": "ok", "exit_code": EXIT_OK, "stage": None, "error": None,
              "parameters": _parameters(cfg)}

    # input stage: any failure here is exit 1 with no report
    with clock.stage("load"):
        cloud = load_embedded_cloud(cfg.cloud, cfg.embeddings)
        q = load_query_set(cfg.query, cfg.canonicals, cfg.prompt)
        model = load_cloud(cfg.model)
        gt = _load_ground_truth(cfg.ground_truth, cfg.target_label) if cfg.ground_truth else None

    code = EXIT_OK
    try:
        with clock.stage("relevancy"):
            field = compute_relevancy(cloud, q, cfg.method)
        report["relevancy"] = _relevancy_summary(field)
        with clock.stage("segmentation"):
            seg = segment(cloud, field, cfg.tau, cfg.eps, cfg.min_pts, cfg.select)
        report["segmentation"] = _segmentation_summary(cloud, seg, cfg)
        with clock.stage("localization"):
            radius = cfg.crop_factor * model_diameter(model.points)
            crop = crop_region(cloud, seg.centroid, radius)
            if crop.size == 0:
                raise NoObjectFoundError("crop around the centroid is empty")
        report["localization"] = {"centroid": seg.centroid.tolist(), "crop_radius": radius,
                                  "crop_size": int(crop.size)}
        with clock.stage("registration"):
            try:
                est = register(model, cloud.subset(crop), cfg.registration_params())
            except RegistrationError:
                raise
            except PromptPoseError as exc:
                raise RegistrationError(str(exc)) from exc
        diag = dict(est.diagnostics)
        solver_timings = diag.pop("stage_timings_ms", {})
        report["registration"] = {"inliers": len(est.inlier_indices), "converged": est.converged,
                                  "gnc_iterations": est.iterations,
                                  "residual_rms": est.residual_rms, **diag}
        pose = pose_record(est.transform, len(est.inlier_indices), est.converged,
                           est.residual_rms, solver_timings)
        out.mkdir(parents=True, exist_ok=True)
        write_json(pose, out / "pose.json")
        if gt is not None:
            report["evaluation"] = _pose_errors_dict(model, est.transform, gt)
        log.info("pose estimated with %d inliers", len(est.inlier_indices))
    except NoObjectFoundError as exc:
        code = EXIT_NO_OBJECT
        report.update(status="no_object_found", stage="segmentation", error=str(exc))
        log.error("segmentation: %s", exc)
    except RegistrationError as exc:
        code = EXIT_REGISTRATION
        report.update(status="registration_failed", stage=exc.stage, error=str(exc))
        log.error("registration (%s): %s", exc.stage, exc)
    report["exit_code"] = code
    report["stage_timings_ms"] = clock.timings
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    return code


def cmd_sweep(cfg: PipelineConfig) -> int:
    cloud, field = _scene_and_field(cfg)
    taus = parse_grid(cfg.thresholds)
    rows = threshold_sweep(cloud, field, taus, cfg.eps, cfg.min_pts, cfg.target_label)
    out = cfg.out_path("sweep")
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    write_json({"status": "ok", "exit_code": EXIT_OK, "parameters": _parameters(cfg),
                "relevancy": _relevancy_summary(field),
                "sweep": [asdict(r) for r in rows]}, out / "report.json")
    best = max(rows, key=lambda r: r.iou)
    log.info("best IoU %.4f at tau %.4g", best.iou, best.tau)
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig) -> int:
    cfg.require("pose", "ground_truth")
    if cfg.model is not None:
        cfg.require("model")
    est = read_pose(cfg.pose)
    gt = _load_ground_truth(cfg.ground_truth, cfg.target_label)
    model = load_cloud(cfg.model) if cfg.model is not None else None
    errors = _pose_errors_dict(model, est, gt)
    write_json(errors, cfg.out_path("eval.json"))
    log.info("rotation error %.4f deg, translation error %.5f m",
             errors["rotation_deg"], errors["translation_m"])
    return EXIT_OK


def _parameters(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["seed"] = cfg.seed or 0
    return d


COMMANDS = {"synth": cmd_synth, "relevancy": cmd_relevancy, "segment": cmd_segment,
            "localize": cmd_localize, "register": cmd_register, "pipeline": cmd_pipeline,
            "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "quiet")}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except NoObjectFoundError as exc:
        log.error("segmentation: %s", exc)
        return EXIT_NO_OBJECT
    except RegistrationError as exc:
        log.error("registration (%s): %s", exc.stage, exc)
        return EXIT_REGISTRATION
    except PromptPoseError as exc:
        log.error("input: %s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("input: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
