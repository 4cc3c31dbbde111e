import json

import numpy as np
import pytest

from conftest import random_transform
from promptpose.cloud import EmbeddedCloud, RigidTransform
from promptpose.correspondence import CorrespondenceSet
from promptpose.errors import ValidationError
from promptpose.ingest import QuerySet
from promptpose.registration import RegistrationParams, solve_correspondences
from promptpose.relevancy import cosine_relevancy
from promptpose.synth import (CLUTTER_MAX_SIMILARITY, CUBE_SIDE, ObjectSpec, SceneSpec,
                              desk_scene_spec, generate_scene, load_scene_spec,
                              perturb_correspondences, pose_to_dict, red_face_cube_spec)


def identity_corr(n):
    idx = np.arange(n)
    return CorrespondenceSet(idx, idx, np.zeros(n), n, n)


class TestGenerateScene:
    def test_single_cube(self):
        pose = RigidTransform(np.eye(3), [0.1, -0.2, 0.3])
        scene = generate_scene(SceneSpec([ObjectSpec("cube", 500, pose=pose)], seed=1))
        cloud = scene.cloud
        assert len(cloud) == 500 and np.all(cloud.labels == 0)
        # sampling error of a mean over 500 surface points, side 0.1
        assert np.linalg.norm(cloud.points.mean(axis=0) - pose.translation) < 0.01

    def test_points_lie_on_the_posed_surface(self, rng):
        pose = random_transform(rng)
        scene = generate_scene(SceneSpec([ObjectSpec("cube", 300, pose=pose)], seed=2))
        assert scene.ground_truth[0] is pose
        local = pose.inverse().apply(scene.cloud.points)
        assert np.abs(np.abs(local).max(axis=1) - CUBE_SIDE / 2).max() < 1e-12

    def test_deterministic(self):
        a = generate_scene(desk_scene_spec(seed=4, points=200))
        b = generate_scene(desk_scene_spec(seed=4, points=200))
        for x, y in [(a.cloud.points, b.cloud.points), (a.cloud.colors, b.cloud.colors),
                     (a.cloud.embeddings, b.cloud.embeddings), (a.cloud.labels, b.cloud.labels),
                     (a.models[0].points, b.models[0].points)]:
            assert x.tobytes() == y.tobytes()
        for p, q in zip(a.ground_truth, b.ground_truth):
            assert p.rotation.tobytes() == q.rotation.tobytes()
            assert p.translation.tobytes() == q.translation.tobytes()

    def test_seed_matters(self):
        a = generate_scene(desk_scene_spec(seed=0, points=100))
        b = generate_scene(desk_scene_spec(seed=1, points=100))
        assert not np.array_equal(a.cloud.points, b.cloud.points)

    def test_orthogonal_signatures_separate(self):
        scene = generate_scene(SceneSpec([ObjectSpec("cube", 300), ObjectSpec("sphere", 300)],
                                         seed=3))
        sig = scene.signatures
        assert abs(sig[0] @ sig[1]) < 1e-12
        assert np.allclose(np.linalg.norm(sig, axis=1), 1.0)
        scores = cosine_relevancy(scene.cloud, QuerySet(sig[0], scene.canonicals)).scores
        lab = scene.cloud.labels
        assert scores[lab == 0].min() - scores[lab == 1].max() >= 0.5

    def test_clutter_similarity_is_bounded(self):
        scene = generate_scene(desk_scene_spec(seed=5, points=300))
        clutter = scene.cloud.labels == -1
        assert clutter.sum() == 900
        sims = scene.cloud.embeddings[clutter] @ scene.signatures.T
        assert sims.max() < CLUTTER_MAX_SIMILARITY

    def test_embeddings_are_unit(self):
        scene = generate_scene(desk_scene_spec(seed=6, points=100))
        assert np.allclose(np.linalg.norm(scene.cloud.embeddings, axis=1), 1.0)

    def test_noise_is_applied(self):
        pose = RigidTransform.identity()
        spec = SceneSpec([ObjectSpec("sphere", 2000, pose=pose)], noise_sigma=0.005, seed=7)
        r = np.linalg.norm(generate_scene(spec).cloud.points, axis=1)
        assert np.std(r - 0.05) == pytest.approx(0.005, rel=0.1)

    def test_model_points_sets_prior_density(self):
        spec = SceneSpec([ObjectSpec("lshape", 100, model_points=250)], seed=0)
        scene = generate_scene(spec)
        assert len(scene.cloud) == 100 and len(scene.models[0]) == 250

    def test_red_face_cube(self):
        scene = generate_scene(red_face_cube_spec(0))
        m = scene.models[0]
        red = m.colors[:, 0] == 1.0
        assert np.all(m.points[red, 2] == pytest.approx(CUBE_SIDE / 2))
        assert 0.1 < red.mean() < 0.25

    @pytest.mark.parametrize("kw", [dict(shape="torus"), dict(shape="cube", points=0),
                                    dict(shape="sphere", color="red-face"),
                                    dict(shape="cube", color="plaid"),
                                    dict(shape="external-ply")])
    def test_bad_object(self, kw):
        with pytest.raises(ValidationError):
            ObjectSpec(**kw)

    def test_bad_scene(self):
        with pytest.raises(ValidationError):
            SceneSpec([])
        with pytest.raises(ValidationError):
            SceneSpec([ObjectSpec("cube")], noise_sigma=-1)

    def test_external_ply(self, tmp_path):
        from promptpose.ingest import save_cloud

        src = EmbeddedCloud(np.random.default_rng(0).normal(size=(50, 3)))
        save_cloud(src, tmp_path / "m.ply")
        spec = SceneSpec([ObjectSpec("external-ply", 80, path=str(tmp_path / "m.ply"))])
        assert len(generate_scene(spec).cloud) == 80

    def test_spec_json(self, tmp_path):
        pose = RigidTransform(np.eye(3), [0, 0, 0.2])
        doc = {"objects": [{"shape": "cube", "points": 50, "color": "red-face",
                            "pose": pose_to_dict(pose)}],
               "clutter_points": 10, "seed": 9}
        (tmp_path / "s.json").write_text(json.dumps(doc))
        spec = load_scene_spec(tmp_path / "s.json")
        assert spec.seed == 9 and spec.clutter_points == 10
        assert np.allclose(spec.objects[0].pose.translation, [0, 0, 0.2])
        (tmp_path / "bad.json").write_text('{"objects": [{"points": 3}]}')
        with pytest.raises(ValidationError):
            load_scene_spec(tmp_path / "bad.json")


class TestPerturb:
    def test_zero_fraction_is_identity(self):
        corr = identity_corr(40)
        out, pos = perturb_correspondences(corr, 0.0)
        assert np.array_equal(out.dst, corr.dst) and pos.size == 0

    def test_exact_count(self):
        out, pos = perturb_correspondences(identity_corr(100), 0.5, seed=1)
        assert len(pos) == 50
        assert (out.dst != np.arange(100)).sum() == 50

    def test_bad_fraction(self):
        with pytest.raises(ValidationError):
            perturb_correspondences(identity_corr(10), 1.0)

    def test_corrupted_pairs_are_not_inliers(self, rng):
        # noise-free data, so a tight bound: a random replacement landing within
        # the default 1 cm of the true target would be a genuine inlier
        params = RegistrationParams(noise_bound=1e-3)
        disjoint = 0
        for trial in range(20):
            p = rng.uniform(-0.1, 0.1, size=(80, 3))
            T = random_transform(rng)
            bad, pos = perturb_correspondences(identity_corr(80), 0.6, seed=trial)
            est = solve_correspondences(bad, p, T.apply(p), params)
            disjoint += not set(pos.tolist()) & set(est.inlier_indices.tolist())
        assert disjoint >= 19
