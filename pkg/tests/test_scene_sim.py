import numpy as np
import pytest

from psplat.errors import ConfigError, GenerationError
from psplat.formats import (depth_from_png, load_cameras, load_fmap_raw, load_gt, load_ply, load_png16, load_queries,
                            read_bytes)
from psplat.geometry import observe
from psplat.metrics import evaluate
from psplat.scene_sim import SPLIT_ID_OFFSET, SimConfig, generate, perturb, thing_instances, write_scene

SMALL = dict(object_count=3, camera_count=6, points_per_object=400, image_size=(80, 60), stuff_spacing=0.1)


@pytest.fixture(scope="module")
def small_scene():
    return generate(SimConfig(**SMALL))


def test_config_validation():
    for bad in ({"object_count": 0}, {"feature_noise": -0.1}, {"mask_corruption": 1.5}, {"shapes": ("sphere",)},
                {"camera_count": 0}):
        with pytest.raises(ConfigError):
            SimConfig(**bad)
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"objects": 3})
    assert SimConfig.from_dict(SimConfig(seed=4).to_dict()) == SimConfig(seed=4)


def test_one_box_one_camera():
    scene = generate(SimConfig(object_count=1, shapes=("box",), camera_count=1, room=False, mask_corruption=0.0))
    obs = observe(scene.cloud.positions, scene.views[0], use_depth=False)
    assert obs.visible.all()
    ids = np.unique(scene.masks[0])
    assert ids[ids > 0].tolist() == [1]


def test_noiseless_features_equal_embeddings():
    scene = generate(SimConfig(**SMALL, feature_noise=0.0, mask_corruption=0.0))
    emb = scene.queries.embeddings.astype(np.float32)
    for fmap, owner in zip(scene.feature_maps, scene.owners):
        has = owner >= 0
        assert np.array_equal(fmap[has], emb[scene.gt.semantic[owner[has]]])
        assert np.all(fmap[~has] == 0)


def test_embeddings_orthonormal(small_scene):
    emb = small_scene.queries.embeddings
    assert np.allclose(emb @ emb.T, np.eye(len(emb)), atol=1e-6)


def test_ground_truth_layout(small_scene):
    gt = small_scene.gt
    assert len(thing_instances(gt)) == 3
    assert list(gt.class_names[-2:]) == ["floor", "wall"]
    # things sit on the floor, inside the room
    things = gt.semantic < len(gt.kinds) - 2
    pos = small_scene.cloud.positions
    assert pos[things, 2].min() >= -1e-6
    assert np.all(np.abs(pos[:, :2]) <= 2.0 + 1e-6)


def test_same_seed_byte_identical(tmp_path):
    a = write_scene(generate(SimConfig(**SMALL)), tmp_path / "a")
    write_scene(generate(SimConfig(**SMALL)), tmp_path / "b")
    names = ["cloud.ply", "cameras.json", "queries.json", "ground_truth.json", "scene_manifest.json"]
    names += a["files"]["depth"] + a["files"]["features"] + a["files"]["masks"]
    for name in names:
        assert read_bytes(tmp_path / "a" / name) == read_bytes(tmp_path / "b" / name), name


def test_different_seed_differs(small_scene):
    other = generate(SimConfig(**{**SMALL, "seed": 1}))
    assert not np.array_equal(other.cloud.positions[:50], small_scene.cloud.positions[:50])


def test_round_trip(tmp_path, small_scene):
    m = write_scene(small_scene, tmp_path)
    cloud = load_ply(tmp_path / "cloud.ply")
    assert np.array_equal(cloud.positions, small_scene.cloud.positions)
    assert np.array_equal(cloud.normals, small_scene.cloud.normals)
    views = load_cameras(tmp_path / "cameras.json")
    for v, orig, fname, mname in zip(views, small_scene.views, m["files"]["features"], m["files"]["masks"]):
        assert np.array_equal(v.world_to_camera, orig.world_to_camera)
        assert np.array_equal(v.depth_map, orig.depth_map)
        assert np.array_equal(load_fmap_raw(tmp_path / fname), small_scene.feature_maps[orig.view_id])
        assert np.array_equal(load_png16(tmp_path / mname), small_scene.masks[orig.view_id])
    q = load_queries(tmp_path / "queries.json")
    assert np.array_equal(q.embeddings, small_scene.queries.embeddings) and q.kinds == small_scene.queries.kinds
    gt = load_gt(tmp_path / "ground_truth.json")
    assert np.array_equal(gt.semantic, small_scene.gt.semantic)
    assert np.array_equal(gt.instance, small_scene.gt.instance)


def test_depth_quantised_to_millimetres(small_scene):
    d = small_scene.views[0].depth_map
    assert np.array_equal(depth_from_png(np.round(d * 1000).astype(np.uint16)), d)


def test_ground_truth_scores_perfectly_against_itself(small_scene):
    gt = small_scene.gt
    rep = evaluate(gt.as_labeling(), gt)
    assert rep.miou == rep.prq_thing == rep.prq_stuff == 1.0


def test_perturb_zero_is_identity(small_scene):
    same = perturb(small_scene)
    assert all(np.array_equal(a, b) for a, b in zip(same.feature_maps, small_scene.feature_maps))
    assert all(np.array_equal(a, b) for a, b in zip(same.masks, small_scene.masks))


def test_perturb_features_keeps_geometry():
    base = generate(SimConfig(**SMALL, feature_noise=0.0))
    noisy = perturb(base, feature_noise=0.3)
    assert noisy.config.feature_noise == pytest.approx(0.3)
    assert np.array_equal(noisy.cloud.positions, base.cloud.positions)
    assert all(np.array_equal(a.depth_map, b.depth_map) for a, b in zip(noisy.views, base.views))
    assert any(not np.array_equal(a, b) for a, b in zip(noisy.feature_maps, base.feature_maps))
    # the source scene is untouched
    assert np.array_equal(base.feature_maps[0], generate(SimConfig(**SMALL, feature_noise=0.0)).feature_maps[0])


def test_perturb_normals():
    base = generate(SimConfig(**SMALL))
    noisy = perturb(base, normal_noise=0.2)
    assert not np.array_equal(noisy.cloud.normals, base.cloud.normals)
    assert np.allclose(np.linalg.norm(noisy.cloud.normals, axis=1), 1, atol=1e-5)


def test_mask_split_monte_carlo():
    cfg = dict(SMALL, object_count=2, camera_count=4, mask_corruption=0.0)
    for seed in range(20):
        base = generate(SimConfig(**cfg, seed=seed))
        assert all(m.max() < SPLIT_ID_OFFSET for m in base.masks)
        split = perturb(base, mask_corruption=0.5)
        assert any(np.any(m > SPLIT_ID_OFFSET) for m in split.masks), seed


def test_unsatisfiable_placement():
    with pytest.raises(GenerationError):
        generate(SimConfig(object_count=40, shapes=("box",), placement_radius=0.3))
