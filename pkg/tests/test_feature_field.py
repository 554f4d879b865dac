import numpy as np
import pytest

from psplat.errors import ConfigError, PipelineError
from psplat.feature_field import (Adam, DistillConfig, FeatureDecoder, PyramidTriPlane, decode, distill,
                                  field_features, loss, parameters, query_latent)
from psplat.fusion import FeatureMap, FusedFeatureCloud, fuse
from psplat.geometry import PrimitiveCloud
from psplat.scene_sim import SimConfig, generate


def small_field(rng, resolutions=(4,), channels=2, scale=0.5):
    f = PyramidTriPlane.create([-1, -1, -1], [1, 2, 3], resolutions, channels, rng)
    for p in f.planes:
        p[:] = rng.uniform(-scale, scale, size=p.shape)
    return f


def test_invariants():
    with pytest.raises(ConfigError):
        PyramidTriPlane.create([0, 0, 0], [1, 0, 1])
    with pytest.raises(ConfigError):
        PyramidTriPlane.create([0, 0, 0], [1, 1, 1], resolutions=(8, 8))


def test_for_positions_grows_box_five_percent():
    f = PyramidTriPlane.for_positions(np.array([[0, 0, 0], [1, 2, 4.0]]), resolutions=(4,), channels=1)
    assert np.allclose(f.aabb_min, [-0.05, -0.1, -0.2])
    assert np.allclose(f.aabb_max, [1.05, 2.1, 4.2])


def test_code_layout_per_plane_then_per_level():
    rng = np.random.default_rng(0)
    f = small_field(rng, resolutions=(3, 5), channels=2)
    # world position at the (0,0,0) corner is a node of every plane of every level
    g = query_latent(f, f.aabb_min)
    expect = []
    for planes in f.planes:
        for p in range(3):
            expect.append(planes[p, 0, 0])
    assert np.array_equal(g, np.concatenate(expect))
    assert g.shape == (f.code_dim,) == (3 * 2 * 2,)


def test_out_of_box_clamps():
    rng = np.random.default_rng(1)
    f = small_field(rng, resolutions=(4, 8), channels=3)
    p = np.array([[5.0, -7.0, 0.3]])
    clamped = np.clip(p, f.aabb_min, f.aabb_max)
    assert np.array_equal(query_latent(f, p), query_latent(f, clamped))


def test_piecewise_bilinear_lipschitz():
    rng = np.random.default_rng(2)
    f = small_field(rng, resolutions=(5,), channels=2)
    ext = f.aabb_max - f.aabb_min
    cell = ext / 4
    # two points inside the same cell
    base = f.aabb_min + cell * np.array([1, 2, 1])
    p = base + cell * rng.uniform(0.1, 0.9, size=3)
    q = base + cell * rng.uniform(0.1, 0.9, size=3)
    # bound: per plane, gradient magnitude <= 2 * max|node| * (R-1) / extent per axis
    lip = 0
    for planes in f.planes:
        lip += 3 * 2 * np.abs(planes).max() * 4 / ext.min()
    assert np.linalg.norm(query_latent(f, p) - query_latent(f, q)) <= lip * np.linalg.norm(p - q)


def test_decode_constant_network():
    dec = FeatureDecoder.create(6, 4, 3, np.random.default_rng(0))
    for w in dec.weights:
        w[:] = 0
    dec.biases[-1][:] = [0, 3, 4]
    out = decode(dec, np.random.default_rng(1).normal(size=(5, 6)))
    assert np.allclose(out, [0, 0.6, 0.8])


def test_decode_zero_output_gives_e1():
    dec = FeatureDecoder.create(6, 4, 3, np.random.default_rng(0))
    for w in dec.weights:
        w[:] = 0
    assert np.array_equal(decode(dec, np.ones(6)), [1.0, 0.0, 0.0])


def test_decode_unit_norm_and_dimension_check():
    dec = FeatureDecoder.create(6, 16, 5, np.random.default_rng(3))
    out = decode(dec, np.random.default_rng(4).normal(size=(100, 6)))
    assert np.allclose(np.linalg.norm(out, axis=1), 1, atol=1e-6)
    with pytest.raises(ConfigError):
        decode(dec, np.ones(7))


def test_decode_golden_vector():
    # golden values from a scalar straight-line forward pass (seed-0 He-normal weights, zero biases)
    dec = FeatureDecoder.create(6, 8, 4, np.random.default_rng(0))
    g = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.25])
    golden = [0.6833914908335138, 0.6254113230704952, -0.33632347577812244, 0.16947939955075014]
    assert np.allclose(decode(dec, g), golden, atol=1e-12)


def test_loss_zero_when_decoded_equals_target():
    rng = np.random.default_rng(5)
    f = small_field(rng)
    dec = FeatureDecoder.create(f.code_dim, 16, 8, rng)
    pos = rng.uniform(f.aabb_min, f.aabb_max, size=(10, 3))
    targets = decode(dec, query_latent(f, pos))
    value, grads = loss(f, dec, pos, targets, np.ones(10))
    assert value == pytest.approx(0, abs=1e-12)
    assert all(np.abs(g).max() < 1e-10 for g in grads.values())


def test_loss_orthogonal_single_item():
    rng = np.random.default_rng(6)
    f = small_field(rng)
    dec = FeatureDecoder.create(f.code_dim, 16, 8, rng)
    pos = np.array([[0.1, 0.2, 0.3]])
    feat = decode(dec, query_latent(f, pos))[0]
    other = rng.normal(size=8)
    other -= other @ feat * feat
    value, _ = loss(f, dec, pos, other[None], np.array([2.0]))
    assert value == pytest.approx(2.0, abs=1e-12)


def test_loss_rejects_negative_gamma_and_empty_batch():
    rng = np.random.default_rng(0)
    f = small_field(rng)
    dec = FeatureDecoder.create(f.code_dim, 4, 3, rng)
    with pytest.raises(ConfigError):
        loss(f, dec, np.zeros((1, 3)), np.ones((1, 3)), np.array([-1.0]))
    with pytest.raises(ConfigError):
        loss(f, dec, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


def test_loss_nonnegative():
    rng = np.random.default_rng(8)
    f = small_field(rng, resolutions=(4, 6))
    dec = FeatureDecoder.create(f.code_dim, 8, 5, rng)
    for _ in range(10):
        pos = rng.uniform(f.aabb_min, f.aabb_max, size=(20, 3))
        value, _ = loss(f, dec, pos, rng.normal(size=(20, 5)), rng.random(20), need_grad=False)
        assert value >= 0


def test_adam_first_step_bound():
    rng = np.random.default_rng(9)
    params = {"a": rng.normal(size=50), "b": rng.normal(size=(3, 4))}
    before = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, lr=1e-3)
    opt.step({k: rng.normal(size=v.shape) * 10 ** rng.uniform(-6, 3) for k, v in params.items()})
    for k in params:
        assert np.abs(params[k] - before[k]).max() <= 1e-3 * (1 + 1e-8)


def test_distill_requires_valid_primitive():
    rng = np.random.default_rng(0)
    cloud = PrimitiveCloud(rng.random((5, 3)))
    fused = FusedFeatureCloud(np.zeros((5, 3)), np.zeros(5), np.zeros(5, dtype=np.int64))
    f = PyramidTriPlane.for_positions(cloud.positions, resolutions=(4,), channels=2)
    dec = FeatureDecoder.create(f.code_dim, 4, 3, rng)
    with pytest.raises(PipelineError):
        distill(f, dec, fused, cloud, DistillConfig(iterations=1, batch_size=2))


def test_distill_config_validation():
    for bad in ({"iterations": 0}, {"batch_size": 0}, {"lr": 0.0}):
        with pytest.raises(ConfigError):
            DistillConfig(**bad)
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"iters": 3})


def _toy_problem(seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.random((200, 3))
    emb = np.eye(4)
    labels = (pos[:, 0] > 0.5).astype(int)
    feats = emb[labels]
    gam = np.where(rng.random(200) < 0.1, 0.0, 1.0)
    count = (gam > 0).astype(np.int64)
    fused = FusedFeatureCloud(feats * count[:, None], gam, count)
    return PrimitiveCloud(pos), fused


def _train(seed, iterations=20):
    cloud, fused = _toy_problem()
    rng = np.random.default_rng(seed)
    f = PyramidTriPlane.for_positions(cloud.positions, resolutions=(4, 8), channels=2, rng=rng)
    dec = FeatureDecoder.create(f.code_dim, 8, 4, rng)
    return distill(f, dec, fused, cloud, DistillConfig(iterations=iterations, batch_size=16, seed=seed))


def test_distill_same_seed_identical_history():
    a, b = _train(3), _train(3)
    assert a.history == b.history
    assert all(np.array_equal(x, y) for x, y in zip(a.field.planes, b.field.planes))


def test_distill_never_samples_invalid(monkeypatch):
    cloud, fused = _toy_problem()
    invalid = set(np.flatnonzero(fused.confidence == 0).tolist())
    seen = []
    import psplat.feature_field as ff
    real = ff.loss

    def spy(field_, dec, positions, targets, gammas, need_grad=True):
        seen.append(positions.copy())
        return real(field_, dec, positions, targets, gammas, need_grad)

    monkeypatch.setattr(ff, "loss", spy)
    _train(1, iterations=10)
    bad = cloud.positions[sorted(invalid)]
    for batch in seen:
        for p in batch:
            assert not np.any(np.all(bad == p, axis=1))


def test_field_features_function_of_position():
    rng = np.random.default_rng(2)
    f = small_field(rng, resolutions=(4, 8))
    dec = FeatureDecoder.create(f.code_dim, 8, 4, rng)
    pos = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
    out = field_features(f, dec, pos)
    assert np.array_equal(out[0], out[1])
    assert np.allclose(np.linalg.norm(out, axis=1), 1, atol=1e-4)


def test_parameters_names():
    rng = np.random.default_rng(0)
    f = small_field(rng, resolutions=(4, 8))
    dec = FeatureDecoder.create(f.code_dim, 8, 4, rng)
    assert sorted(parameters(f, dec)) == ["W0", "W1", "W2", "b0", "b1", "b2", "plane0", "plane1"]


@pytest.fixture(scope="module")
def fit_scene():
    """Room with one cabinet: three classes (cabinet, floor, wall)."""
    scene = generate(SimConfig(object_count=1, shapes=("box",), camera_count=12, feature_noise=0.0))
    fused = fuse(scene.cloud, scene.views, [FeatureMap(m) for m in scene.feature_maps])
    rng = np.random.default_rng(0)
    f = PyramidTriPlane.for_positions(scene.cloud.positions, resolutions=(16, 32, 64), rng=rng)
    dec = FeatureDecoder.create(f.code_dim, 64, fused.dim, rng)
    res = distill(f, dec, fused, scene.cloud, DistillConfig(iterations=2000, batch_size=1024, eval_every=100))
    return scene, fused, res


def test_distill_fits_synthetic_scene(fit_scene):
    scene, fused, res = fit_scene
    assert len(scene.queries) == 3
    feats = field_features(res.field, res.decoder, scene.cloud.positions)
    v = fused.valid
    assert np.mean(np.sum(feats[v] * fused.features[v], axis=1)) >= 0.99
    pred = np.argmax(feats @ scene.queries.embeddings.T, axis=1)
    assert np.mean(pred == scene.gt.semantic) >= 0.99


def test_distill_smoothed_full_loss_non_increasing(fit_scene):
    _, _, res = fit_scene
    full = np.array(res.full_history)
    assert len(full) == 20
    smooth = np.convolve(full, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 0)
