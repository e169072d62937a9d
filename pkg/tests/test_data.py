import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regionreg.cloud import PointCloud, chamfer
from regionreg.config import DataConfig, NoiseConfig
from regionreg.data import (KINDS, OneClassSample, ShapeSpec, build_datasets, drift_offsets, generate_shape,
                            inject_noise, make_dataset, make_pair, random_spec, random_transform,
                            sample_occupancy_points)
from regionreg.rigid import RigidTransform, matrix_to_euler_zyx

seeds = st.integers(0, 2 ** 31 - 1)


def test_sphere_points_lie_on_radius_half():
    shape = generate_shape(ShapeSpec("sphere", (0.8,), n_points=300), 0)
    r = np.linalg.norm(shape.cloud.points, axis=1)
    assert np.abs(r - 0.5).max() <= 1e-9
    assert shape.oracle(np.zeros(3))[0]
    assert not shape.oracle(np.array([2.0, 0, 0]))[0]


def test_box_oracle_matches_interval_test(rng):
    shape = generate_shape(ShapeSpec("box", (1.0, 0.5, 0.25), n_points=100), 1)
    # normalized half extents: 0.5, 0.25, 0.125
    probes = rng.uniform(-0.7, 0.7, size=(1000, 3))
    expected = (np.abs(probes) <= [0.5, 0.25, 0.125]).all(axis=1)
    np.testing.assert_array_equal(shape.oracle(probes), expected)
    assert np.abs(shape.cloud.points).max() <= 0.5 + 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_fits_the_unit_cube(kind):
    rng = np.random.default_rng(3)
    shape = generate_shape(random_spec(rng, kind, 200), 4)
    pts = shape.cloud.points
    assert pts.shape == (200, 3)
    assert np.abs(pts).max() <= 0.5 + 1e-9
    assert shape.oracle(np.zeros((1, 3))).dtype == bool


def test_union_surface_excludes_points_buried_in_the_other_part():
    rng = np.random.default_rng(5)
    spec = random_spec(rng, "union", 400)
    shape = generate_shape(spec, 0)
    # a buried point would have the oracle true in a ball around it; surface points have outside neighbours
    pts = shape.cloud.points
    offsets = rng.normal(size=(20, 3))
    offsets *= 0.02 / np.linalg.norm(offsets, axis=1, keepdims=True)
    outside_near = [(~shape.oracle(p + offsets)).any() for p in pts]
    assert all(outside_near)


def test_degenerate_specs_are_errors():
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("pyramid", (1.0,)), 0)
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("sphere", (0.0,)), 0)
    with pytest.raises(ValueError):
        generate_shape(ShapeSpec("box", (1.0, -1.0, 1.0)), 0)


def test_occupancy_samples_are_balanced_labelled_and_seeded():
    shape = generate_shape(ShapeSpec("sphere", (1.0,), n_points=256), 0)
    a = sample_occupancy_points(shape.oracle, shape.cloud, 4000, seed=9)
    frac = a.occupancy.mean()
    assert 0.1 < frac < 0.9
    np.testing.assert_array_equal(a.occupancy, shape.oracle(a.points))
    b = sample_occupancy_points(shape.oracle, shape.cloud, 4000, seed=9)
    assert a.points.tobytes() == b.points.tobytes()


def test_one_class_oracle_gives_up():
    cloud = PointCloud(np.zeros((4, 3)))
    with pytest.raises(OneClassSample, match="one-class"):
        sample_occupancy_points(lambda x: np.zeros(len(x), dtype=bool), cloud, 50, seed=0)
    with pytest.raises(ValueError):
        sample_occupancy_points(lambda x: np.zeros(len(x), dtype=bool), cloud, 1, seed=0)


def test_identity_override_gives_reordered_source():
    shape = generate_shape(ShapeSpec("box", (1.0, 0.6, 0.3), n_points=64), 0)
    pair = make_pair(shape, 1, transform=RigidTransform.identity())
    assert sorted(map(tuple, pair.target.points)) == sorted(map(tuple, pair.source.points))
    assert pair.target.points.tobytes() != pair.source.points.tobytes()


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_ground_truth_maps_source_onto_target(seed):
    shape = generate_shape(ShapeSpec("box", (1.0, 0.6, 0.3), n_points=32), seed % 1000)
    pair = make_pair(shape, seed, negatives=16)
    assert chamfer(pair.gt.apply(pair.source.points), pair.target.points).item() <= 1e-24
    # target occupancy labels use the moved oracle
    np.testing.assert_array_equal(pair.sampled_target.occupancy,
                                  shape.oracle(pair.gt.inverse().apply(pair.sampled_target.points)))


def test_drawn_angles_and_translations_stay_in_range():
    for seed in range(10_000):
        T = random_transform(np.random.default_rng(seed))
        angles, _ = matrix_to_euler_zyx(T.R)
        assert (angles >= -1e-9).all() and (angles <= 45 + 1e-9).all(), seed
        assert (np.abs(T.t) <= 0.5).all()


def test_datasets_are_seeded_and_disjoint():
    cfg = DataConfig(n_points=32, n_train=3, n_eval=2, seed=4)
    a_train, a_test = build_datasets(cfg, negatives=8)
    b_train, _ = build_datasets(cfg, negatives=8)
    assert [p.source.points.tobytes() for p in a_train] == [p.source.points.tobytes() for p in b_train]
    train_keys = {p.source.points.tobytes() for p in a_train}
    assert not train_keys & {p.source.points.tobytes() for p in a_test}
    c = make_dataset(3, cfg, seed=5, negatives=8)
    assert c[0].source.points.tobytes() != a_train[0].source.points.tobytes()


def noise_pair(n=400, seed=0):
    shape = generate_shape(ShapeSpec("box", (1.0, 0.6, 0.3), n_points=n), seed)
    return make_pair(shape, seed)


@pytest.mark.parametrize("n", [256, 400, 1024, 7])
def test_incompleteness_keeps_exactly_three_quarters(n):
    pair = noise_pair(n)
    noisy = inject_noise(pair, "DI", seed=3)
    k = int(round(0.75 * n))
    assert len(noisy.source) == k and len(noisy.target) == k
    assert noisy.noise == "DI"
    src = {tuple(p) for p in pair.source.points}
    assert all(tuple(p) in src for p in noisy.source.points)


def test_point_drift_is_clipped_source_only_bijection():
    pair = noise_pair(500)
    for seed in range(20):
        noisy = inject_noise(pair, "PD", seed)
        offsets = drift_offsets(np.random.default_rng(seed), 500, 0.1, 0.05)
        assert noisy.source.points.tobytes() == (pair.source.points + offsets).tobytes()
        assert noisy.target is pair.target
    big = drift_offsets(np.random.default_rng(0), 10_000, 0.1, 0.05)
    assert np.abs(big).max() <= 0.05
    # sigma 0.1 against a 0.05 clip: most mass sits on the bound
    assert (np.abs(big) == 0.05).mean() > 0.5


def test_outliers_preserve_cardinality():
    pair = noise_pair(256)
    noisy = inject_noise(pair, "DO", seed=1)
    assert len(noisy.source) == 256 and len(noisy.target) == 256
    kept = {tuple(p) for p in pair.source.points}
    assert sum(tuple(p) in kept for p in noisy.source.points) == 256 - round(0.1 * 256)


def test_noise_is_seeded_and_unknown_kind_rejected():
    pair = noise_pair(64)
    a = inject_noise(pair, "DO", 5)
    b = inject_noise(pair, "DO", 5)
    assert a.source.points.tobytes() == b.source.points.tobytes()
    assert inject_noise(pair, "clean", 0) is pair
    with pytest.raises(ValueError):
        inject_noise(pair, "blur", 0)


def test_noise_config_knobs_are_honoured():
    pair = noise_pair(200)
    assert len(inject_noise(pair, "DI", 0, NoiseConfig(di_keep_ratio=0.5)).source) == 100
    noisy = inject_noise(pair, "PD", 0, NoiseConfig(pd_clip=0.01))
    offsets = drift_offsets(np.random.default_rng(0), 200, 0.1, 0.01)
    assert np.abs(offsets).max() <= 0.01
    assert noisy.source.points.tobytes() == (pair.source.points + offsets).tobytes()
