import json

import numpy as np
import pytest

from msbm.common.errors import DatasetError
from msbm.datasets import (
    SyntheticSpec,
    gen_custom_mixture,
    gen_gaussian_chain,
    gen_petal,
    generate,
    load_snapshots,
    save_snapshots,
    snapshot_file,
    split,
)
from msbm.time_grid import MarginalDataset


def test_petal_starts_as_a_blob_and_splits_into_lobes():
    ds = gen_petal(SyntheticSpec("petal", n=400, seed=1))
    assert ds.grid.times == (0.0, 1.0, 2.0, 3.0, 4.0)
    assert ds.dim == 2 and ds.sizes == [400] * 5
    assert np.linalg.norm(ds.samples(0), axis=1).max() <= 0.3 + 1e-12

    final = ds.samples(4)
    radii = np.linalg.norm(final, axis=1)
    assert radii.mean() == pytest.approx(3.0, abs=0.05)
    angle = np.arctan2(final[:, 1], final[:, 0]) % (2 * np.pi)
    lobe = np.round(angle / (2 * np.pi / 5)) % 5
    offset = np.angle(np.exp(1j * (angle - 2 * np.pi * lobe / 5)))
    assert np.mean(np.abs(offset) < 0.3) > 0.95
    assert len(np.unique(lobe)) == 5


def test_petal_points_keep_their_lobe_over_time():
    ds = gen_petal(SyntheticSpec("petal", n=200, seed=2, noise=0.0))
    directions = ds.samples(4) / np.linalg.norm(ds.samples(4), axis=1, keepdims=True)
    np.testing.assert_allclose(ds.samples(2), 1.5 * directions, atol=1e-12)


def test_merging_petal_folds_back():
    ds = gen_petal(SyntheticSpec("petal", n=300, merge=True))
    assert np.linalg.norm(ds.samples(2), axis=1).mean() == pytest.approx(3.0, abs=0.05)
    assert np.linalg.norm(ds.samples(4), axis=1).mean() < 0.3


def test_petal_needs_two_lobes():
    with pytest.raises(ValueError):
        gen_petal(SyntheticSpec("petal", petals=1))


def test_gaussian_chain_default_means():
    ds = gen_gaussian_chain(SyntheticSpec("gaussian_chain", n=2000, seed=3))
    means = [ds.samples(j).mean() for j in range(3)]
    assert means == pytest.approx([0.0, 2.0, 0.0], abs=0.02)
    five = gen_gaussian_chain(SyntheticSpec("gaussian_chain", n=10, noise=0.0, times=(0, 1, 2, 3, 4)))
    assert [five.samples(j)[0, 0] for j in range(5)] == [0.0, 2.0, -2.0, 2.0, 0.0]


def test_gaussian_chain_modes_and_dimension():
    spec = SyntheticSpec("gaussian_chain", n=7, noise=0.0, dim=3, means=(0.0, (-1.0, 1.0), 0.5))
    ds = gen_gaussian_chain(spec)
    assert ds.dim == 3
    np.testing.assert_array_equal(ds.samples(1)[:, 0], [-1, -1, -1, -1, 1, 1, 1])
    np.testing.assert_array_equal(ds.samples(1)[:, 1:], 0.0)
    np.testing.assert_array_equal(ds.samples(2)[:, 0], 0.5)
    with pytest.raises(ValueError):
        gen_gaussian_chain(SyntheticSpec("gaussian_chain", times=(0, 1)))
    with pytest.raises(ValueError):
        gen_gaussian_chain(SyntheticSpec("gaussian_chain", times=(0, 1, 2), means=(0, 1)))


def test_custom_mixture():
    components = (
        ({"mean": [0.0, 0.0], "std": 0.0},),
        ({"mean": [-1.0, 0.0], "std": 0.0, "weight": 1}, {"mean": [1.0, 0.0], "std": 0.0, "weight": 3}),
    )
    ds = gen_custom_mixture(SyntheticSpec("custom_mixture", n=4000, components=components))
    assert ds.grid.times == (0.0, 1.0)
    np.testing.assert_array_equal(ds.samples(0), 0.0)
    assert np.mean(ds.samples(1)[:, 0] > 0) == pytest.approx(0.75, abs=0.03)
    with pytest.raises(ValueError):
        gen_custom_mixture(SyntheticSpec("custom_mixture"))


def test_generation_is_seeded():
    a = generate(SyntheticSpec("petal", n=50, seed=9))
    b = generate(SyntheticSpec("petal", n=50, seed=9))
    c = generate(SyntheticSpec("petal", n=50, seed=10))
    np.testing.assert_array_equal(a.samples(3), b.samples(3))
    assert not np.array_equal(a.samples(3), c.samples(3))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec("spiral")
    with pytest.raises(ValueError):
        SyntheticSpec("petal", times=(1.0, 0.0))
    with pytest.raises(ValueError):
        SyntheticSpec("petal", noise=-0.1)
    spec = SyntheticSpec("gaussian_chain", means=(0, 1, 0))
    assert SyntheticSpec.from_dict(spec.snapshot()).grid() == spec.grid()


def test_snapshot_directory_round_trip(tmp_path):
    ds = gen_petal(SyntheticSpec("petal", n=30, seed=4)).with_holdout(2)
    save_snapshots(ds, tmp_path / "petal")
    manifest = json.loads((tmp_path / "petal" / "grid.json").read_text())
    assert manifest["times"] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert manifest["files"] == [snapshot_file(j) for j in range(5)]
    assert manifest["holdout"] == [2]
    assert (tmp_path / "petal" / "snapshot_0.csv").read_text().startswith("x0,x1\n")

    loaded = load_snapshots(tmp_path / "petal")
    assert loaded.grid == ds.grid
    assert loaded.holdout == ds.holdout
    assert loaded.metadata["generator"]["seed"] == 4
    for j in range(5):
        np.testing.assert_array_equal(loaded.samples(j), ds.samples(j))


def test_regeneration_gives_identical_files(tmp_path):
    for name in ("a", "b"):
        save_snapshots(generate(SyntheticSpec("gaussian_chain", n=20, seed=5)), tmp_path / name)
    for file in ("grid.json", "snapshot_0.csv", "snapshot_1.csv", "snapshot_2.csv"):
        assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()


def test_non_finite_row_is_reported_with_its_line(tmp_path):
    save_snapshots(MarginalDataset.from_arrays([0, 1], [np.zeros((3, 1)), np.ones((3, 1))]), tmp_path)
    (tmp_path / "snapshot_1.csv").write_text("x0\n1\nnan\n1\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_snapshots(tmp_path)


def test_manifest_problems(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_snapshots(tmp_path)
    save_snapshots(MarginalDataset.from_arrays([0, 1], [np.zeros((3, 2)), np.ones((3, 2))]), tmp_path)
    manifest = json.loads((tmp_path / "grid.json").read_text())

    (tmp_path / "grid.json").write_text(json.dumps(dict(manifest, times=[0, 1, 2, 3, 4, 5])))
    with pytest.raises(DatasetError, match="2 files for 6 times"):
        load_snapshots(tmp_path)

    (tmp_path / "grid.json").write_text(json.dumps(dict(manifest, times=[1, 0])))
    with pytest.raises(DatasetError):
        load_snapshots(tmp_path)

    (tmp_path / "grid.json").write_text(json.dumps(manifest))
    (tmp_path / "snapshot_0.csv").write_text("a,b\n0,0\n")
    with pytest.raises(DatasetError, match="header"):
        load_snapshots(tmp_path)

    (tmp_path / "snapshot_0.csv").write_text("x0\n0\n")
    with pytest.raises(DatasetError, match="dimensions"):
        load_snapshots(tmp_path)


def test_split_is_disjoint_and_sized(rng):
    ds = MarginalDataset.from_arrays([0, 1], [rng.normal(size=(10, 2)), rng.normal(size=(25, 2))])
    train, test = split(ds, 0.8, seed=1)
    assert train.sizes == [8, 20] and test.sizes == [2, 5]
    for j in range(2):
        together = np.concatenate([train.samples(j), test.samples(j)])
        assert sorted(map(tuple, together)) == sorted(map(tuple, ds.samples(j)))
    assert train.metadata["part"] == "train" and test.metadata["split"] == {"ratio": 0.8, "seed": 1}
    again, _ = split(ds, 0.8, seed=1)
    np.testing.assert_array_equal(again.samples(1), train.samples(1))


def test_split_rejects_tiny_snapshots():
    ds = MarginalDataset.from_arrays([0, 1], [np.zeros((1, 1)), np.ones((5, 1))])
    with pytest.raises(DatasetError, match="snapshot 0"):
        split(ds, 0.8)
    with pytest.raises(ValueError):
        split(ds, 1.0)
