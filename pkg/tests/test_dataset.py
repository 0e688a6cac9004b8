import hashlib

import numpy as np
import pytest

from igcn.dataset import (DatasetConfig, build_dataset, generate_sample, load_dataset, manifest_text,
                          plan_dataset, read_manifest, split_samples, write_dataset)
from igcn.phantom import ExcessiveDeformationError

SMALL = DatasetConfig(n_train=2, n_augment=1, n_test=2, image_size=32, seed=3)


@pytest.fixture(scope="module")
def samples():
    return build_dataset(SMALL)


def test_plan_counts():
    plans = plan_dataset(SMALL)
    assert [p.split for p in plans].count("train") == 2
    assert [p.split for p in plans].count("augment") == 1
    assert [p.split for p in plans].count("test") == 2
    assert len({p.sample_id for p in plans}) == len(plans)


def test_paper_scale_plan():
    cfg = DatasetConfig.paper_scale()
    plans = plan_dataset(cfg)
    assert sum(p.split != "test" for p in plans) == 144
    assert sum(p.split == "test" for p in plans) == 15
    assert cfg.image_size == 640


def test_samples_are_consistent(samples):
    train, test = split_samples(samples)
    assert len(train) == 3 and len(test) == 2
    for s in samples:
        assert s.drr.shape == (32, 32)
        assert 0.0 <= s.drr.min() and s.drr.max() <= 1.0
        assert s.initial_mesh.n == s.target_mesh.n
        assert np.array_equal(s.initial_mesh.triangles, s.target_mesh.triangles)
        np.testing.assert_allclose(s.target_mesh.vertices,
                                   s.field.displacement(s.initial_mesh.vertices) + s.initial_mesh.vertices,
                                   atol=1e-9)


def test_augment_is_translation_only(samples):
    aug = [s for s in samples if s.split == "augment"]
    for s in aug:
        shift = s.target_mesh.vertices - s.initial_mesh.vertices
        np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-9)
    rbf = [s for s in samples if s.kind == "rbf"]
    assert all(len(s.field.centers) == SMALL.rbf_count for s in rbf)


def test_no_augment_means_only_rbf_samples():
    plans = plan_dataset(DatasetConfig(n_train=3, n_augment=0, n_test=1))
    assert {p.kind for p in plans} == {"rbf"}


def test_sample_independent_of_other_samples():
    # sample seeds derive from (seed, split, index), not from generation order
    a = generate_sample(SMALL, plan_dataset(SMALL)[1])
    bigger = DatasetConfig(**{**SMALL.__dict__, "n_train": 5})
    b = generate_sample(bigger, plan_dataset(bigger)[1])
    assert a.target_mesh.vertices.tobytes() == b.target_mesh.vertices.tobytes()


def test_serial_and_parallel_agree(samples):
    par = build_dataset(SMALL, workers=2)
    for a, b in zip(samples, par):
        assert a.sample_id == b.sample_id
        assert a.drr.tobytes() == b.drr.tobytes()
        assert a.target_mesh.vertices.tobytes() == b.target_mesh.vertices.tobytes()


def test_manifest_byte_identical(tmp_path, samples):
    write_dataset(tmp_path / "a", samples, SMALL.camera())
    write_dataset(tmp_path / "b", build_dataset(SMALL), SMALL.camera())
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(tmp_path / "a" / "manifest.csv") == digest(tmp_path / "b" / "manifest.csv")
    for f in (tmp_path / "a" / "samples").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "samples" / f.name).read_bytes()


def test_disk_round_trip(tmp_path, samples):
    write_dataset(tmp_path, samples, SMALL.camera())
    rows = read_manifest(tmp_path)
    assert [r["sample_id"] for r in rows] == [s.sample_id for s in samples]
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.drr, b.drr)
        np.testing.assert_allclose(a.target_mesh.vertices, b.target_mesh.vertices, atol=5e-7)  # OBJ keeps 6 decimals
        np.testing.assert_allclose(a.raw, b.raw, rtol=1e-6)
        np.testing.assert_allclose(a.field.translation, b.field.translation)
        np.testing.assert_allclose(a.field.amplitudes, b.field.amplitudes)
    test_only = load_dataset(tmp_path, splits={"test"})
    assert [s.split for s in test_only] == ["test", "test"]


def test_manifest_records_raw_range(samples):
    paths = {s.sample_id: dict.fromkeys(("initial", "target", "drr", "raw"), "x") for s in samples}
    text = manifest_text(samples, paths)
    assert text.splitlines()[0].startswith("sample_id,split,kind")
    assert len(text.splitlines()) == len(samples) + 1


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        DatasetConfig(n_train=0, n_augment=0).validate()
    with pytest.raises(ValueError):
        DatasetConfig(projection="fisheye").validate()
    with pytest.raises(ValueError):
        DatasetConfig(shape_jitter=0.7).validate()


def test_impossible_deformation_gives_up():
    cfg = DatasetConfig(n_train=1, n_test=0, image_size=16, rbf_amplitude=500.0, rbf_width=(5.0, 6.0),
                        max_retries=1)
    with pytest.raises(ExcessiveDeformationError):
        build_dataset(cfg)
