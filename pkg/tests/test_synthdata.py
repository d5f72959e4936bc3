import numpy as np
import pytest

from incdet import synthdata as sd
from incdet.protocol import TaskSchedule


def test_generation_is_deterministic():
    a = sd.generate_corpus(4, 25, seed=11)
    b = sd.generate_corpus(4, 25, seed=11)
    assert len(a.train) == len(b.train) == 25
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        np.testing.assert_array_equal(sa.cells, sb.cells)
        assert len(sa.objects) == len(sb.objects)
        for oa, ob in zip(sa.objects, sb.objects):
            assert oa.class_id == ob.class_id
            np.testing.assert_array_equal(oa.box, ob.box)
            np.testing.assert_array_equal(oa.mask, ob.mask)


def test_different_seeds_differ():
    a = sd.generate_corpus(4, 10, seed=0)
    b = sd.generate_corpus(4, 10, seed=1)
    assert any(
        not np.array_equal(sa.cells, sb.cells) for sa, sb in zip(a.train, b.train)
    )


def test_scene_invariants():
    corpus = sd.generate_corpus(6, 40, seed=5)
    for scene in corpus.train + corpus.test:
        assert scene.cells.shape == (corpus.grid, corpus.grid, corpus.feat_dim)
        assert 1 <= len(scene.objects) <= 4
        for o in scene.objects:
            x0, y0, x1, y1 = o.box
            assert 0 <= x0 < x1 <= corpus.grid and 0 <= y0 < y1 <= corpus.grid
            assert o.mask.any()
            ys, xs = np.where(o.mask)
            assert xs.min() >= x0 and xs.max() < x1
            assert ys.min() >= y0 and ys.max() < y1


def test_mixed_scene_fraction_exceeds_threshold():
    corpus = sd.generate_corpus(6, 200, seed=7)
    schedule = TaskSchedule.from_spec("3-3", 6)
    assert sd.mixed_scene_fraction(corpus, schedule) >= 0.3


def test_step_filter_keeps_images_strips_labels():
    corpus = sd.generate_corpus(6, 100, seed=2)
    schedule = TaskSchedule.from_spec("3-3", 6)
    ds = sd.build_step_dataset(corpus, schedule, 2)
    assert ds.new_classes == (3, 4, 5)
    for scene, kept in ds.entries:
        assert all(o.class_id in (3, 4, 5) for o in kept)
        assert len(kept) >= 1
        # the image itself is the untouched corpus scene object
        assert any(scene is s for s in corpus.train)
    # every remaining train scene really lacks new-class objects
    kept_scenes = {id(scene) for scene, _ in ds.entries}
    for scene in corpus.train:
        if id(scene) not in kept_scenes:
            assert all(o.class_id not in (3, 4, 5) for o in scene.objects)


def test_step_filter_is_idempotent():
    corpus = sd.generate_corpus(4, 60, seed=9)
    schedule = TaskSchedule.from_spec("2-2", 4)
    a = sd.build_step_dataset(corpus, schedule, 1)
    b = sd.build_step_dataset(corpus, schedule, 1)
    assert [(id(s), [o.class_id for o in k]) for s, k in a.entries] == [
        (id(s), [o.class_id for o in k]) for s, k in b.entries
    ]


def test_rejects_single_class_and_negative_scenes():
    with pytest.raises(sd.DataError):
        sd.generate_corpus(1, 10, seed=0)
    with pytest.raises(sd.DataError):
        sd.generate_corpus(4, -1, seed=0)


def test_serialization_roundtrip(tmp_path):
    corpus = sd.generate_corpus(4, 15, seed=13)
    path = tmp_path / "corpus.npz"
    sd.save_corpus(corpus, path)
    loaded = sd.load_corpus(path)
    assert (loaded.num_classes, loaded.grid, loaded.feat_dim, loaded.seed) == (
        corpus.num_classes, corpus.grid, corpus.feat_dim, corpus.seed,
    )
    assert len(loaded.train) == len(corpus.train)
    assert len(loaded.test) == len(corpus.test)
    for sa, sb in zip(corpus.train + corpus.test, loaded.train + loaded.test):
        np.testing.assert_array_equal(sa.cells, sb.cells)
        for oa, ob in zip(sa.objects, sb.objects):
            assert oa.class_id == ob.class_id
            np.testing.assert_array_equal(oa.box, ob.box)
            np.testing.assert_array_equal(oa.mask, ob.mask)


def test_save_is_byte_deterministic(tmp_path):
    corpus = sd.generate_corpus(4, 10, seed=21)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    sd.save_corpus(corpus, p1)
    sd.save_corpus(corpus, p2)
    assert sd.file_checksum(p1) == sd.file_checksum(p2)


def test_load_rejects_unknown_version(tmp_path):
    corpus = sd.generate_corpus(4, 5, seed=1)
    path = tmp_path / "corpus.npz"
    sd.save_corpus(corpus, path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    arrays["version"] = np.int64(99)
    np.savez(path, **arrays)
    with pytest.raises(sd.DataError):
        sd.load_corpus(path)
