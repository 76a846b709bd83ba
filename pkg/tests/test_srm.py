import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmdet.dataset import GroundTruthObject, Scene, generate_scenes
from srmdet.geometry import BoundingBox, ImageExtent
from srmdet.srm import (
    ModelError,
    UnknownClassError,
    dumps_srm,
    load_srm,
    loads_srm,
    mirror_lr,
    save_srm,
    train_srm,
)

from test_dataset import small_profile

DATA = Path(__file__).parent / "data"
IMG = ImageExtent(100, 100)


def obj(label, x0, y0, x1, y1, difficult=False):
    return GroundTruthObject(label, BoundingBox(float(x0), float(y0), float(x1), float(y1)), difficult)


def person_dog_corpus():
    """10 images: 7 with a person, 3 of those also with a dog below it."""
    scenes = []
    for i in range(10):
        objs = []
        if i < 7:
            objs.append(obj("person", 40, 10, 60, 50))
        if i < 3:
            objs.append(obj("dog", 40, 60, 60, 80))
        if i >= 7:
            objs.append(obj("car", 0, 0, 30, 20))
        scenes.append(Scene(f"img{i}", IMG, tuple(objs)))
    return scenes


class TestTraining:
    def test_single_dog(self):
        m = train_srm([Scene("a", IMG, (obj("dog", 0, 0, 10, 10),))])
        assert m.get_class_fraction("dog") == 1.0
        assert m.get_image_fraction("dog") == 1.0
        assert m.get_cond_prob("dog", "dog") == 1.0
        assert m.metadata["single_instance_classes"] == ["dog"]
        assert m.aspect("dog") == (1.0, 0.0)

    def test_ten_image_fixture(self):
        m = train_srm(person_dog_corpus())
        assert m.get_cond_prob("dog", "person") == pytest.approx(3 / 7, abs=1e-15)
        assert m.get_cond_prob("person", "dog") == 1.0
        assert m.co_occurrence("person", "dog") == 3

    def test_dog_always_below_person(self):
        m = train_srm(person_dog_corpus())
        np.testing.assert_array_equal(m.spatial_dist("person", "dog"), np.eye(9)[7])
        np.testing.assert_array_equal(m.spatial_dist("dog", "person"), np.eye(9)[1])

    def test_unseen_pair_fallbacks(self):
        m = train_srm(person_dog_corpus())
        np.testing.assert_allclose(m.spatial_dist("person", "person"), np.full(9, 1 / 9))
        assert m.rel_size("person", "person") == (1.0, 0.0)
        assert m.get_cond_prob("car", "person") == 0.0
        assert not m.seen_pair("car", "dog")

    def test_bottle_aspect(self):
        scenes = [Scene(f"b{i}", IMG, (obj("bottle", i, 0, i + 10, 25),)) for i in range(3)]
        mean, std = train_srm(scenes).aspect("bottle")
        assert mean == pytest.approx(0.4) and std == 0.0

    def test_relative_size_population_std(self):
        scenes = [
            Scene("a", IMG, (obj("big", 0, 0, 20, 20), obj("small", 50, 50, 60, 60))),
            Scene("b", IMG, (obj("big", 0, 0, 20, 20), obj("small", 50, 50, 70, 60))),
        ]
        m = train_srm(scenes)
        mean, std = m.rel_size("big", "small")
        assert mean == pytest.approx(3.0) and std == pytest.approx(1.0)
        lmean, lstd = m.rel_size("big", "small", log=True)
        assert lmean == pytest.approx(0.5 * (np.log(4) + np.log(2)))
        assert lstd == pytest.approx(0.5 * np.log(2))

    def test_difficult_excluded_by_default(self):
        scenes = [Scene("a", IMG, (obj("dog", 0, 0, 10, 10), obj("cat", 20, 20, 40, 30, difficult=True)))]
        m = train_srm(scenes)
        assert m.classes == ["cat", "dog"]
        assert m.get_class_fraction("cat") == 0.0
        assert m.metadata["unseen_classes"] == ["cat"]
        assert train_srm(scenes, include_difficult=True).get_class_fraction("cat") == 0.5

    def test_empty_corpus_errors(self):
        with pytest.raises(ModelError):
            train_srm([])
        with pytest.raises(ModelError):
            train_srm([Scene("e", IMG, ())])

    def test_unknown_label_named(self):
        m = train_srm(person_dog_corpus())
        with pytest.raises(UnknownClassError, match="zebra"):
            m.get_cond_prob("zebra", "dog")


@pytest.fixture(scope="module")
def model():
    return train_srm(generate_scenes(small_profile(seed=11, clutter_level=4.0), 300))


class TestInvariants:
    def test_table_invariants(self, model):
        assert model.class_fraction.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all((model.cond_prob >= 0) & (model.cond_prob <= 1))
        np.testing.assert_allclose(model.spatial.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all((model.aspect_mean > 0) & (model.aspect_mean <= 1))
        assert np.all(model.aspect_std >= 0) and np.all(model.rel_size_std >= 0)

    def test_bayes_symmetry(self, model):
        p = model.image_fraction
        joint_ab = model.cond_prob * p[None, :]
        np.testing.assert_allclose(joint_ab, joint_ab.T, atol=1e-12)

    def test_duplication_invariance(self):
        scenes = list(generate_scenes(small_profile(seed=12, clutter_level=3.0), 60))
        a = train_srm(scenes)
        b = train_srm(scenes + scenes)
        for name in ("class_fraction", "image_fraction", "cond_prob", "spatial", "rel_size_mean",
                     "rel_size_log_std", "aspect_mean", "aspect_std"):
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-12, err_msg=name)


class TestMirror:
    def test_paper_pair(self):
        d = np.array([0, 0, 0, 0.05, 0.5, 0.15, 0, 0.3, 0])
        out = mirror_lr(d)
        assert out[3] == pytest.approx(0.10) and out[5] == pytest.approx(0.10)
        assert out[4] == 0.5 and out[7] == 0.3

    @given(st.lists(st.floats(0, 1), min_size=9, max_size=9))
    def test_idempotent_and_sum_preserving(self, values):
        d = np.array(values)
        once = mirror_lr(d)
        np.testing.assert_allclose(mirror_lr(once), once, atol=1e-15)
        assert once.sum() == pytest.approx(d.sum(), abs=1e-12)
        np.testing.assert_array_equal(once[[1, 4, 7]], d[[1, 4, 7]])

    def test_symmetric_unchanged(self):
        d = np.array([0.1, 0.2, 0.1, 0.05, 0.1, 0.05, 0.15, 0.1, 0.15])
        np.testing.assert_allclose(mirror_lr(d), d)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        m = train_srm(generate_scenes(small_profile(seed=13, clutter_level=3.0), 50))
        save_srm(m, tmp_path / "m.json")
        back = load_srm(tmp_path / "m.json")
        assert back == m
        for name in ("cond_prob", "spatial", "rel_size_log_std"):
            np.testing.assert_array_equal(getattr(back, name), getattr(m, name))

    def test_golden_file(self):
        assert dumps_srm(train_srm(person_dog_corpus())) == (DATA / "srm_golden.json").read_text()

    def test_unknown_version(self):
        rec = json.loads(dumps_srm(train_srm(person_dog_corpus())))
        rec["version"] = 99
        with pytest.raises(ModelError, match="version"):
            loads_srm(json.dumps(rec))

    @pytest.mark.parametrize("text", ["not json", "{}", '{"schema": "srmdet.srm", "version": 1}'])
    def test_corrupt(self, text):
        with pytest.raises(ModelError):
            loads_srm(text)

    def test_bad_table_shape(self):
        rec = json.loads(dumps_srm(train_srm(person_dog_corpus())))
        rec["tables"]["cond_prob"] = [[1.0]]
        with pytest.raises(ModelError, match="cond_prob"):
            loads_srm(json.dumps(rec))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_random_corpora_keep_invariants(seed):
    m = train_srm(generate_scenes(small_profile(seed=seed, clutter_level=3.0), 15))
    assert abs(m.class_fraction.sum() - 1) <= 1e-9
    seen = m.pair_count > 0
    np.testing.assert_allclose(m.spatial[seen].sum(-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(m.spatial[~seen], 1 / 9)
