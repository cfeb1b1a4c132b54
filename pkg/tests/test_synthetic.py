import numpy as np
import pytest

from diffprobe.synthetic import (
    ClassMorphology,
    SyntheticSpec,
    default_morphologies,
    render,
    synthesize,
)


def test_default_morphologies_are_distinct():
    morphologies = default_morphologies(8)
    assert len(set(morphologies)) == 8
    assert morphologies[0] == ClassMorphology()
    assert (morphologies[5].spines, morphologies[5].banding) == (5, 2.0)
    assert morphologies[5].eccentricity == pytest.approx(0.65)
    assert len(set(default_morphologies(20))) == 20


def test_default_morphologies_share_one_body_plan():
    morphologies = default_morphologies(8)
    assert {m.spines for m in morphologies} == {3, 5}
    assert {m.banding for m in morphologies} == {2.0, 3.0}
    assert {round(m.eccentricity, 2) for m in morphologies} == {0.55, 0.65}
    assert not any(m.flagellum for m in morphologies)
    assert max(m.eccentricity for m in default_morphologies(40)) == pytest.approx(0.95)


def test_default_classes_cover_similar_areas():
    areas = [
        (render(m, 64, np.random.default_rng(0), noise=0.0, max_rotation=0.0, jitter=0.0) > 0.3).mean()
        for m in default_morphologies(8)
    ]
    assert max(areas) / min(areas) < 1.5


def test_render_range_and_shape():
    image = render(ClassMorphology(spines=4, banding=3.0, flagellum=True), 32, np.random.default_rng(0))
    assert image.shape == (32, 32)
    assert image.dtype == np.float32
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_noise_free_render_is_centered_body():
    plain = ClassMorphology(spines=0, banding=0.0)
    image = render(plain, 33, np.random.default_rng(0), noise=0.0, max_rotation=0.0, jitter=0.0)
    assert image[16, 16] > 0.7
    assert image[0, 0] == pytest.approx(0.05, abs=1e-3)
    np.testing.assert_allclose(image, image[::-1, ::-1], atol=1e-6)


def test_synthesize():
    spec = SyntheticSpec(k=3, image_size=16)
    images = synthesize(spec, n_per_class=4, seed=0)

    assert len(images) == 12
    assert images.images.shape == (12, 1, 16, 16)
    assert images.labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    assert images.records[0].image_id == "syn_c00_00000"
    assert all(r.provenance == "synthetic" for r in images.records)
    assert images.label_map == {0: "class_00", 1: "class_01", 2: "class_02"}


def test_synthesize_is_reproducible():
    spec = SyntheticSpec(k=2, image_size=8)
    a = synthesize(spec, 3, seed=5)
    b = synthesize(spec, 3, seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, synthesize(spec, 3, seed=6).images)


def test_images_do_not_depend_on_class_count():
    small = synthesize(SyntheticSpec(k=2, image_size=8), 2, seed=0)
    large = synthesize(SyntheticSpec(k=4, image_size=8), 2, seed=0)
    np.testing.assert_array_equal(small.images, large.images[:4])


def test_morphology_count_must_match_k():
    with pytest.raises(ValueError, match="2 morphologies for k=3"):
        SyntheticSpec(k=3, morphologies=(ClassMorphology(), ClassMorphology(spines=4)))
