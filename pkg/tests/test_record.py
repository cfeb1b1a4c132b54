import numpy as np
import pytest

from diffprobe.record import ImageRecord, LabeledImageSet


class TestImageRecord:
    def test_group_id(self):
        parent = ImageRecord("a", 0)
        child = ImageRecord("a_flip", 0, provenance="augmented", parent_id="a", transform="hflip")
        assert parent.group_id == child.group_id == "a"

    def test_augmented_needs_parent_and_transform(self):
        with pytest.raises(ValueError, match="must name its parent and transform"):
            ImageRecord("a_flip", 0, provenance="augmented", parent_id="a")

    def test_only_augmented_records_have_a_parent(self):
        with pytest.raises(ValueError, match="Only augmented records have a parent"):
            ImageRecord("b", 0, parent_id="a")


class TestLabeledImageSet:
    def test_subset_concat_and_relabel(self, image_set_factory):
        images = image_set_factory(n_per_class=2)
        subset = images.subset([0, 5])
        assert [r.image_id for r in subset.records] == ["img_c0_000", "img_c2_001"]

        both = subset.concat(image_set_factory(n_per_class=1, prefix="x"))
        assert len(both) == 5

        merged = images.relabel({0: 0, 1: 0}, {0: "merged"})
        assert len(merged) == 4
        assert merged.num_classes == 1
        assert set(merged.labels.tolist()) == {0}

    def test_validation(self):
        with pytest.raises(ValueError, match="shape"):
            LabeledImageSet(np.zeros((2, 3, 4, 4)), [ImageRecord("a", 0)] * 2, {0: "a"})
        with pytest.raises(ValueError, match="1 records for 2 images"):
            LabeledImageSet(np.zeros((2, 1, 4, 4)), [ImageRecord("a", 0)], {0: "a"})
        with pytest.raises(ValueError, match=r"must lie in \[0, 1\]"):
            LabeledImageSet(np.full((1, 1, 4, 4), 2.0), [ImageRecord("a", 0)], {0: "a"})
        with pytest.raises(ValueError, match="not in label map"):
            LabeledImageSet(np.zeros((1, 1, 4, 4)), [ImageRecord("a", 3)], {0: "a"})

    def test_empty(self):
        empty = LabeledImageSet.empty(8, {0: "a"})
        assert len(empty) == 0
        assert empty.image_size == 8
