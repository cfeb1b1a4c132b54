from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

__all__ = ["ImageRecord", "LabeledImageSet", "Provenance"]

Provenance = Literal["real", "synthetic", "augmented"]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    label: int
    provenance: Provenance = "real"
    parent_id: Optional[str] = None
    transform: Optional[str] = None
    source: Optional[str] = None

    @property
    def group_id(self) -> str:
        """Id shared by an item and everything derived from it."""
        return self.parent_id or self.image_id

    def __post_init__(self):
        if self.provenance == "augmented":
            if not self.parent_id or not self.transform:
                raise ValueError(
                    f"Augmented record {self.image_id} must name its parent and transform"
                )
        elif self.parent_id is not None:
            raise ValueError(f"Only augmented records have a parent: {self.image_id}")


@dataclass(frozen=True)
class LabeledImageSet:
    """Images as an (n, 1, H, W) float32 array in [0, 1] with one record per image."""

    images: np.ndarray = field(repr=False)
    records: List[ImageRecord]
    label_map: Dict[int, str]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"Expected images of shape (n, 1, H, W), got {self.images.shape}")
        if len(self.records) != self.images.shape[0]:
            raise ValueError(
                f"{len(self.records)} records for {self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("Pixel values must lie in [0, 1]")
        for record in self.records:
            if record.label not in self.label_map:
                raise ValueError(f"Label {record.label} of {record.image_id} not in label map")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices: Sequence[int]) -> "LabeledImageSet":
        indices = list(indices)
        return LabeledImageSet(
            images=self.images[indices],
            records=[self.records[i] for i in indices],
            label_map=dict(self.label_map),
        )

    def concat(self, other: "LabeledImageSet") -> "LabeledImageSet":
        return LabeledImageSet(
            images=np.concatenate([self.images, other.images]),
            records=self.records + other.records,
            label_map={**self.label_map, **other.label_map},
        )

    def relabel(self, mapping: Dict[int, int], label_map: Dict[int, str]) -> "LabeledImageSet":
        keep = [i for i, r in enumerate(self.records) if r.label in mapping]
        records = [replace(self.records[i], label=mapping[self.records[i].label]) for i in keep]
        return LabeledImageSet(self.images[keep], records, label_map)

    @classmethod
    def empty(cls, image_size: int, label_map: Dict[int, str]) -> "LabeledImageSet":
        images = np.zeros((0, 1, image_size, image_size), dtype=np.float32)
        return cls(images=images, records=[], label_map=dict(label_map))
