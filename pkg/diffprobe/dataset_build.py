from collections import defaultdict
from dataclasses import dataclass, field
import json
from pathlib import Path
import shutil
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
import polvo as pv
from loguru import logger

from diffprobe.config import DatasetSection
from diffprobe.dataset_splits import (
    DatasetSplit,
    HashSplitter,
    RatioSplitPolicy,
    Splitter,
    StratifiedSplitter,
    compute_hash_key,
)
from diffprobe.hashing import content_sha256, derived_rng, file_sha256
from diffprobe.image_io import (
    IMAGE_EXTENSIONS,
    ImageFormatError,
    load_images,
    read_dpim,
    resize,
    write_dpim,
)
from diffprobe.record import ImageRecord, LabeledImageSet
from diffprobe.run_layout import RunLayout
from diffprobe.synthetic import SyntheticSpec, synthesize

__all__ = [
    "DatasetBuildError",
    "TRANSFORMS",
    "SplitPlan",
    "DatasetPlan",
    "apply_transform",
    "read_label_map",
    "ingest",
    "augment",
    "cap_per_class",
    "drop_small_classes",
    "split",
    "plan_dataset",
    "execute_dataset_plan",
    "build_dataset",
    "load_split",
    "dataset_id",
    "delete_dataset",
    "export_class_directories",
]

BuildMode = Literal["balanced", "long_tail", "ood"]


class DatasetBuildError(Exception):
    """Raised when dataset build fails."""

    pass


def _intensity(factor: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda image: np.clip(image * factor, 0.0, 1.0)


TRANSFORMS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "hflip": lambda image: image[:, ::-1],
    "vflip": lambda image: image[::-1, :],
    "rot180": lambda image: image[::-1, ::-1],
    "intensity_-10": _intensity(0.90),
    "intensity_-5": _intensity(0.95),
    "intensity_+5": _intensity(1.05),
    "intensity_+10": _intensity(1.10),
}


def apply_transform(name: str, image: np.ndarray) -> np.ndarray:
    try:
        transform = TRANSFORMS[name]
    except KeyError:
        raise DatasetBuildError(f"Unknown augmentation transform: {name}")
    return np.ascontiguousarray(transform(image), dtype=np.float32)


def read_label_map(path: Path) -> Dict[str, int]:
    """Parse ``<dir-name>,<class-id>`` lines."""
    mapping = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            name, class_id = line.rsplit(",", 1)
            mapping[name.strip()] = int(class_id)
        except ValueError:
            raise DatasetBuildError(f"{path}:{number}: expected '<dir-name>,<class-id>'")
    return mapping


def ingest(
    directory: Path, label_map_path: Optional[Path] = None, image_size: int = 128
) -> LabeledImageSet:
    """
    Load a directory-per-class image tree.

    Images are converted to one luminance channel, resized to
    image_size×image_size without padding and kept in [0, 1]. Corrupt and
    empty files are skipped and counted.

    Raises:
        DatasetBuildError: if a class directory holds no images
    """
    if not directory.is_dir():
        raise DatasetBuildError(f"Dataset directory not found: {directory}")
    class_dirs = sorted(p for p in directory.iterdir() if p.is_dir())
    if label_map_path is not None:
        dir_to_id = read_label_map(label_map_path)
        class_dirs = [d for d in class_dirs if d.name in dir_to_id]
    else:
        dir_to_id = {d.name: i for i, d in enumerate(class_dirs)}

    names: Dict[int, List[str]] = defaultdict(list)
    for name, class_id in sorted(dir_to_id.items()):
        names[class_id].append(name)
    label_map = {class_id: "+".join(parts) for class_id, parts in sorted(names.items())}

    images, records, skipped = [], [], 0
    for class_dir in class_dirs:
        paths = sorted(pv.get_files(class_dir, extensions=IMAGE_EXTENSIONS))
        if not paths:
            raise DatasetBuildError(f"Class directory has no images: {class_dir.name}")
        label = dir_to_id[class_dir.name]
        for path in pv.pbar(paths):
            try:
                loaded = load_images(path)
            except (ImageFormatError, OSError) as e:
                logger.warning(f"Skipping {path}: {e}")
                skipped += 1
                continue
            for j, image in enumerate(loaded):
                suffix = f"#{j}" if len(loaded) > 1 else ""
                images.append(resize(image, image_size))
                records.append(
                    ImageRecord(
                        image_id=f"{class_dir.name}/{path.stem}{suffix}",
                        label=label,
                        source=str(path),
                    )
                )

    logger.info(f"Ingested {len(records)} images from {directory} ({skipped} skipped)")
    if not records:
        return LabeledImageSet.empty(image_size, label_map)
    stacked = np.stack(images)[:, None].astype(np.float32)
    return LabeledImageSet(images=stacked, records=records, label_map=label_map)


def augment(
    images: LabeledImageSet,
    seed: int,
    quota_per_class: Optional[int] = None,
    multiplier: Optional[int] = None,
) -> LabeledImageSet:
    """
    Add augmented copies; each applies exactly one transform to one real parent.

    With ``quota_per_class`` every class is filled up to the quota; with
    ``multiplier`` m every class receives (m − 1)·n extra items. At most
    one augmented item exists per (parent, transform) pair.
    """
    if (quota_per_class is None) == (multiplier is None):
        raise DatasetBuildError("augment needs exactly one of quota_per_class or multiplier")

    parents_by_class: Dict[int, List[int]] = defaultdict(list)
    for i, record in enumerate(images.records):
        if record.provenance != "augmented":
            parents_by_class[record.label].append(i)

    names = list(TRANSFORMS)
    new_images, new_records = [], []
    for label in sorted(parents_by_class):
        parents = parents_by_class[label]
        n = len(parents)
        wanted = quota_per_class - n if quota_per_class is not None else (multiplier - 1) * n
        wanted = max(wanted, 0)
        budget = n * len(names)
        if wanted > budget:
            logger.warning(
                f"Class {label}: augmentation target unreachable, adding {budget} "
                f"instead of {wanted}"
            )
        take = min(wanted, budget)
        if take == 0:
            continue
        pairs = [(p, name) for p in parents for name in names]
        order = derived_rng(seed, "augment", label).permutation(len(pairs))[:take]
        for index in order:
            parent, name = pairs[index]
            parent_record = images.records[parent]
            new_images.append(apply_transform(name, images.images[parent, 0]))
            new_records.append(
                ImageRecord(
                    image_id=f"{parent_record.image_id}~{name}",
                    label=label,
                    provenance="augmented",
                    parent_id=parent_record.image_id,
                    transform=name,
                )
            )

    logger.info(f"Augmentation added {len(new_records)} images")
    if not new_records:
        return images
    extra = LabeledImageSet(
        images=np.stack(new_images)[:, None],
        records=new_records,
        label_map=images.label_map,
    )
    return images.concat(extra)


def cap_per_class(images: LabeledImageSet, max_per_class: int, seed: int) -> LabeledImageSet:
    """Keep at most ``max_per_class`` images per class, chosen by seeded hash order."""
    by_class: Dict[int, List[int]] = defaultdict(list)
    for i, record in enumerate(images.records):
        by_class[record.label].append(i)
    keep = []
    for label, indices in by_class.items():
        ranked = sorted(indices, key=lambda i: compute_hash_key(images.records[i].image_id, seed))
        keep.extend(ranked[:max_per_class])
    return images.subset(sorted(keep))


def drop_small_classes(images: LabeledImageSet, min_count: int) -> LabeledImageSet:
    """Remove classes with fewer than ``min_count`` images and renumber the rest contiguously."""
    counts = np.bincount(images.labels, minlength=max(images.label_map, default=-1) + 1)
    kept = [label for label in sorted(images.label_map) if counts[label] >= min_count]
    for label in sorted(set(images.label_map) - set(kept)):
        logger.info(
            f"Dropping class {label} ({images.label_map[label]}): "
            f"{counts[label]} images < {min_count}"
        )
    mapping = {old: new for new, old in enumerate(kept)}
    return images.relabel(mapping, {mapping[old]: images.label_map[old] for old in kept})


@dataclass(frozen=True)
class SplitPlan:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0
    stratified: bool = True
    mode: BuildMode = "balanced"
    quota_per_class: Optional[int] = None
    augment_multiplier: int = 1
    min_class_count: int = 5
    max_per_class: Optional[int] = None

    @property
    def policy(self) -> RatioSplitPolicy:
        return RatioSplitPolicy(train=self.train, val=self.val, test=self.test)

    def splitter(self) -> Splitter:
        if self.stratified:
            return StratifiedSplitter(self.policy, seed=self.seed)
        return HashSplitter(self.policy, seed=self.seed)

    @classmethod
    def from_section(cls, section: DatasetSection, mode: BuildMode, seed: int) -> "SplitPlan":
        return cls(
            train=section.train,
            val=section.val,
            test=section.test,
            seed=seed,
            mode=mode,
            quota_per_class=section.quota_per_class,
            augment_multiplier=section.augment_multiplier,
            min_class_count=section.min_class_count,
            max_per_class=section.max_per_class,
        )


def split(images: LabeledImageSet, plan: SplitPlan) -> Dict[DatasetSplit, LabeledImageSet]:
    """Partition by the plan's splitter; an item always follows its parent."""
    splitter = plan.splitter()
    split_map = splitter.split_records(images.records)
    index = {record.image_id: i for i, record in enumerate(images.records)}
    return {
        name: images.subset([index[r.image_id] for r in records])
        for name, records in split_map.items()
    }


@dataclass(frozen=True)
class DatasetPlan:
    layout: RunLayout
    splits: Dict[DatasetSplit, LabeledImageSet] = field(repr=False)
    source: Dict[str, object]


def plan_dataset(
    images: LabeledImageSet, plan: SplitPlan, layout: RunLayout, source: Dict[str, object]
) -> DatasetPlan:
    """Select, split and augment (train only) in memory."""
    images = drop_small_classes(images, plan.min_class_count)
    if plan.max_per_class is not None:
        images = cap_per_class(images, plan.max_per_class, plan.seed)

    splits = split(images, plan)
    train = splits[DatasetSplit.TRAIN]
    if plan.mode == "long_tail" and plan.augment_multiplier > 1:
        train = augment(train, plan.seed, multiplier=plan.augment_multiplier)
    elif plan.mode != "long_tail" and plan.quota_per_class is not None:
        train = augment(train, plan.seed, quota_per_class=plan.quota_per_class)
    splits[DatasetSplit.TRAIN] = train
    return DatasetPlan(layout=layout, splits=splits, source=source)


def _records_frame(records: List[ImageRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "image_id": r.image_id,
                "label": r.label,
                "provenance": r.provenance,
                "parent_id": r.parent_id,
                "transform": r.transform,
                "source": r.source,
            }
            for r in records
        ],
        columns=["image_id", "label", "provenance", "parent_id", "transform", "source"],
    )


def execute_dataset_plan(plan: DatasetPlan) -> Path:
    """Write every split as DPIM1 images, a label file and a provenance CSV."""
    layout = plan.layout
    layout.data.mkdir(parents=True, exist_ok=True)

    label_map = plan.splits[DatasetSplit.TRAIN].label_map
    pv.save_txt(
        "\n".join(f"{name},{class_id}" for class_id, name in sorted(label_map.items())),
        layout.label_map,
    )

    hashes = {}
    for name, images in plan.splits.items():
        logger.info(f"{name}: {len(images)} images")
        write_dpim(layout.split_images(name.value), images.images)
        pv.save_txt(
            "\n".join(f"{i},{r.label}" for i, r in enumerate(images.records)),
            layout.split_labels(name.value),
        )
        _records_frame(images.records).to_csv(layout.split_records(name.value), index=False)
        hashes[name.value] = file_sha256(layout.split_images(name.value))

    info = {
        "dataset_id": content_sha256(hashes),
        "image_hashes": hashes,
        "num_classes": len(label_map),
        "counts": {n.value: len(s) for n, s in plan.splits.items()},
        "source": plan.source,
    }
    layout.dataset_info.write_text(json.dumps(info, indent=2, sort_keys=True))
    return layout.data


def build_dataset(
    section: DatasetSection, mode: BuildMode, seed: int, layout: RunLayout
) -> Path:
    """Build the run's dataset from the configured source."""
    _ensure_empty_directory(layout.data)

    if section.source == "synthetic":
        syn = section.synthetic
        spec = SyntheticSpec(
            k=syn.k,
            image_size=section.image_size,
            noise=syn.noise,
            max_rotation=syn.max_rotation,
            jitter=syn.jitter,
        )
        images = synthesize(spec, syn.n_per_class, seed)
        source = {"kind": "synthetic", **syn.model_dump()}
    else:
        label_map = Path(section.label_map) if section.label_map else None
        images = ingest(Path(section.path), label_map, section.image_size)
        source = {"kind": "directory", "path": section.path}

    plan = plan_dataset(images, SplitPlan.from_section(section, mode, seed), layout, source)
    return execute_dataset_plan(plan)


def _label_map_from_file(path: Path) -> Dict[int, str]:
    return {class_id: name for name, class_id in read_label_map(path).items()}


def load_split(layout: RunLayout, split_name: str) -> LabeledImageSet:
    """Read a written split back into memory."""
    try:
        images = read_dpim(layout.split_images(split_name))
        frame = pd.read_csv(layout.split_records(split_name), dtype={"image_id": str})
        label_map = _label_map_from_file(layout.label_map)
    except (OSError, ImageFormatError) as e:
        raise DatasetBuildError(f"Cannot load split {split_name} from {layout.data}: {e}") from e

    frame = frame.astype(object).where(frame.notna(), None)
    records = [
        ImageRecord(
            image_id=row["image_id"],
            label=int(row["label"]),
            provenance=row["provenance"],
            parent_id=row["parent_id"],
            transform=row["transform"],
            source=row["source"],
        )
        for row in frame.to_dict("records")
    ]
    return LabeledImageSet(images=images, records=records, label_map=label_map)


def dataset_id(layout: RunLayout) -> str:
    try:
        return json.loads(layout.dataset_info.read_text())["dataset_id"]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DatasetBuildError(f"No dataset description at {layout.dataset_info}: {e}") from e


def delete_dataset(layout: RunLayout) -> None:
    shutil.rmtree(layout.data, ignore_errors=True)


def _ensure_empty_directory(directory: Path) -> None:
    if directory.exists() and any(directory.iterdir()):
        raise DatasetBuildError(
            f"Directory is not empty: {directory}\n"
            "Refusing to build into a non-empty directory.\n"
            "Delete it explicitly or use a new run directory."
        )


def export_class_directories(images: LabeledImageSet, directory: Path) -> Path:
    """
    Write one ``<class-name>/images.dpim`` per class plus ``label_map.txt``,
    a layout ``ingest`` reads back unchanged.
    """
    _ensure_empty_directory(directory)
    lines = []
    for class_id, name in sorted(images.label_map.items()):
        indices = [i for i, r in enumerate(images.records) if r.label == class_id]
        if not indices:
            logger.warning(f"Class {class_id} ({name}) has no images, not exported")
            continue
        write_dpim(directory / name / "images.dpim", images.images[indices])
        lines.append(f"{name},{class_id}")
    pv.save_txt("\n".join(lines), directory / "label_map.txt")
    logger.info(f"Exported {len(images)} images in {len(lines)} classes to {directory}")
    return directory
