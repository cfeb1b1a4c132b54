from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
import hashlib
from typing import Dict, List, Optional, TypeAlias

from loguru import logger

from diffprobe.record import ImageRecord

__all__ = [
    "DatasetSplit",
    "SplitScore",
    "SplitPolicy",
    "RatioSplitPolicy",
    "Splitter",
    "HashSplitter",
    "StratifiedSplitter",
    "compute_first_hash_byte",
    "compute_hash_key",
    "compute_hash_score",
]


class DatasetSplit(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class SplitScore:
    score: float  # 0.0 <= score < 1.0

    def __post_init__(self):
        if not 0.0 <= self.score < 1.0:
            raise ValueError("SplitScore must be in [0, 1)")


class SplitPolicy(ABC):
    @abstractmethod
    def split(self, score: SplitScore) -> DatasetSplit: ...


@dataclass(frozen=True)
class RatioSplitPolicy(SplitPolicy):
    train: float
    val: float
    test: float

    def __post_init__(self):
        total = self.train + self.val + self.test
        if not abs(total - 1.0) < 1e-9:
            raise ValueError(f"Split ratios must sum to 1.0, got {total}")

        object.__setattr__(
            self,
            "_thresholds",
            (
                (self.train, DatasetSplit.TRAIN),
                (self.train + self.val, DatasetSplit.VAL),
                (1.0, DatasetSplit.TEST),
            ),
        )

    def split(self, score: SplitScore) -> DatasetSplit:
        for limit, split in self._thresholds:
            if score.score < limit:
                return split

        raise RuntimeError("Unreachable")


SplitMap: TypeAlias = Dict[DatasetSplit, List[ImageRecord]]


class Splitter(ABC):
    @abstractmethod
    def split(self, record: ImageRecord) -> DatasetSplit: ...

    def split_records(self, records: List[ImageRecord]) -> SplitMap:
        splits = {
            split: [r for r in records if self.split(r) == split]
            for split in DatasetSplit
        }
        if sum(len(split_records) for split_records in splits.values()) != len(records):
            raise ValueError(
                f"The sums of the splits are not equal to the total number of records: "
                f"{sum(len(split_records) for split_records in splits.values())} != {len(records)}"
            )
        return splits


def compute_first_hash_byte(stem: str, seed: int) -> int:
    """Compute the first byte of the hash of a record stem"""
    key = f"{seed}:{stem}".encode("utf-8")
    return hashlib.sha256(key).digest()[0]


def compute_hash_key(stem: str, seed: int) -> str:
    """Full seeded hash of a record stem, used as a stable shuffle key"""
    return hashlib.sha256(f"{seed}:{stem}".encode("utf-8")).hexdigest()


def compute_hash_score(stem: str, seed: int) -> SplitScore:
    """Compute the score for a record stem"""
    hash_byte = compute_first_hash_byte(stem, seed)
    return SplitScore(score=hash_byte / 256.0)


class HashSplitter(Splitter):
    """Unstratified splitting: each group lands where its own hash score falls."""

    def __init__(self, policy: SplitPolicy, seed: int):
        self.seed = seed
        self.policy = policy

    def split(self, record: ImageRecord) -> DatasetSplit:
        split_score = compute_hash_score(record.group_id, self.seed)
        return self.policy.split(split_score)


class StratifiedSplitter(Splitter):
    """
    Class-stratified splitting.

    Within each class, groups (a real image and everything derived from it)
    are ordered by their seeded hash; the group at rank i of n gets the
    score (i + ½)/n, which the ratio policy maps to a split. Every split
    therefore receives round(n·ratio) groups of each class, and items
    derived from one parent never cross splits.
    """

    def __init__(self, policy: RatioSplitPolicy, seed: int):
        self.seed = seed
        self.policy = policy
        self._mapping: Optional[Dict[str, DatasetSplit]] = None

    def assign(self, records: List[ImageRecord]) -> Dict[str, DatasetSplit]:
        groups_by_class: Dict[int, set] = defaultdict(set)
        for record in records:
            groups_by_class[record.label].add(record.group_id)

        mapping: Dict[str, DatasetSplit] = {}
        for label in sorted(groups_by_class):
            groups = sorted(
                groups_by_class[label], key=lambda g: (compute_hash_key(g, self.seed), g)
            )
            n = len(groups)
            for rank, group in enumerate(groups):
                mapping[group] = self.policy.split(SplitScore((rank + 0.5) / n))
            missing = set(DatasetSplit) - {mapping[g] for g in groups}
            if missing:
                logger.warning(
                    f"Class {label} has {n} items and no members in "
                    f"{sorted(s.value for s in missing)}"
                )
        return mapping

    def split_records(self, records: List[ImageRecord]) -> SplitMap:
        self._mapping = self.assign(records)
        return super().split_records(records)

    def split(self, record: ImageRecord) -> DatasetSplit:
        if self._mapping is None:
            raise RuntimeError("StratifiedSplitter.split_records must run before split")
        try:
            return self._mapping[record.group_id]
        except KeyError:
            raise KeyError(f"No split mapping for record {record.group_id}")
