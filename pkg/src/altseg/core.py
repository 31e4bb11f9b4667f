"""Domain types shared by every pipeline stage: volumes, masks, class tables, batches."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError


class Modality(Enum):
    """Imaging acquisition type. Determines preprocessing and prompt wording."""

    CT = "CT"
    MR = "MR"

    @property
    def long_name(self) -> str:
        return _LONG_NAMES[self]

    @property
    def index(self) -> int:
        """Stable ordinal (CT=0, MR=1) used by caches and model buffers."""
        return 0 if self is Modality.CT else 1

    def flipped(self) -> "Modality":
        return Modality.MR if self is Modality.CT else Modality.CT


_LONG_NAMES = {
    Modality.CT: "computerized tomography",
    Modality.MR: "magnetic resonance",
}


@dataclass(frozen=True)
class ClassTable:
    """Ordered foreground class names for one task; index k in 1..K names class k.

    Index 0 is reserved for background and never appears in ``names``.
    """

    names: tuple[str, ...]
    task_id: str

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise ValidationError("class table needs at least one class")
        if any(not n for n in self.names):
            raise ValidationError("class names must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate class names in {self.names!r}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def name_of(self, k: int) -> str:
        if not 1 <= k <= self.num_classes:
            raise IndexError(f"class index {k} outside 1..{self.num_classes}")
        return self.names[k - 1]

    def content_hash(self) -> bytes:
        """SHA-256 over task id and ordered names; pins cache/manifest compatibility."""
        h = hashlib.sha256()
        h.update(self.task_id.encode("utf-8"))
        for name in self.names:
            h.update(b"\x1f")
            h.update(name.encode("utf-8"))
        return h.digest()


def make_class_table(names: Sequence[str], task_id: str) -> ClassTable:
    """Build a class table with stable 1-based indices (0 stays background)."""
    return ClassTable(names=tuple(names), task_id=task_id)


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with voxel spacing in millimetres."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    modality: Modality
    id: str
    preprocessed: bool = False

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise ShapeError(f"all volume dimensions must be >= 1, got {self.data.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be three positive floats, got {self.spacing_mm}")
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, *, spacing_mm=None, preprocessed=None) -> "Volume":
        return replace(
            self,
            data=data,
            spacing_mm=self.spacing_mm if spacing_mm is None else tuple(spacing_mm),
            preprocessed=self.preprocessed if preprocessed is None else preprocessed,
        )


@dataclass(frozen=True)
class LabelMask:
    """Integer class-id mask paired with a class table; 0 is background."""

    data: np.ndarray
    class_table: ClassTable
    id: str

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"label mask must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValidationError(f"label mask must be integer typed, got {self.data.dtype}")
        present = np.unique(self.data)
        k = self.class_table.num_classes
        bad = present[(present < 0) | (present > k)]
        if bad.size:
            raise ValidationError(f"label ids {bad.tolist()} outside 0..{k}")
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


def one_hot_mask(mask: LabelMask, k: int) -> np.ndarray:
    """Binary foreground map for class k (one-vs-all target)."""
    if not 1 <= k <= mask.class_table.num_classes:
        raise IndexError(f"class index {k} outside 1..{mask.class_table.num_classes}")
    return (mask.data == k).astype(np.uint8)


@dataclass(frozen=True)
class PatchBatch:
    """A batch of same-modality training patches.

    Mixed-modality batches are rejected by construction: the single ``modality``
    field is what the alternating trainer reads for the whole batch.
    """

    images: np.ndarray
    labels: np.ndarray
    modality: Modality
    indices: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.images.ndim != 5 or self.images.shape[1] != 1:
            raise ShapeError(f"images must be (B,1,H,W,D), got {self.images.shape}")
        if self.labels.ndim != 4:
            raise ShapeError(f"labels must be (B,H,W,D), got {self.labels.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError("images and labels disagree on batch size")
        if self.images.shape[2:] != self.labels.shape[1:]:
            raise ShapeError("images and labels disagree on spatial shape")
        h, w, d = self.images.shape[2:]
        if not h == w == d:
            raise ShapeError(f"patches must be cubic, got {(h, w, d)}")

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]

    @property
    def patch_size(self) -> int:
        return self.images.shape[2]
