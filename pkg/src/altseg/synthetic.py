"""Synthetic unpaired two-modality phantom data for desk-scale runs.

Each volume contains K ellipsoidal "organs" with exact labels. CT volumes render
organ ids as increasing HU levels inside the standard window; MR volumes invert
the ordering, warp the contrast, and multiply in a smooth bias field, so the two
modalities look genuinely different. Geometry is drawn independently per volume
and per modality: the datasets are unpaired by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ClassTable, LabelMask, Modality, Volume, make_class_table
from .data import DatasetManifest, ManifestEntry, save_manifest, save_mask, save_volume
from .errors import ConfigError, ValidationError

_CT_WINDOW = (-275.0, 125.0)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    n_ct: int = 6
    n_mr: int = 6
    n_test_ct: int = 2
    n_test_mr: int = 2
    size: int = 64
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 2.0)
    noise: float = 0.02      # intensity noise relative to full scale

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= 5:
            raise ConfigError(f"synthetic task supports 1..5 classes, got {self.num_classes}")
        if min(self.n_ct, self.n_mr) < 1:
            raise ConfigError("need at least one training volume per modality")
        if self.size < 16:
            raise ConfigError(f"volume size {self.size} too small for ellipsoid organs")


def _ellipsoid_labels(size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """K ellipsoids on a jittered anchor layout; later ids win ties.

    Redraws (bounded) until every class keeps at least a few voxels.
    """
    coords = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), axis=-1)
    for _ in range(25):
        labels = np.zeros((size,) * 3, dtype=np.int16)
        anchors = rng.permutation(_anchor_points(size, k))
        for cls in range(1, k + 1):
            centre = anchors[cls - 1] + rng.uniform(-0.04, 0.04, size=3) * size
            radii = rng.uniform(0.14, 0.21, size=3) * size
            dist = (((coords - centre) / radii) ** 2).sum(axis=-1)
            labels[dist <= 1.0] = cls
        counts = np.bincount(labels.ravel(), minlength=k + 1)
        if (counts[1:] >= 8).all():
            return labels
    raise ValidationError("could not place all synthetic organs; volume too small?")


def _anchor_points(size: int, k: int) -> np.ndarray:
    # spread anchors over distinct octant-ish cells so organs rarely swallow each other
    base = np.array(
        [
            (0.32, 0.32, 0.32),
            (0.68, 0.68, 0.68),
            (0.32, 0.68, 0.5),
            (0.68, 0.32, 0.5),
            (0.5, 0.5, 0.72),
        ]
    )
    return base[:k] * size


def _intensity_levels(k: int) -> np.ndarray:
    # evenly spaced levels for ids 0..K inside (0, 1)
    return (np.arange(k + 1) + 1.0) / (k + 2.0)


def _render_ct(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    lo, hi = _CT_WINDOW
    levels = lo + (hi - lo) * _intensity_levels(labels.max(initial=1))
    hu = levels[labels]
    hu = hu + rng.normal(0.0, noise * (hi - lo), size=labels.shape)
    return hu.astype(np.float32)


def _render_mr(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    k = labels.max(initial=1)
    inverted = 1.0 - _intensity_levels(k)      # bright background, dark high ids
    signal = inverted[labels] ** 1.5           # contrast warp
    bias = _bias_field(labels.shape, rng)
    arbitrary_units = 600.0 * signal * bias + 40.0
    arbitrary_units += rng.normal(0.0, noise * 600.0, size=labels.shape)
    return arbitrary_units.astype(np.float32)


def _bias_field(shape, rng: np.random.Generator, strength: float = 0.1) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, 3, 3))
    field = ndimage.zoom(coarse, [s / 3 for s in shape], order=1, mode="nearest")
    field = field[: shape[0], : shape[1], : shape[2]]
    return 1.0 + strength * field


def _class_table(k: int) -> ClassTable:
    return make_class_table([f"organ-{i}" for i in range(1, k + 1)], "synthetic")


def gen_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write an unpaired synthetic dataset and its manifest; fully seeded."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    table = _class_table(spec.num_classes)

    entries = []
    plan = [
        (Modality.CT, "train", spec.n_ct),
        (Modality.MR, "train", spec.n_mr),
        (Modality.CT, "test", spec.n_test_ct),
        (Modality.MR, "test", spec.n_test_mr),
    ]
    streams = np.random.SeedSequence(seed).spawn(len(plan))
    for (modality, split, count), stream in zip(plan, streams):
        rng = np.random.default_rng(stream)
        for i in range(count):
            vid = f"{modality.value.lower()}-{split}-{i}"
            labels = _ellipsoid_labels(spec.size, spec.num_classes, rng)
            render = _render_ct if modality is Modality.CT else _render_mr
            data = render(labels, spec.noise, rng)

            vol = Volume(data, spec.spacing_mm, modality, vid)
            mask = LabelMask(labels, table, vid)
            image_rel = f"images/{vid}.npz"
            label_rel = f"labels/{vid}.npz"
            save_volume(vol, out / image_rel)
            save_mask(mask, spec.spacing_mm, out / label_rel)
            entries.append(ManifestEntry(vid, image_rel, label_rel, modality, split))

    manifest = DatasetManifest(tuple(entries), table, root=out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
