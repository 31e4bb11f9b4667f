"""Dataset manifests, modality-specific preprocessing, and patch extraction.

Volumes travel as ``.npz`` containers (raw array plus spacing header). NIfTI
files are read through nibabel when that package is installed; nothing here
requires it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .core import ClassTable, LabelMask, Modality, Volume, make_class_table
from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    ModalityError,
    ValidationError,
)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PreprocessSpec:
    """Modality-specific intensity recipes and the shared geometry targets."""

    ct_window: tuple[float, float] = (-275.0, 125.0)
    mr_percentile_clip: float = 0.5
    target_spacing_mm: tuple[float, float, float] = (1.5, 1.5, 2.0)
    patch_size: int = 96

    def __post_init__(self) -> None:
        lo, hi = self.ct_window
        if lo >= hi:
            raise ConfigError(f"CT window must have lo < hi, got {self.ct_window}")
        if not 0 <= self.mr_percentile_clip < 50:
            raise ConfigError(f"percentile clip must be in [0, 50), got {self.mr_percentile_clip}")
        if any(s <= 0 for s in self.target_spacing_mm):
            raise ConfigError(f"target spacing must be positive, got {self.target_spacing_mm}")


# ---------------------------------------------------------------------------
# Volume / mask containers on disk
# ---------------------------------------------------------------------------

def save_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        _save_nifti(vol.data, vol.spacing_mm, path)
        return
    np.savez_compressed(
        path,
        data=vol.data.astype(np.float32),
        spacing=np.asarray(vol.spacing_mm, dtype=np.float64),
        modality=vol.modality.value,
        id=vol.id,
    )


def load_volume(path: str | Path, modality: Modality | None = None, vol_id: str | None = None) -> Volume:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing = _load_nifti(path)
        if modality is None:
            raise ValidationError("NIfTI files carry no modality tag; pass one explicitly")
        return Volume(data, spacing, modality, vol_id or path.stem)
    with np.load(path, allow_pickle=False) as z:
        _require_keys(z, ("data", "spacing"), path)
        stored = Modality(str(z["modality"])) if "modality" in z else None
        mod = modality or stored
        if mod is None:
            raise ValidationError(f"{path} has no modality tag and none was given")
        if stored is not None and modality is not None and stored is not modality:
            raise CompatibilityError(f"{path} is tagged {stored.value}, expected {modality.value}")
        return Volume(
            np.asarray(z["data"], dtype=np.float32),
            tuple(float(s) for s in z["spacing"]),
            mod,
            vol_id or (str(z["id"]) if "id" in z else path.stem),
        )


def save_mask(mask: LabelMask, spacing_mm: tuple[float, float, float], path: str | Path) -> None:
    np.savez_compressed(
        path,
        data=mask.data.astype(np.int16),
        spacing=np.asarray(spacing_mm, dtype=np.float64),
        task_id=mask.class_table.task_id,
        id=mask.id,
    )


def load_mask(path: str | Path, table: ClassTable, mask_id: str | None = None) -> LabelMask:
    with np.load(Path(path), allow_pickle=False) as z:
        _require_keys(z, ("data",), path)
        if "task_id" in z and str(z["task_id"]) != table.task_id:
            raise CompatibilityError(
                f"{path} belongs to task {str(z['task_id'])!r}, expected {table.task_id!r}"
            )
        return LabelMask(np.asarray(z["data"], dtype=np.int16), table, mask_id or Path(path).stem)


def _require_keys(z, keys: Iterable[str], path) -> None:
    missing = [k for k in keys if k not in z]
    if missing:
        raise FormatError(f"{path} is missing fields {missing}")


def _save_nifti(data: np.ndarray, spacing, path: Path) -> None:
    nib = _import_nibabel()
    affine = np.diag([*spacing, 1.0])
    nib.save(nib.Nifti1Image(np.asarray(data), affine), str(path))


def _load_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    nib = _import_nibabel()
    img = nib.load(str(path))
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    return np.asarray(img.dataobj, dtype=np.float32), spacing


def _import_nibabel():
    try:
        import nibabel as nib
    except ImportError as exc:
        raise ConfigError(
            "reading/writing NIfTI needs the optional 'nibabel' package; "
            "use the .npz container otherwise"
        ) from exc
    return nib


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    label: str
    modality: Modality
    split: str

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be train or test, got {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """The unpaired dataset collection: per-file records plus the class table."""

    entries: tuple[ManifestEntry, ...]
    class_table: ClassTable
    root: Path

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest ids must be unique")

    @property
    def task_id(self) -> str:
        return self.class_table.task_id

    def select(self, split: str | None = None, modality: Modality | None = None) -> list[ManifestEntry]:
        out = list(self.entries)
        if split is not None:
            out = [e for e in out if e.split == split]
        if modality is not None:
            out = [e for e in out if e.modality is modality]
        return out

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def load_pair(self, entry: ManifestEntry) -> tuple[Volume, LabelMask]:
        vol = load_volume(self.resolve(entry.image), entry.modality, entry.id)
        mask = load_mask(self.resolve(entry.label), self.class_table, entry.id)
        if vol.shape != mask.shape:
            raise CompatibilityError(f"{entry.id}: image {vol.shape} vs label {mask.shape}")
        return vol, mask


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    lines = [
        json.dumps(
            {
                "type": "header",
                "version": MANIFEST_VERSION,
                "task_id": manifest.task_id,
                "classes": list(manifest.class_table.names),
            }
        )
    ]
    for e in manifest.entries:
        lines.append(
            json.dumps(
                {
                    "type": "entry",
                    "id": e.id,
                    "image": e.image,
                    "label": e.label,
                    "modality": e.modality.value,
                    "split": e.split,
                }
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header line") from exc
    if header.get("type") != "header" or "classes" not in header:
        raise FormatError(f"{path}: first line must be the manifest header")
    if header.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {header.get('version')}")
    table = make_class_table(header["classes"], header["task_id"])

    entries = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        if rec.get("type") != "entry":
            raise FormatError(f"{path}: unexpected record type {rec.get('type')!r}")
        entries.append(
            ManifestEntry(
                id=rec["id"],
                image=rec["image"],
                label=rec["label"],
                modality=Modality(rec["modality"]),
                split=rec["split"],
            )
        )
    manifest = DatasetManifest(tuple(entries), table, root=path.parent)
    if check_files:
        for e in manifest.entries:
            for rel in (e.image, e.label):
                if not manifest.resolve(rel).exists():
                    raise ValidationError(f"manifest entry {e.id}: missing file {rel}")
    return manifest


# ---------------------------------------------------------------------------
# Resampling and intensity preprocessing
# ---------------------------------------------------------------------------

def _target_shape(shape, spacing, target) -> tuple[int, ...]:
    return tuple(max(1, round(n * s / t)) for n, s, t in zip(shape, spacing, target))


def resample(vol: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Trilinear resampling to the target grid; physical extent kept within a voxel."""
    if any(s <= 0 for s in target_spacing):
        raise ConfigError(f"target spacing must be positive, got {target_spacing}")
    new_shape = _target_shape(vol.shape, vol.spacing_mm, target_spacing)
    if new_shape == vol.shape and tuple(vol.spacing_mm) == tuple(target_spacing):
        return vol
    zoom = [n / o for n, o in zip(new_shape, vol.shape)]
    data = ndimage.zoom(vol.data.astype(np.float32), zoom, order=1, mode="nearest")
    assert data.shape == new_shape
    return vol.with_data(data, spacing_mm=target_spacing)


def resample_mask(
    mask: LabelMask,
    spacing_mm: tuple[float, float, float],
    target_spacing: tuple[float, float, float],
) -> LabelMask:
    """Nearest-neighbour resampling for labels (never invents class ids)."""
    new_shape = _target_shape(mask.shape, spacing_mm, target_spacing)
    if new_shape == mask.shape:
        return mask
    zoom = [n / o for n, o in zip(new_shape, mask.shape)]
    data = ndimage.zoom(mask.data, zoom, order=0, mode="nearest")
    return replace(mask, data=data)


def preprocess_ct(vol: Volume, spec: PreprocessSpec) -> Volume:
    """Resample, clamp to the HU window, and map linearly onto [0, 1]."""
    if vol.modality is not Modality.CT:
        raise ModalityError(f"preprocess_ct got a {vol.modality.value} volume")
    if vol.preprocessed:
        return vol
    vol = resample(vol, spec.target_spacing_mm)
    lo, hi = spec.ct_window
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return vol.with_data(data.astype(np.float32), preprocessed=True)


def preprocess_mr(vol: Volume, spec: PreprocessSpec) -> Volume:
    """Resample, clip the intensity histogram tails, then min-max to [0, 1]."""
    if vol.modality is not Modality.MR:
        raise ModalityError(f"preprocess_mr got a {vol.modality.value} volume")
    if vol.preprocessed:
        return vol
    vol = resample(vol, spec.target_spacing_mm)
    p = spec.mr_percentile_clip
    lo, hi = np.percentile(vol.data, [p, 100.0 - p])
    if hi <= lo:
        raise ValidationError(
            f"volume {vol.id!r} has a degenerate intensity range after percentile clip"
        )
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return vol.with_data(data.astype(np.float32), preprocessed=True)


def preprocess(vol: Volume, spec: PreprocessSpec) -> Volume:
    return preprocess_ct(vol, spec) if vol.modality is Modality.CT else preprocess_mr(vol, spec)


def preprocess_pair(vol: Volume, mask: LabelMask, spec: PreprocessSpec) -> tuple[Volume, LabelMask]:
    """Preprocess an image and resample its label onto the same grid."""
    src_spacing = vol.spacing_mm
    out = preprocess(vol, spec)
    out_mask = resample_mask(mask, src_spacing, spec.target_spacing_mm)
    if out.shape != out_mask.shape:
        raise CompatibilityError(f"{vol.id}: image/label grids diverged after resampling")
    return out, out_mask


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def _pad_to(data: np.ndarray, size: int) -> np.ndarray:
    pads = [(0, max(0, size - n)) for n in data.shape]
    if any(p[1] for p in pads):
        data = np.pad(data, pads, mode="constant")
    return data


def sample_patch(
    vol: Volume,
    mask: LabelMask,
    patch_size: int,
    fg_prob: float,
    rng: np.random.Generator,
    fg_indices: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one cubic patch; with probability ``fg_prob`` it is centred on a
    foreground voxel, otherwise its corner is uniform over valid positions.

    Volumes smaller than the patch are zero-padded. ``fg_indices`` (an (N,3)
    array of foreground coordinates) can be precomputed to avoid rescanning the
    mask on every draw.
    """
    img = _pad_to(vol.data, patch_size)
    lab = _pad_to(mask.data, patch_size)
    dims = img.shape
    p = patch_size

    use_fg = rng.random() < fg_prob
    if use_fg:
        if fg_indices is None:
            fg_indices = np.argwhere(mask.data > 0)
        if len(fg_indices) == 0:
            use_fg = False
    if use_fg:
        centre = fg_indices[rng.integers(len(fg_indices))]
        start = [int(np.clip(c - p // 2, 0, n - p)) for c, n in zip(centre, dims)]
    else:
        start = [int(rng.integers(0, n - p + 1)) for n in dims]

    sl = tuple(slice(s, s + p) for s in start)
    return img[sl].copy(), lab[sl].copy()
