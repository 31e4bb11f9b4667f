"""Full-volume evaluation: Dice scoring, report assembly, parameter accounting."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import LabelMask, Modality, Volume
from .data import DatasetManifest, PreprocessSpec, preprocess_pair
from .errors import ConfigError, ShapeError
from .head import fuse_multiclass
from .inference import sliding_window_predict


def dice_score(pred_binary: np.ndarray, gt_binary: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|), with the both-empty case pinned to 1.0."""
    if pred_binary.shape != gt_binary.shape:
        raise ShapeError(f"shape mismatch: {pred_binary.shape} vs {gt_binary.shape}")
    p = pred_binary.astype(bool)
    g = gt_binary.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass(frozen=True)
class SegmentationResult:
    pred: LabelMask
    volume_id: str
    modality: Modality
    seconds: float
    per_class_probs: np.ndarray | None = None


@dataclass(frozen=True)
class VolumeScore:
    id: str
    modality: str
    dice: tuple[float, ...]


@dataclass
class RunReport:
    """Per-volume per-class Dice plus aggregates recomputable from the table."""

    task_id: str
    class_names: tuple[str, ...]
    split: str
    volumes: list[VolumeScore] = field(default_factory=list)
    mistaken_prompts: bool = False
    aggregation: str = "per-case-mean"
    param_counts: dict | None = None
    config_hash: str | None = None

    def per_class_mean(self, modality: Modality | None = None) -> list[float]:
        rows = [
            v.dice
            for v in self.volumes
            if modality is None or v.modality == modality.value
        ]
        if not rows:
            return [float("nan")] * len(self.class_names)
        return np.asarray(rows).mean(axis=0).tolist()

    def mean_dice(self, modality: Modality | None = None) -> float:
        return float(np.mean(self.per_class_mean(modality)))

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "class_names": list(self.class_names),
            "split": self.split,
            "mistaken_prompts": self.mistaken_prompts,
            "aggregation": self.aggregation,
            "param_counts": self.param_counts,
            "config_hash": self.config_hash,
            "volumes": [asdict(v) for v in self.volumes],
            "per_class_mean": self.per_class_mean(),
            "mean_dice": self.mean_dice(),
            "mean_dice_ct": self.mean_dice(Modality.CT),
            "mean_dice_mr": self.mean_dice(Modality.MR),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def from_dict(payload: dict) -> "RunReport":
        report = RunReport(
            task_id=payload["task_id"],
            class_names=tuple(payload["class_names"]),
            split=payload["split"],
            mistaken_prompts=payload["mistaken_prompts"],
            aggregation=payload["aggregation"],
            param_counts=payload.get("param_counts"),
            config_hash=payload.get("config_hash"),
        )
        for v in payload["volumes"]:
            report.volumes.append(VolumeScore(v["id"], v["modality"], tuple(v["dice"])))
        return report

    @staticmethod
    def load(path: str | Path) -> "RunReport":
        return RunReport.from_dict(json.loads(Path(path).read_text()))


def render_report(report: RunReport) -> str:
    """Text table with one column per class, mirroring per-organ result layouts."""
    names = [n[:6].upper() for n in report.class_names]
    header = ["Setting"] + names + ["Avg"]
    rows = []
    for label, modality in (("CT", Modality.CT), ("MR", Modality.MR), ("All", None)):
        means = report.per_class_mean(modality)
        rows.append([label] + [f"{100 * d:.2f}" for d in means] + [f"{100 * float(np.mean(means)):.2f}"])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    tag = " (mistaken prompts)" if report.mistaken_prompts else ""
    lines = [f"task={report.task_id} split={report.split}{tag}", fmt.format(*header)]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def count_params(model: torch.nn.Module) -> dict[str, int]:
    """Learnable parameter tally partitioned into backbone and head."""
    backbone = sum(p.numel() for p in model.backbone.parameters())
    total = sum(p.numel() for p in model.parameters())
    return {"backbone": backbone, "head": total - backbone, "total": total}


def _model_predict_fn(model: torch.nn.Module, modality: Modality, dtype=torch.float32):
    device = next(model.parameters()).device

    def predict(patch: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(patch[None, None]).to(device=device, dtype=dtype)
        with torch.no_grad():
            probs = model(x, modality)
        return probs[0].cpu().numpy().astype(np.float32)

    return predict


def predict_volume(
    model: torch.nn.Module,
    vol: Volume,
    modality_for_prompts: Modality,
    table_classes: int,
    roi: int,
    overlap: float = 0.5,
    keep_probs: bool = False,
    class_table=None,
) -> SegmentationResult:
    """Sliding-window inference over one preprocessed volume."""
    t0 = time.perf_counter()
    model.eval()
    probs = sliding_window_predict(
        _model_predict_fn(model, modality_for_prompts),
        vol.data.astype(np.float32),
        num_classes=table_classes,
        roi=roi,
        overlap=overlap,
    )
    labels = fuse_multiclass(torch.from_numpy(probs[None]))[0].numpy().astype(np.int16)
    seconds = time.perf_counter() - t0
    mask = LabelMask(labels, class_table, vol.id) if class_table is not None else None
    return SegmentationResult(
        pred=mask,
        volume_id=vol.id,
        modality=vol.modality,
        seconds=seconds,
        per_class_probs=probs if keep_probs else None,
    )


def evaluate(
    model: torch.nn.Module,
    manifest: DatasetManifest,
    spec: PreprocessSpec,
    split: str = "test",
    roi: int | None = None,
    overlap: float = 0.5,
    mistaken_prompts: bool = False,
    config_hash: str | None = None,
) -> RunReport:
    """Per-volume per-class Dice over one manifest split.

    Each class scores as binary Dice per case (absent-and-not-predicted counts
    as 1.0), then averages over cases. ``mistaken_prompts`` flips the modality
    used to select text prompts while preprocessing stays faithful.
    """
    entries = manifest.select(split=split)
    if not entries:
        raise ConfigError(f"manifest has no {split!r} entries")
    roi = roi if roi is not None else spec.patch_size
    k = manifest.class_table.num_classes

    report = RunReport(
        task_id=manifest.task_id,
        class_names=manifest.class_table.names,
        split=split,
        mistaken_prompts=mistaken_prompts,
        param_counts=count_params(model),
        config_hash=config_hash,
    )
    for entry in entries:
        vol, mask = manifest.load_pair(entry)
        vol, mask = preprocess_pair(vol, mask, spec)
        prompt_modality = entry.modality.flipped() if mistaken_prompts else entry.modality
        result = predict_volume(
            model, vol, prompt_modality, k, roi=roi, overlap=overlap,
            class_table=manifest.class_table,
        )
        pred = result.pred.data
        scores = tuple(
            dice_score(pred == cls, mask.data == cls) for cls in range(1, k + 1)
        )
        report.volumes.append(VolumeScore(entry.id, entry.modality.value, scores))
    return report


def mistaken_prompt_eval(
    model: torch.nn.Module,
    manifest: DatasetManifest,
    spec: PreprocessSpec,
    split: str = "test",
    **kwargs,
) -> RunReport:
    """Evaluation with CT prompts applied to MR volumes and vice versa."""
    return evaluate(model, manifest, spec, split=split, mistaken_prompts=True, **kwargs)
