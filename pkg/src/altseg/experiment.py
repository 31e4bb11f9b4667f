"""Experiment orchestration: config files, end-to-end training runs, ablations.

A run directory is self-contained: the resolved config, input hashes, a
structured step log, and a self-describing checkpoint land next to each other so
any two runs can be compared input-for-input.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from . import __version__
from .backbones import BackboneConfig
from .core import Modality, make_class_table
from .data import DatasetManifest, PreprocessSpec, load_manifest, preprocess_pair
from .errors import CompatibilityError, ConfigError, FormatError
from .evaluate import RunReport, evaluate
from .head import HeadConfig
from .model import TextConditionedSegModel, VisionOnlySegModel, build_model
from .prompts import EmbeddingTable, load_table, loads_table, dumps_table
from .training import (
    CyclicLoader,
    PatchBatchSource,
    TrainConfig,
    alt_epoch,
    combined_loss,
    lr_at,
    sample_ratio_plan,
    single_modality_epoch,
)

CHECKPOINT_VERSION = 1


@dataclass
class ExperimentConfig:
    """Everything one training run needs; relative paths resolve against ``base_dir``."""

    manifest: str
    out_dir: str
    embeddings: str | None = None
    text_embeddings: bool = True
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: dict = field(default_factory=dict)      # c_pre / hidden / inner_activations
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.text_embeddings and not self.embeddings:
            raise ConfigError("text_embeddings is on but no embeddings path was given")
        if self.train.patch_size != self.backbone.patch_size:
            raise ConfigError(
                f"train.patch_size {self.train.patch_size} != backbone.patch_size "
                f"{self.backbone.patch_size}"
            )
        allowed = {"c_pre", "hidden", "inner_activations", "d_txt", "s1", "s2"}
        unknown = set(self.head) - allowed
        if unknown:
            raise ConfigError(f"unknown head option(s): {sorted(unknown)}")
        for dim in ("s1", "s2"):
            if dim in self.head and self.head[dim] != getattr(self.backbone, dim):
                raise ConfigError(
                    f"head.{dim}={self.head[dim]} conflicts with the backbone's "
                    f"declared {dim.upper()}={getattr(self.backbone, dim)}"
                )

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def head_config(self, d_txt: int) -> HeadConfig:
        if "d_txt" in self.head and self.head["d_txt"] != d_txt:
            raise ConfigError(
                f"head.d_txt={self.head['d_txt']} conflicts with the embedding "
                f"table's dimension {d_txt}"
            )
        opts = {k: v for k, v in self.head.items() if k in ("c_pre", "hidden", "inner_activations")}
        return HeadConfig(d_txt=d_txt, s1=self.backbone.s1, s2=self.backbone.s2, **opts)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["backbone"] = dataclasses.asdict(self.backbone)
        out["preprocess"] = dataclasses.asdict(self.preprocess)
        out["train"] = dataclasses.asdict(self.train)
        out.pop("base_dir")
        return out

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        ).hexdigest()


def _build_section(cls, payload: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown {name} option(s): {sorted(unknown)}")
    for key in ("ct_window", "target_spacing_mm"):
        if key in payload and isinstance(payload[key], list):
            payload[key] = tuple(payload[key])
    return cls(**payload)


def load_experiment_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse a YAML experiment file; dotted overrides beat file values beat defaults."""
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(payload, dict):
        raise FormatError(f"{path}: expected a mapping at top level")
    for dotted, value in (overrides or {}).items():
        node = payload
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value

    known = {
        "manifest", "out_dir", "embeddings", "text_embeddings", "seed",
        "backbone", "head", "preprocess", "train",
    }
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "manifest" not in payload or "out_dir" not in payload:
        raise ConfigError("config must set 'manifest' and 'out_dir'")

    cfg = ExperimentConfig(
        manifest=payload["manifest"],
        out_dir=payload["out_dir"],
        embeddings=payload.get("embeddings"),
        text_embeddings=payload.get("text_embeddings", True),
        seed=payload.get("seed", 0),
        backbone=_build_section(BackboneConfig, dict(payload.get("backbone", {})), "backbone"),
        head=dict(payload.get("head", {})),
        preprocess=_build_section(PreprocessSpec, dict(payload.get("preprocess", {})), "preprocess"),
        train=_build_section(TrainConfig, dict(payload.get("train", {})), "train"),
        base_dir=path.parent,
    )
    return cfg


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    cfg: ExperimentConfig,
    epoch: int,
    global_step: int,
    loader_states: dict,
    table: EmbeddingTable | None,
    class_names: tuple[str, ...],
    task_id: str,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "model_kind": "text" if isinstance(model, TextConditionedSegModel) else "vision",
        "backbone_config": dataclasses.asdict(cfg.backbone),
        "head_config": dataclasses.asdict(model.head.cfg)
        if isinstance(model, TextConditionedSegModel)
        else None,
        "class_names": list(class_names),
        "task_id": task_id,
        "train_config": dataclasses.asdict(cfg.train),
        "config_hash": cfg.content_hash(),
        "epoch": epoch,
        "global_step": global_step,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "loader_states": loader_states,
        "embedding_blob": dumps_table(table) if table is not None else None,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> dict:
    # Trusted artifact written by save_checkpoint; contains pickled rng/optimizer state.
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version in {path}")
    return payload


def model_from_checkpoint(payload: dict) -> torch.nn.Module:
    """Rebuild the trained model (weights included) from a checkpoint payload."""
    backbone_cfg = BackboneConfig(**payload["backbone_config"])
    names = tuple(payload["class_names"])
    if payload["model_kind"] == "text":
        table = loads_table(payload["embedding_blob"])
        head_cfg = HeadConfig(**payload["head_config"])
        model = build_model(backbone_cfg, table, len(names), head_cfg)
    else:
        model = build_model(backbone_cfg, None, len(names))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    log_path: Path
    epoch_losses: list[dict]
    manifest: DatasetManifest
    model: torch.nn.Module


def _load_train_pairs(manifest: DatasetManifest, cfg: ExperimentConfig):
    """Load, ratio-adjust, and preprocess the training pools actually used."""
    ct_entries = manifest.select("train", Modality.CT)
    mr_entries = manifest.select("train", Modality.MR)
    plan = None
    if cfg.train.mode == "alt":
        plan = sample_ratio_plan(cfg.train.ratio, len(ct_entries), len(mr_entries))
        rng = np.random.default_rng(cfg.seed)
        if plan.use_ct < len(ct_entries):
            keep = rng.choice(len(ct_entries), size=plan.use_ct, replace=False)
            ct_entries = [ct_entries[i] for i in sorted(keep)]
        if plan.use_mr < len(mr_entries):
            keep = rng.choice(len(mr_entries), size=plan.use_mr, replace=False)
            mr_entries = [mr_entries[i] for i in sorted(keep)]

    def prep(entries):
        return [preprocess_pair(*manifest.load_pair(e), cfg.preprocess) for e in entries]

    ct_pairs = prep(ct_entries) if cfg.train.mode in ("alt", "ct") else []
    mr_pairs = prep(mr_entries) if cfg.train.mode in ("alt", "mr") else []
    return ct_pairs, mr_pairs, plan


def run_train(cfg: ExperimentConfig, resume_from: str | Path | None = None) -> RunResult:
    """Execute a full training run and leave a self-contained run directory."""
    cfg = dataclasses.replace(cfg)   # the resolved steps_per_epoch stays local
    run_dir = cfg.resolve(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = cfg.resolve(cfg.manifest)
    manifest = load_manifest(manifest_path)
    table = None
    if cfg.text_embeddings:
        table = load_table(cfg.resolve(cfg.embeddings), expected_classes=manifest.class_table)

    torch.manual_seed(cfg.seed)
    ct_pairs, mr_pairs, plan = _load_train_pairs(manifest, cfg)

    k = manifest.class_table.num_classes
    if table is not None:
        model = build_model(cfg.backbone, table, k, cfg.head_config(table.d_txt))
    else:
        model = build_model(cfg.backbone, None, k)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay
    )

    train = cfg.train
    loaders: dict[str, CyclicLoader] = {}
    if train.mode in ("alt", "ct"):
        if not ct_pairs:
            raise ConfigError("no CT training volumes in manifest")
        src = PatchBatchSource(ct_pairs, Modality.CT, train, seed=cfg.seed + 101)
        loaders["ct"] = CyclicLoader(src, reshuffle=train.reshuffle, seed=cfg.seed + 303)
    if train.mode in ("alt", "mr"):
        if not mr_pairs:
            raise ConfigError("no MR training volumes in manifest")
        src = PatchBatchSource(mr_pairs, Modality.MR, train, seed=cfg.seed + 202)
        loaders["mr"] = CyclicLoader(src, reshuffle=train.reshuffle, seed=cfg.seed + 404)

    if train.mode == "alt":
        steps_per_epoch = 2 * max(len(loaders["ct"]), len(loaders["mr"]))
    else:
        steps_per_epoch = len(loaders[train.mode])
    train = dataclasses.replace(train, steps_per_epoch=steps_per_epoch)
    cfg.train = train

    start_epoch, global_step = 0, 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["config_hash"] != cfg.content_hash():
            raise CompatibilityError("checkpoint was produced by a different configuration")
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng"])
        for name, state in payload["loader_states"].items():
            loaders[name].restore(state)
        start_epoch = payload["epoch"] + 1
        global_step = payload["global_step"]

    _write_run_metadata(run_dir, cfg, manifest_path, table, plan)

    def loss_fn(probs, labels):
        return combined_loss(probs, labels, train.dice_weight, train.ce_weight)

    def schedule(step: int) -> float:
        return lr_at(step, train)

    log_path = run_dir / "log.jsonl"
    if start_epoch == 0 and log_path.exists():
        log_path.unlink()
    epoch_losses = []
    with log_path.open("a") as log:
        for epoch in range(start_epoch, train.epochs):
            if train.mode == "alt":
                stats, global_step = alt_epoch(
                    loaders["ct"], loaders["mr"], model, optimizer, loss_fn,
                    lr_schedule=schedule, global_step=global_step,
                )
            else:
                stats, global_step = single_modality_epoch(
                    loaders[train.mode], model, optimizer, loss_fn,
                    lr_schedule=schedule, global_step=global_step,
                )
            for rec in stats.records:
                log.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "iter": rec.iteration,
                            "modality": rec.modality.value,
                            "batch_index": rec.batch_index,
                            "loss_dice": rec.loss_dice,
                            "loss_ce": rec.loss_ce,
                            "lr": rec.lr,
                        }
                    )
                    + "\n"
                )
            epoch_losses.append(
                {
                    "epoch": epoch,
                    "loss": stats.mean_loss(),
                    "loss_ct": stats.mean_loss(Modality.CT),
                    "loss_mr": stats.mean_loss(Modality.MR),
                }
            )

    ckpt = run_dir / "checkpoint.pt"
    save_checkpoint(
        ckpt, model, optimizer, cfg,
        epoch=train.epochs - 1, global_step=global_step,
        loader_states={name: ld.state() for name, ld in loaders.items()},
        table=table,
        class_names=manifest.class_table.names,
        task_id=manifest.task_id,
    )
    return RunResult(run_dir, ckpt, log_path, epoch_losses, manifest, model)


def _write_run_metadata(run_dir: Path, cfg, manifest_path: Path, table, plan) -> None:
    (run_dir / "config.resolved.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    meta = {
        "package_version": __version__,
        "config_hash": cfg.content_hash(),
        "manifest_sha256": hashlib.sha256(manifest_path.read_bytes()).hexdigest(),
        "embedding_header": None
        if table is None
        else {
            "encoder_id": table.header.encoder_id,
            "variant": table.header.variant.name,
            "num_classes": table.header.num_classes,
            "d_txt": table.header.d_txt,
            "class_hash": table.header.class_hash.hex(),
        },
        "ratio_plan": None if plan is None else dataclasses.asdict(plan),
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationCell:
    text: bool
    mode: str
    mean_dice_ct: float
    mean_dice_mr: float
    run_dir: str


def run_ablation(
    base: ExperimentConfig,
    texts: tuple[bool, ...] = (True, False),
    modes: tuple[str, ...] = ("alt", "ct", "mr"),
    eval_split: str = "test",
) -> list[AblationCell]:
    """Train every (text, mode) cell off one shared manifest and evaluate both
    modalities; cells land in subdirectories of the base run directory."""
    cells = []
    for text in texts:
        for mode in modes:
            name = f"{'text' if text else 'notext'}-{mode}"
            cfg = dataclasses.replace(
                base,
                out_dir=str(Path(base.out_dir) / name),
                text_embeddings=text,
                train=dataclasses.replace(base.train, mode=mode),
            )
            result = run_train(cfg)
            report = evaluate(
                result.model, result.manifest, cfg.preprocess,
                split=eval_split, config_hash=cfg.content_hash(),
            )
            report.save(result.run_dir / f"report-{eval_split}.json")
            cells.append(
                AblationCell(
                    text=text,
                    mode=mode,
                    mean_dice_ct=report.mean_dice(Modality.CT),
                    mean_dice_mr=report.mean_dice(Modality.MR),
                    run_dir=str(result.run_dir),
                )
            )
    return cells


def render_ablation(cells: list[AblationCell]) -> str:
    lines = ["Text   Training  Dice(CT)  Dice(MR)"]
    for c in cells:
        lines.append(
            f"{'yes' if c.text else 'no ':<6} {c.mode:<9} "
            f"{100 * c.mean_dice_ct:>7.2f}  {100 * c.mean_dice_mr:>7.2f}"
        )
    return "\n".join(lines)
