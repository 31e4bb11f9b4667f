"""Alternating per-modality training: cyclic loaders, Dice+CE loss, warm-up cosine.

Every iteration of an alternating epoch draws one CT batch then one MR batch and
performs a full optimizer step for each (two steps per iteration, CT first). The
exact batch sequence is recorded so schedules can be audited after the fact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .core import LabelMask, Modality, PatchBatch, Volume
from .data import sample_patch
from .errors import ConfigError, ShapeError, TrainingDivergedError

VALID_RATIOS = ("1:1", "2:1", "3:1")


@dataclass
class TrainConfig:
    """Optimization and data-drawing hyperparameters."""

    epochs: int = 1000
    warmup_epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2
    patch_size: int = 96
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    seed: int = 0
    ratio: str = "1:1"
    mode: str = "alt"            # alt | ct | mr
    fg_prob: float = 0.5
    patches_per_volume: int = 1
    augment: bool = True
    aug_shift: float = 0.1
    aug_scale: float = 0.1
    aug_prob: float = 0.5
    reshuffle: bool = True
    steps_per_epoch: int = 0     # resolved once loader lengths are known

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.ratio not in VALID_RATIOS:
            raise ConfigError(f"ratio must be one of {VALID_RATIOS}, got {self.ratio!r}")
        if self.mode not in ("alt", "ct", "mr"):
            raise ConfigError(f"mode must be alt, ct, or mr, got {self.mode!r}")

    @property
    def ratio_tuple(self) -> tuple[int, int]:
        a, b = self.ratio.split(":")
        return int(a), int(b)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay from lr to 0.

    ``cfg.steps_per_epoch`` must be resolved; the ramp reaches ``lr`` exactly at
    the first post-warmup step and the final step lands on 0.
    """
    if cfg.steps_per_epoch < 1:
        raise ConfigError("steps_per_epoch not resolved on this config")
    total = cfg.epochs * cfg.steps_per_epoch
    warmup = cfg.warmup_epochs * cfg.steps_per_epoch
    if not 0 <= step < total:
        raise IndexError(f"step {step} outside 0..{total - 1}")
    if step < warmup:
        return cfg.lr * step / warmup
    span = total - warmup - 1
    progress = (step - warmup) / span if span > 0 else 1.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class LossParts:
    total: torch.Tensor
    dice: torch.Tensor
    ce: torch.Tensor


def combined_loss(
    probs: torch.Tensor,
    labels: torch.Tensor,
    dice_weight: float = 1.0,
    ce_weight: float = 1.0,
    eps: float = 1e-5,
) -> LossParts:
    """Soft binary Dice (per class, one-vs-all) plus binary cross-entropy.

    ``probs`` are sigmoid outputs in (0,1), shape (B,K,H,W,D); ``labels`` are
    integer class ids (B,H,W,D). Both terms average over batch and classes.
    """
    if probs.ndim != 5 or labels.ndim != 4:
        raise ShapeError(f"bad ranks: probs {tuple(probs.shape)}, labels {tuple(labels.shape)}")
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    k = probs.shape[1]
    classes = torch.arange(1, k + 1, device=labels.device).view(1, k, 1, 1, 1)
    targets = (labels.unsqueeze(1) == classes).to(probs.dtype)

    clamped = probs.clamp(1e-7, 1.0 - 1e-7)
    ce = -(targets * clamped.log() + (1.0 - targets) * (1.0 - clamped).log()).mean()

    inter = (probs * targets).sum(dim=(2, 3, 4))
    denom = probs.sum(dim=(2, 3, 4)) + targets.sum(dim=(2, 3, 4))
    dice = (1.0 - 2.0 * inter / (denom + eps)).mean()

    return LossParts(dice_weight * dice + ce_weight * ce, dice, ce)


# ---------------------------------------------------------------------------
# Batch sources and cyclic loaders
# ---------------------------------------------------------------------------

def augment(batch: PatchBatch, rng: np.random.Generator, cfg: TrainConfig) -> PatchBatch:
    """Per-sample intensity shift/scale; labels pass through untouched."""
    if not cfg.augment:
        return batch
    images = batch.images.copy()
    for i in range(batch.batch_size):
        if rng.random() < cfg.aug_prob:
            images[i] += rng.uniform(-cfg.aug_shift, cfg.aug_shift)
        if rng.random() < cfg.aug_prob:
            images[i] *= 1.0 + rng.uniform(-cfg.aug_scale, cfg.aug_scale)
    return PatchBatch(images, batch.labels, batch.modality, batch.indices)


class PatchBatchSource:
    """Indexable source of same-modality patch batches drawn from volumes.

    The virtual sample list repeats each volume ``patches_per_volume`` times;
    batch i covers samples [i*B, (i+1)*B). Every access draws fresh random patch
    positions, so an "epoch" sees every sample once at new positions.
    """

    def __init__(
        self,
        pairs: Sequence[tuple[Volume, LabelMask]],
        modality: Modality,
        cfg: TrainConfig,
        seed: int,
    ):
        if not pairs:
            raise ConfigError(f"no {modality.value} training volumes")
        for vol, _ in pairs:
            if vol.modality is not modality:
                raise ConfigError(f"volume {vol.id!r} is not {modality.value}")
        self.pairs = list(pairs)
        self.modality = modality
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._fg = [np.argwhere(mask.data > 0) for _, mask in pairs]
        self._samples = [i % len(pairs) for i in range(len(pairs) * max(1, cfg.patches_per_volume))]

    def __len__(self) -> int:
        return math.ceil(len(self._samples) / self.cfg.batch_size)

    def __getitem__(self, i: int) -> PatchBatch:
        lo = i * self.cfg.batch_size
        group = self._samples[lo : lo + self.cfg.batch_size]
        images, labels = [], []
        for j in group:
            vol, mask = self.pairs[j]
            img, lab = sample_patch(
                vol, mask, self.cfg.patch_size, self.cfg.fg_prob, self.rng, fg_indices=self._fg[j]
            )
            images.append(img[None])
            labels.append(lab)
        batch = PatchBatch(
            np.stack(images).astype(np.float32),
            np.stack(labels).astype(np.int64),
            self.modality,
            indices=tuple(group),
        )
        return augment(batch, self.rng, self.cfg)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]


class CyclicLoader:
    """Never-exhausting batch iterator over an indexable source.

    After the last batch it wraps to the first; with ``reshuffle`` the batch
    order is permuted at construction and again at every wrap.
    """

    def __init__(self, source, reshuffle: bool = True, seed: int = 0):
        if len(source) == 0:
            raise ConfigError("loader source is empty")
        self.source = source
        self.reshuffle = reshuffle
        self.rng = np.random.default_rng(seed)
        self._order = np.arange(len(source))
        if reshuffle:
            self.rng.shuffle(self._order)
        self._pos = 0

    def __len__(self) -> int:
        return len(self.source)

    def next_batch(self) -> tuple[int, PatchBatch]:
        """Return (source batch index, batch), advancing and wrapping the cursor."""
        if self._pos == len(self._order):
            self._pos = 0
            if self.reshuffle:
                self.rng.shuffle(self._order)
        idx = int(self._order[self._pos])
        self._pos += 1
        return idx, self.source[idx]

    def state(self) -> dict:
        out = {"order": self._order.tolist(), "pos": self._pos, "rng": self.rng.bit_generator.state}
        if hasattr(self.source, "state"):
            out["source"] = self.source.state()
        return out

    def restore(self, state: dict) -> None:
        self._order = np.asarray(state["order"])
        self._pos = state["pos"]
        self.rng.bit_generator.state = state["rng"]
        if "source" in state and hasattr(self.source, "restore"):
            self.source.restore(state["source"])


# ---------------------------------------------------------------------------
# Epoch loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    iteration: int
    modality: Modality
    batch_index: int
    loss: float
    loss_dice: float
    loss_ce: float
    lr: float


@dataclass
class EpochStats:
    max_iter: int
    records: list[StepRecord] = field(default_factory=list)

    @property
    def optimizer_steps(self) -> int:
        return len(self.records)

    def mean_loss(self, modality: Modality | None = None) -> float:
        vals = [r.loss for r in self.records if modality is None or r.modality is modality]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def modality_sequence(self) -> list[Modality]:
        return [r.modality for r in self.records]

    @property
    def batch_sequence(self) -> list[tuple[Modality, int]]:
        return [(r.modality, r.batch_index) for r in self.records]


def _as_tensors(batch: PatchBatch, device) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.ascontiguousarray(batch.images)).to(device)
    labels = torch.from_numpy(np.ascontiguousarray(batch.labels)).to(device)
    return images, labels


def alt_epoch(
    ct_loader: CyclicLoader,
    mr_loader: CyclicLoader,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], LossParts],
    lr_schedule: Callable[[int], float] | None = None,
    global_step: int = 0,
) -> tuple[EpochStats, int]:
    """One alternating epoch over ``max(len(ct), len(mr))`` iterations.

    Each iteration takes the next CT batch then the next MR batch, running
    forward, loss, zero-grad, backward, and an optimizer step per batch.
    Returns the audit trace and the advanced global step counter.
    """
    if ct_loader is None or mr_loader is None:
        raise ConfigError("alternating training needs both a CT and an MR loader")
    model.train()
    max_iter = max(len(ct_loader), len(mr_loader))
    stats = EpochStats(max_iter=max_iter)
    for iteration in range(max_iter):
        drawn = [ct_loader.next_batch(), mr_loader.next_batch()]
        for idx, batch in drawn:
            lr = lr_schedule(global_step) if lr_schedule else None
            _step_with_index(model, optimizer, loss_fn, batch, idx, lr, iteration, stats)
            global_step += 1
    return stats, global_step


def single_modality_epoch(
    loader: CyclicLoader,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], LossParts],
    lr_schedule: Callable[[int], float] | None = None,
    global_step: int = 0,
) -> tuple[EpochStats, int]:
    """Baseline epoch over one modality only (same per-batch step structure)."""
    model.train()
    stats = EpochStats(max_iter=len(loader))
    for iteration in range(len(loader)):
        idx, batch = loader.next_batch()
        lr = lr_schedule(global_step) if lr_schedule else None
        _step_with_index(model, optimizer, loss_fn, batch, idx, lr, iteration, stats)
        global_step += 1
    return stats, global_step


def _step_with_index(model, optimizer, loss_fn, batch, batch_index, lr, iteration, stats):
    device = next(model.parameters()).device
    images, labels = _as_tensors(batch, device)
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    probs = model(images, batch.modality)
    parts = loss_fn(probs, labels)
    if not torch.isfinite(parts.total):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {iteration} on a {batch.modality.value} batch "
            f"(batch index {batch_index})"
        )
    optimizer.zero_grad()
    parts.total.backward()
    optimizer.step()
    stats.records.append(
        StepRecord(
            iteration=iteration,
            modality=batch.modality,
            batch_index=batch_index,
            loss=parts.total.item(),
            loss_dice=parts.dice.item(),
            loss_ce=parts.ce.item(),
            lr=float(lr) if lr is not None else float(optimizer.param_groups[0]["lr"]),
        )
    )


# ---------------------------------------------------------------------------
# Ratio planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RatioPlan:
    use_ct: int
    use_mr: int
    adjustment: str      # "unchanged" | "subsample_ct" | "subsample_mr"


def sample_ratio_plan(
    ratio: str | tuple[int, int],
    n_ct: int,
    n_mr: int,
    allow_mr_subsampling: bool = False,
) -> RatioPlan:
    """Decide how many scans per modality realize the requested CT:MR ratio.

    The default policy keeps every MR scan and subsamples CT down to the exact
    ratio; asking for more CT than exists is a configuration error unless MR
    subsampling is explicitly allowed (the adjustment made is recorded).
    """
    if isinstance(ratio, str):
        a, b = (int(x) for x in ratio.split(":"))
    else:
        a, b = ratio
    if min(a, b, n_ct, n_mr) < 1:
        raise ConfigError("ratio terms and scan counts must be >= 1")

    if n_ct * b == n_mr * a:
        return RatioPlan(n_ct, n_mr, "unchanged")
    needed_ct = n_mr * a // b if (n_mr * a) % b == 0 else None
    if needed_ct is not None and n_ct >= needed_ct:
        return RatioPlan(needed_ct, n_mr, "subsample_ct")
    if allow_mr_subsampling:
        use_mr = (n_ct * b) // a
        if use_mr < 1:
            raise ConfigError(f"ratio {a}:{b} infeasible with {n_ct} CT / {n_mr} MR scans")
        return RatioPlan(n_ct, use_mr, "subsample_mr")
    raise ConfigError(
        f"cannot reach a {a}:{b} CT:MR ratio with {n_ct} CT and {n_mr} MR scans "
        "(more CT needed; pass allow_mr_subsampling to shrink MR instead)"
    )
