"""Siamese relation-classifier pretraining.

Two parallel stacks share one clip encoder (literally the same module),
their features are concatenated into a linear head over the active
relation categories, and the whole thing is trained with momentum SGD
on a softmax cross-entropy loss. The numpy softmax/cross-entropy here
are reference implementations used to cross-check the fused torch path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vidrel.backbones import (
    BackboneConfig,
    FeatureBackbone,
    build_backbone,
    init_parameters,
    save_backbone,
)
from vidrel.ingest import FrameStore
from vidrel.sampling import (
    ALL_RELATIONS,
    CLIP_LEN,
    DILATION_INTERVALS,
    RelationCategory,
    RelationSample,
    RelationSampler,
)
from vidrel.shots import Manifest
from vidrel.util import derive_seed


class RelationConfigError(ValueError):
    """The corpus cannot support one of the requested relation categories."""


# -- numpy reference numerics (oracles for the torch training path) ---------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probabilities along the last axis, computed with max subtraction."""
    a = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("logits must be finite")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """-log probability at the true class, for one probability vector."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if not (np.all(p >= 0) and abs(float(p.sum()) - 1.0) < 1e-6):
        raise ValueError("probs is not a probability vector")
    if sorted(y.tolist()) != [0.0] * (len(y) - 1) + [1.0]:
        raise ValueError("label must be one-hot")
    true = int(np.argmax(y))
    return float(-np.log(max(p[true], 1e-300)))


def fused_cross_entropy(logits: np.ndarray, label: int) -> float:
    """logsumexp(a) - a_y: the numerically stable fused loss."""
    a = np.asarray(logits, dtype=np.float64)
    m = float(np.max(a))
    return float(m + np.log(np.sum(np.exp(a - m))) - a[label])


# -- model -------------------------------------------------------------------


class SiameseModel(nn.Module):
    """One shared clip encoder evaluated twice, plus a pair head.

    Both stacks are the same module object, so parameter sharing is
    structural: any update to one stack is an update to the other.
    """

    def __init__(
        self,
        backbone: FeatureBackbone,
        relations: tuple[RelationCategory, ...] = ALL_RELATIONS,
        head_seed: int = 0,
    ):
        super().__init__()
        if not relations:
            raise ValueError("need at least one relation category")
        self.backbone = backbone
        self.relations = tuple(sorted(relations))
        self.head = nn.Linear(2 * backbone.feature_dim, len(self.relations))
        init_parameters(self.head, head_seed)

    @property
    def num_classes(self) -> int:
        return len(self.relations)

    def label_index(self, category: RelationCategory) -> int:
        return self.relations.index(category)

    def stack_features(self, clips: torch.Tensor, stack: int = 1) -> torch.Tensor:
        """Features from stack 1 or stack 2 (they share all parameters)."""
        if stack not in (1, 2):
            raise ValueError(f"stack must be 1 or 2, got {stack}")
        return self.backbone(clips)

    def forward(self, clips_a: torch.Tensor, clips_b: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.backbone(clips_a), self.backbone(clips_b)], dim=1)
        return self.head(feats)


def clip_to_tensor(frames: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(T, H, W, 3) uint8 -> (3, T, H, W) float in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(frames))
    return t.permute(3, 0, 1, 2).to(dtype) / 255.0


def collate_pairs(
    samples: list[RelationSample],
    relations: tuple[RelationCategory, ...],
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack realized samples into (clips_a, clips_b, label_indices)."""
    xa = torch.stack([clip_to_tensor(s.clip_a.frames, dtype) for s in samples])
    xb = torch.stack([clip_to_tensor(s.clip_b.frames, dtype) for s in samples])
    labels = torch.tensor([relations.index(s.label) for s in samples], dtype=torch.long)
    return xa, xb, labels


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 300
    batch_size: int = 16
    samples_per_epoch: int = 112
    val_samples: int = 56
    lr_milestones: tuple[int, ...] = (100, 200)
    lr_gamma: float = 0.1
    precision: str = "float32"
    seed: int = 0
    # optional early exit once both accuracies are reached
    stop_train_acc: float | None = None
    stop_val_acc: float | None = None

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "samples_per_epoch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "val_samples"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_milestones"] = tuple(d.get("lr_milestones", ()))
        return cls(**d)


@dataclass
class Checkpoint:
    """Best-validation snapshot of a pretraining run."""

    backbone_config: BackboneConfig
    relations: tuple[RelationCategory, ...]
    model_state: dict
    optimizer_state: dict
    epoch: int
    val_accuracy: float
    train_config: TrainConfig
    fingerprint: str = ""
    history: list[dict] = field(default_factory=list, repr=False)

    def build_model(self) -> SiameseModel:
        model = SiameseModel(build_backbone(self.backbone_config), self.relations)
        model.to(self.train_config.dtype)
        model.load_state_dict(self.model_state)
        return model


def check_relations_satisfiable(
    manifest: Manifest, relations: tuple[RelationCategory, ...]
) -> None:
    """Fail before training if a requested category can never be sampled."""
    reasons = []
    shot_counts = {v: len({s.shot_id for s in manifest.by_video(v)}) for v in manifest.video_ids}
    for cat in relations:
        if cat is RelationCategory.SAME_SHOT:
            ok = any(
                s.length > CLIP_LEN or len(manifest.by_shot(s.shot_id)) > 1
                for s in manifest.segments
            )
        elif cat is RelationCategory.SAME_VIDEO:
            ok = any(n >= 2 for n in shot_counts.values())
        elif cat is RelationCategory.CROSS_VIDEO:
            ok = len(manifest.video_ids) >= 2
        elif cat is RelationCategory.DILATED:
            ok = any(
                s.length >= min(DILATION_INTERVALS) * CLIP_LEN for s in manifest.segments
            )
        else:  # ROTATED / REVERSED / SHUFFLED need only one 16-frame clip
            ok = any(s.length >= CLIP_LEN for s in manifest.segments)
        if not ok:
            reasons.append(cat.name)
    if reasons:
        raise RelationConfigError(
            f"corpus cannot satisfy relation categories: {', '.join(reasons)}"
        )


def train_step(
    model: SiameseModel,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    context: str = "",
) -> tuple[float, float]:
    """One optimizer update; returns (mean loss, batch accuracy)."""
    xa, xb, labels = batch
    if len(labels) == 0:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    logits = model(xa, xb)
    loss = F.cross_entropy(logits, labels)
    if not torch.isfinite(loss):
        lr = optimizer.param_groups[0]["lr"]
        raise RuntimeError(f"non-finite loss {float(loss)} at {context or 'step'} (lr={lr})")
    loss.backward()
    optimizer.step()
    acc = float((logits.argmax(dim=1) == labels).double().mean())
    return float(loss.detach()), acc


def _evaluate(
    model: SiameseModel,
    batches: list[list[RelationSample]],
    dtype: torch.dtype,
) -> tuple[float, float, dict[str, float]]:
    """(mean loss, overall accuracy, per-relation accuracy) on fixed batches."""
    model.eval()
    losses, hits, total = [], 0, 0
    per_hit: dict[str, int] = {c.name: 0 for c in model.relations}
    per_tot: dict[str, int] = {c.name: 0 for c in model.relations}
    with torch.no_grad():
        for raw in batches:
            xa, xb, labels = collate_pairs(raw, model.relations, dtype)
            logits = model(xa, xb)
            losses.append(float(F.cross_entropy(logits, labels)))
            pred = logits.argmax(dim=1)
            for cat in model.relations:
                idx = model.label_index(cat)
                mask = labels == idx
                per_tot[cat.name] += int(mask.sum())
                per_hit[cat.name] += int((pred[mask] == idx).sum())
            hits += int((pred == labels).sum())
            total += len(labels)
    model.train()
    # None (JSON null) rather than NaN for categories the split never drew,
    # so histories stay comparable and logs stay valid JSON.
    per_rel = {
        name: (per_hit[name] / per_tot[name]) if per_tot[name] else None
        for name in per_tot
    }
    return float(np.mean(losses)), hits / total, per_rel


def _clone_state(state: dict) -> dict:
    return {k: v.detach().clone() if torch.is_tensor(v) else v for k, v in state.items()}


def _realize_batches(
    sampler: RelationSampler,
    count: int,
    batch_size: int,
    store: FrameStore,
    start: int = 0,
) -> list[list[RelationSample]]:
    return [
        [sampler.sample(start + lo + i, store) for i in range(min(batch_size, count - lo))]
        for lo in range(0, count, batch_size)
    ]


def pretrain(
    manifest: Manifest,
    store: FrameStore,
    config: TrainConfig,
    backbone_config: BackboneConfig,
    relations: tuple[RelationCategory, ...] = ALL_RELATIONS,
    fingerprint: str = "",
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Train the pair classifier; return the best-validation checkpoint.

    The training set is a fixed, seed-derived draw of samples_per_epoch
    pairs revisited every epoch; validation uses a disjoint seed stream
    of val_samples held-out pairs. Both are realized once up front.
    """
    relations = tuple(sorted(relations))
    check_relations_satisfiable(manifest, relations)

    model = SiameseModel(
        build_backbone(backbone_config, seed=derive_seed(config.seed, 11)),
        relations,
        head_seed=derive_seed(config.seed, 12),
    )
    model.to(config.dtype)
    model.train()
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = None
    if config.lr_milestones:
        scheduler = torch.optim.lr_scheduler.MultiStepLR(
            optimizer, milestones=list(config.lr_milestones), gamma=config.lr_gamma
        )

    train_sampler = RelationSampler(manifest, relations, seed=derive_seed(config.seed, 21))
    val_sampler = RelationSampler(manifest, relations, seed=derive_seed(config.seed, 22))
    train_batches = _realize_batches(
        train_sampler, config.samples_per_epoch, config.batch_size, store
    )
    val_batches = _realize_batches(
        val_sampler, config.val_samples, config.batch_size, store
    )

    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None

    def emit(record: dict) -> None:
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    best_state: dict = _clone_state(model.state_dict())
    best_opt: dict = optimizer.state_dict()
    best_acc, best_epoch = -1.0, -1
    try:
        for epoch in range(config.epochs):
            losses, accs = [], []
            for b, raw in enumerate(train_batches):
                batch = collate_pairs(raw, relations, config.dtype)
                loss, acc = train_step(
                    model, batch, optimizer, context=f"epoch {epoch} batch {b}"
                )
                losses.append(loss)
                accs.append(acc * len(raw))
            if scheduler is not None:
                scheduler.step()
            train_acc = float(np.sum(accs) / config.samples_per_epoch)
            emit(
                {
                    "epoch": epoch,
                    "split": "train",
                    "loss": float(np.mean(losses)),
                    "overall_acc": train_acc,
                    "per_relation_acc": {},
                }
            )
            val_loss, val_acc, per_rel = _evaluate(model, val_batches, config.dtype)
            emit(
                {
                    "epoch": epoch,
                    "split": "val",
                    "loss": val_loss,
                    "overall_acc": val_acc,
                    "per_relation_acc": per_rel,
                }
            )
            if val_acc > best_acc:
                best_acc, best_epoch = val_acc, epoch
                best_state = _clone_state(model.state_dict())
                best_opt = optimizer.state_dict()
            if (
                config.stop_train_acc is not None
                and config.stop_val_acc is not None
                and train_acc >= config.stop_train_acc
                and val_acc >= config.stop_val_acc
            ):
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    return Checkpoint(
        backbone_config=backbone_config,
        relations=relations,
        model_state=best_state,
        optimizer_state=best_opt,
        epoch=best_epoch,
        val_accuracy=best_acc,
        train_config=config,
        fingerprint=fingerprint,
        history=history,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    torch.save(
        {
            "kind": "pair-classifier-checkpoint",
            "backbone_config": ckpt.backbone_config.to_dict(),
            "relations": [c.name.lower() for c in ckpt.relations],
            "model_state": ckpt.model_state,
            "optimizer_state": ckpt.optimizer_state,
            "epoch": ckpt.epoch,
            "val_accuracy": ckpt.val_accuracy,
            "train_config": ckpt.train_config.to_dict(),
            "fingerprint": ckpt.fingerprint,
            "history": ckpt.history,
        },
        Path(path),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise OSError(f"cannot load checkpoint {path}: {exc}")
    if not isinstance(blob, dict) or blob.get("kind") != "pair-classifier-checkpoint":
        raise ValueError(f"{path} is not a pair-classifier checkpoint")
    return Checkpoint(
        backbone_config=BackboneConfig.from_dict(blob["backbone_config"]),
        relations=tuple(RelationCategory[n.upper()] for n in blob["relations"]),
        model_state=blob["model_state"],
        optimizer_state=blob["optimizer_state"],
        epoch=blob["epoch"],
        val_accuracy=blob["val_accuracy"],
        train_config=TrainConfig.from_dict(blob["train_config"]),
        fingerprint=blob.get("fingerprint", ""),
        history=blob.get("history", []),
    )


def export_single_stack(
    ckpt: Checkpoint, path: str | Path | None = None
) -> FeatureBackbone:
    """Extract one stack's clip encoder (no pair head) from a checkpoint."""
    backbone = FeatureBackbone(ckpt.backbone_config).to(ckpt.train_config.dtype)
    prefix = "backbone."
    state = {
        k[len(prefix):]: v for k, v in ckpt.model_state.items() if k.startswith(prefix)
    }
    backbone.load_state_dict(state)
    if path is not None:
        save_backbone(backbone, path)
    return backbone
