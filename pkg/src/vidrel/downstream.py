"""Downstream use of a pretrained clip encoder.

Four evaluations: fine-tuned action classification, nearest-neighbor
video retrieval over pooled clip descriptors, 2-D PCA embeddings of
features, and attention-map overlays of stage activations. Videos are
always summarized by 10 uniformly spaced, center-cropped clips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vidrel.backbones import FeatureBackbone, init_parameters
from vidrel.ingest import (
    CANONICAL_HEIGHT,
    CANONICAL_WIDTH,
    FrameStore,
    RawVideo,
    probe_video,
)
from vidrel.sampling import CLIP_LEN, CROP_SIZE
from vidrel.training import TrainConfig, clip_to_tensor, train_step
from vidrel.util import derive_seed

CLIPS_PER_VIDEO = 10
RETRIEVAL_KS = (1, 5, 10, 20, 50)
_CROP_Y = (CANONICAL_HEIGHT - CROP_SIZE) // 2
_CROP_X = (CANONICAL_WIDTH - CROP_SIZE) // 2


@dataclass(frozen=True)
class LabeledVideoDataset:
    """Videos with integer class labels for one split."""

    items: tuple[tuple[RawVideo, int], ...]
    class_count: int
    split: str

    def __post_init__(self):
        if self.class_count < 1:
            raise ValueError("class_count must be at least 1")
        for video, label in self.items:
            if not 0 <= label < self.class_count:
                raise ValueError(
                    f"label {label} of {video.video_id} outside [0, {self.class_count})"
                )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def videos(self) -> list[RawVideo]:
        return [v for v, _ in self.items]

    @property
    def labels(self) -> list[int]:
        return [y for _, y in self.items]


def load_action_dataset(labels_path: str | Path) -> dict[str, LabeledVideoDataset]:
    """Read a labels.jsonl file into per-split datasets.

    Expects one header line {"kind": "labels", "class_count": N} followed
    by {video_id, path, label, split} records. Splits must be disjoint.
    """
    labels_path = Path(labels_path)
    class_count = None
    rows = []
    with open(labels_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "labels":
                class_count = rec["class_count"]
                continue
            rows.append(rec)
    if class_count is None:
        raise ValueError(f"{labels_path} has no labels header line")
    seen: dict[str, str] = {}
    by_split: dict[str, list[tuple[RawVideo, int]]] = {}
    for rec in rows:
        vid, split = rec["video_id"], rec["split"]
        if vid in seen:
            raise ValueError(f"video {vid} appears in splits {seen[vid]} and {split}")
        seen[vid] = split
        path = Path(rec["path"])
        if not path.is_absolute():
            path = labels_path.parent / path
        by_split.setdefault(split, []).append((probe_video(path), rec["label"]))
    return {
        split: LabeledVideoDataset(tuple(items), class_count, split)
        for split, items in by_split.items()
    }


class VideoClassifier(nn.Module):
    """Clip encoder plus a linear class head."""

    def __init__(self, backbone: FeatureBackbone, class_count: int, head_seed: int = 0):
        super().__init__()
        if class_count < 2:
            raise ValueError(f"need at least 2 classes, got {class_count}")
        self.backbone = backbone
        self.class_count = class_count
        self.head = nn.Linear(backbone.feature_dim, class_count)
        init_parameters(self.head, head_seed)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(clips))


def uniform_clip_starts(frame_count: int, clips: int = CLIPS_PER_VIDEO) -> list[int]:
    """Start offsets i*(T-16)/(clips-1), floored; all zero when T == 16."""
    if frame_count < CLIP_LEN:
        raise ValueError(f"video has {frame_count} frames, need at least {CLIP_LEN}")
    return [i * (frame_count - CLIP_LEN) // (clips - 1) for i in range(clips)]


def _eval_clips(video: RawVideo, store: FrameStore) -> torch.Tensor:
    """The video's 10 uniformly spaced, center-cropped clips as a batch."""
    starts = uniform_clip_starts(video.frame_count)
    clips = []
    for s in starts:
        frames = store.gather(video.video_id, list(range(s, s + CLIP_LEN)))
        crop = frames[:, _CROP_Y : _CROP_Y + CROP_SIZE, _CROP_X : _CROP_X + CROP_SIZE, :]
        clips.append(clip_to_tensor(crop))
    return torch.stack(clips)


def predict_video(
    model: VideoClassifier, video: RawVideo, store: FrameStore
) -> tuple[int, np.ndarray]:
    """Average the softmax of 10 uniform clips; return (argmax, mean probs)."""
    model.eval()
    with torch.no_grad():
        logits = model(_eval_clips(video, store).to(next(model.parameters()).dtype))
        probs = F.softmax(logits, dim=1).mean(dim=0)
    return int(probs.argmax()), probs.double().numpy()


@dataclass(frozen=True)
class VideoDescriptor:
    """Mean of a video's 10 clip features, with the clip features kept."""

    video_id: str
    vector: np.ndarray
    clip_vectors: np.ndarray

    def __post_init__(self):
        if self.clip_vectors.ndim != 2:
            raise ValueError("clip_vectors must be (clips, feature_dim)")
        if self.vector.shape != self.clip_vectors.shape[1:]:
            raise ValueError("vector / clip_vectors dimension mismatch")


def extract_descriptor(
    backbone: FeatureBackbone, video: RawVideo, store: FrameStore
) -> VideoDescriptor:
    backbone.eval()
    with torch.no_grad():
        feats = backbone(_eval_clips(video, store).to(next(backbone.parameters()).dtype))
    clip_vectors = feats.double().numpy()
    return VideoDescriptor(
        video_id=video.video_id,
        vector=clip_vectors.mean(axis=0),
        clip_vectors=clip_vectors,
    )


# -- fine-tuning ---------------------------------------------------------------


@dataclass
class FinetuneResult:
    model_state: dict
    class_count: int
    history: list[dict] = field(default_factory=list, repr=False)
    test_accuracy: float = float("nan")
    epochs_to_threshold: int | None = None

    def build_model(self, backbone: FeatureBackbone) -> VideoClassifier:
        model = VideoClassifier(backbone, self.class_count)
        model.load_state_dict(self.model_state)
        return model


def _train_clip(
    video: RawVideo, store: FrameStore, rng: np.random.Generator
) -> torch.Tensor:
    """One random 16-frame clip with a random crop, for fine-tuning."""
    start = int(rng.integers(0, video.frame_count - CLIP_LEN + 1))
    y = int(rng.integers(0, CANONICAL_HEIGHT - CROP_SIZE + 1))
    x = int(rng.integers(0, CANONICAL_WIDTH - CROP_SIZE + 1))
    frames = store.gather(video.video_id, list(range(start, start + CLIP_LEN)))
    return clip_to_tensor(frames[:, y : y + CROP_SIZE, x : x + CROP_SIZE, :])


def evaluate_classifier(
    model: VideoClassifier, dataset: LabeledVideoDataset, store: FrameStore
) -> float:
    """Video-level accuracy under the 10-clip prediction protocol."""
    hits = 0
    for video, label in dataset.items:
        pred, _ = predict_video(model, video, store)
        hits += int(pred == label)
    return hits / len(dataset)


def finetune(
    backbone: FeatureBackbone,
    train: LabeledVideoDataset,
    store: FrameStore,
    config: TrainConfig,
    test: LabeledVideoDataset | None = None,
    stop_test_acc: float | None = None,
) -> FinetuneResult:
    """Train backbone + fresh class head jointly on labeled videos.

    Each epoch shows every training video once (fresh random clip and
    crop per epoch). When a test split is given it is scored with the
    10-clip protocol after every epoch; stop_test_acc allows early exit
    and records how many epochs the threshold took.
    """
    if len(train) == 0:
        raise ValueError("empty training dataset")
    if train.class_count < 2:
        raise ValueError(f"need at least 2 classes, got {train.class_count}")
    model = VideoClassifier(
        backbone, train.class_count, head_seed=derive_seed(config.seed, 42)
    )
    model.to(config.dtype)
    model.train()
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    result = FinetuneResult(model_state={}, class_count=train.class_count)
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, 43, epoch))
        order = rng.permutation(len(train))
        losses, hits = [], 0
        for lo in range(0, len(order), config.batch_size):
            chosen = order[lo : lo + config.batch_size]
            clips = torch.stack(
                [_train_clip(train.items[i][0], store, rng) for i in chosen]
            ).to(config.dtype)
            labels = torch.tensor([train.items[i][1] for i in chosen], dtype=torch.long)
            optimizer.zero_grad()
            logits = model(clips)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite fine-tune loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            hits += int((logits.argmax(dim=1) == labels).sum())
        record = {
            "epoch": epoch,
            "split": "train",
            "loss": float(np.mean(losses)),
            "accuracy": hits / len(train),
        }
        result.history.append(record)
        if test is not None:
            acc = evaluate_classifier(model, test, store)
            model.train()
            result.history.append({"epoch": epoch, "split": "test", "accuracy": acc})
            result.test_accuracy = acc
            if result.epochs_to_threshold is None and stop_test_acc is not None:
                if acc >= stop_test_acc:
                    result.epochs_to_threshold = epoch + 1
                    break
    result.model_state = {
        k: v.detach().clone() for k, v in model.state_dict().items()
    }
    return result


# -- retrieval -----------------------------------------------------------------


def _pairwise_distance(
    queries: np.ndarray, database: np.ndarray, metric: str
) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    d = np.asarray(database, dtype=np.float64)
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"feature dim mismatch: {q.shape[1]} vs {d.shape[1]}")
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        dn = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ dn.T
    if metric == "euclidean":
        return np.sqrt(
            np.maximum(
                np.sum(q**2, axis=1)[:, None]
                - 2.0 * q @ d.T
                + np.sum(d**2, axis=1)[None, :],
                0.0,
            )
        )
    raise ValueError(f"unknown metric {metric!r}, expected cosine or euclidean")


@dataclass(frozen=True)
class RetrievalResult:
    ks: tuple[int, ...]
    accuracy: dict[int, float]
    metric: str
    level: str

    def table(self) -> str:
        """Text table with the top1/5/10/20/50 column layout."""
        header = "  ".join(f"top{k}" for k in self.ks)
        row = "  ".join(f"{100.0 * self.accuracy[k]:{len(f'top{k}')}.1f}" for k in self.ks)
        return header + "\n" + row


def retrieve(
    test_descriptors: list[VideoDescriptor],
    train_descriptors: list[VideoDescriptor],
    test_labels: list[int],
    train_labels: list[int],
    ks: tuple[int, ...] = RETRIEVAL_KS,
    metric: str = "cosine",
    level: str = "video",
) -> RetrievalResult:
    """Top-k retrieval accuracy: a query is correct at k when any of its
    k nearest training descriptors shares the query's class.

    level="video" compares mean-pooled per-video vectors; level="clip"
    queries every test clip vector against every train clip vector.
    """
    if not test_descriptors or not train_descriptors:
        raise ValueError("both descriptor sets must be non-empty")
    if len(test_descriptors) != len(test_labels):
        raise ValueError("test descriptor/label count mismatch")
    if len(train_descriptors) != len(train_labels):
        raise ValueError("train descriptor/label count mismatch")
    if level == "video":
        queries = np.stack([d.vector for d in test_descriptors])
        database = np.stack([d.vector for d in train_descriptors])
        query_labels = np.asarray(test_labels)
        db_labels = np.asarray(train_labels)
    elif level == "clip":
        queries = np.concatenate([d.clip_vectors for d in test_descriptors])
        database = np.concatenate([d.clip_vectors for d in train_descriptors])
        query_labels = np.concatenate(
            [[y] * len(d.clip_vectors) for d, y in zip(test_descriptors, test_labels)]
        )
        db_labels = np.concatenate(
            [[y] * len(d.clip_vectors) for d, y in zip(train_descriptors, train_labels)]
        )
    else:
        raise ValueError(f"unknown level {level!r}, expected video or clip")

    dist = _pairwise_distance(queries, database, metric)
    order = np.argsort(dist, axis=1, kind="stable")
    ranked_match = db_labels[order] == query_labels[:, None]
    accuracy = {}
    for k in ks:
        kk = min(k, ranked_match.shape[1])
        accuracy[k] = float(ranked_match[:, :kk].any(axis=1).mean())
    return RetrievalResult(ks=tuple(ks), accuracy=accuracy, metric=metric, level=level)


# -- embeddings and attention --------------------------------------------------


def pca_embed(features: np.ndarray, target_dim: int = 2) -> np.ndarray:
    """Mean-centered projection onto the top principal axes.

    Component variances come out non-increasing; signs are fixed so the
    largest-magnitude loading of each axis is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {x.shape}")
    if not 1 <= target_dim <= min(x.shape):
        raise ValueError(f"target_dim {target_dim} invalid for shape {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    flip = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    coords = u * s  # projections onto all principal axes, ordered by variance
    return coords[:, :target_dim] * flip[:target_dim]


def attention_map(activations) -> np.ndarray:
    """Per-frame spatial attention: channel-summed |activation|, min-max
    normalized to [0,1] frame by frame. Zero-range frames map to zeros."""
    a = np.asarray(
        activations.detach().cpu().numpy()
        if torch.is_tensor(activations)
        else activations,
        dtype=np.float64,
    )
    if a.ndim != 4 or a.size == 0:
        raise ValueError(f"expected non-empty (C, T, H, W) activations, got {a.shape}")
    energy = np.sum(np.abs(a), axis=0)  # (T, H, W)
    maps = np.zeros_like(energy)
    for t in range(energy.shape[0]):
        lo, hi = float(energy[t].min()), float(energy[t].max())
        if hi > lo:
            maps[t] = (energy[t] - lo) / (hi - lo)
    return maps


def attention_overlays(
    maps: np.ndarray, frames: np.ndarray, alpha: float = 0.5
) -> np.ndarray:
    """Blend heatmaps onto RGB frames; maps are upsampled to frame size."""
    if maps.ndim != 3 or frames.ndim != 4:
        raise ValueError("expected (T,h,w) maps and (T,H,W,3) frames")
    t = min(len(maps), len(frames))
    out = np.empty((t,) + frames.shape[1:], dtype=np.uint8)
    for i in range(t):
        heat = cv2.resize(
            (maps[i] * 255.0).astype(np.uint8),
            (frames.shape[2], frames.shape[1]),
            interpolation=cv2.INTER_LINEAR,
        )
        colored = cv2.applyColorMap(heat, cv2.COLORMAP_JET)[:, :, ::-1]  # BGR -> RGB
        out[i] = np.clip(
            alpha * colored.astype(np.float64)
            + (1.0 - alpha) * frames[i].astype(np.float64),
            0,
            255,
        ).astype(np.uint8)
    return out
