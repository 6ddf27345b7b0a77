"""Typed run configuration shared by every pipeline stage.

A run is described by one JSON document with a section per stage plus a
single global seed.  Loading is strict: unknown keys anywhere in the
document are rejected, so a typo never silently falls back to a default.
Every stage derives its own RNG seed from the global seed, and each
artifact records a fingerprint of the configuration slice that produced
it, letting later stages refuse inputs built under different settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .sampling import RelationCategory
from .synthetic import ActionDatasetSpec, SyntheticCorpusSpec
from .training import TrainConfig
from .util import canonical_json, derive_seed

__all__ = [
    "ActionSection",
    "BackboneSection",
    "ConfigError",
    "CorpusSection",
    "DownstreamSection",
    "RunConfig",
    "SampleSection",
    "ShotSection",
    "TrainSection",
    "load_run_config",
    "relation_names",
]


class ConfigError(ValueError):
    """Raised for malformed, unknown, or inconsistent configuration."""


def relation_names() -> tuple[str, ...]:
    """All relation category names, lowercase, in label order."""
    return tuple(c.name.lower() for c in RelationCategory)


@dataclass(frozen=True)
class CorpusSection:
    """Shape of the synthetic multi-shot pretraining corpus."""

    videos: int = 20
    shots_min: int = 1
    shots_max: int = 4
    frames_min: int = 60
    frames_max: int = 140
    motion_kinds: tuple[str, ...] = ("translate", "rotate", "static")
    fps: float = 25.0

    def spec(self, seed: int) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(
            num_videos=self.videos,
            shots_per_video=(self.shots_min, self.shots_max),
            shot_length_range=(self.frames_min, self.frames_max),
            motion_kinds=self.motion_kinds,
            fps=self.fps,
            seed=seed,
        )


@dataclass(frozen=True)
class ActionSection:
    """Shape of the labeled synthetic action-recognition set."""

    train_per_class: int = 12
    test_per_class: int = 5
    frames_min: int = 40
    frames_max: int = 56
    fps: float = 25.0

    def spec(self, seed: int) -> ActionDatasetSpec:
        return ActionDatasetSpec(
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            frames_per_video=(self.frames_min, self.frames_max),
            fps=self.fps,
            seed=seed,
        )


@dataclass(frozen=True)
class ShotSection:
    """Shot detection and segmentation parameters."""

    segment_len: int = 300
    min_segment_len: int = 48
    threshold: float | str = "adaptive"

    def __post_init__(self):
        if isinstance(self.threshold, str):
            if self.threshold != "adaptive":
                raise ConfigError(
                    f"shots.threshold must be a positive number or 'adaptive', "
                    f"got {self.threshold!r}"
                )
        elif float(self.threshold) <= 0:
            raise ConfigError(f"shots.threshold must be positive, got {self.threshold}")
        if not 0 < self.min_segment_len < self.segment_len:
            raise ConfigError(
                f"need 0 < min_segment_len < segment_len, got "
                f"{self.min_segment_len} / {self.segment_len}"
            )


@dataclass(frozen=True)
class SampleSection:
    """Relation pair sampling parameters."""

    relations: tuple[str, ...] = relation_names()
    count: int = 10_000
    aligned_patterns: bool = False

    def __post_init__(self):
        known = set(relation_names())
        bad = [r for r in self.relations if r not in known]
        if bad:
            raise ConfigError(
                f"unknown relation names {bad}; valid names: {sorted(known)}"
            )
        if len(set(self.relations)) != len(self.relations):
            raise ConfigError(f"duplicate relation names in {self.relations}")
        if self.count <= 0:
            raise ConfigError(f"samples.count must be positive, got {self.count}")

    def categories(self) -> tuple[RelationCategory, ...]:
        return tuple(sorted(RelationCategory[r.upper()] for r in self.relations))


@dataclass(frozen=True)
class BackboneSection:
    """Which feature extractor to build."""

    arch: str = "c3d"
    preset: str = "tiny"

    def __post_init__(self):
        if self.preset not in ("tiny", "full"):
            raise ConfigError(f"backbone.preset must be 'tiny' or 'full', got {self.preset!r}")


@dataclass(frozen=True)
class TrainSection:
    """Relation pretraining hyperparameters (seed is derived globally)."""

    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    samples_per_epoch: int = 112
    val_samples: int = 56
    lr_milestones: tuple[int, ...] = (100, 200)
    lr_gamma: float = 0.1
    precision: str = "float32"
    stop_train_acc: float | None = None
    stop_val_acc: float | None = None

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            samples_per_epoch=self.samples_per_epoch,
            val_samples=self.val_samples,
            lr_milestones=self.lr_milestones,
            lr_gamma=self.lr_gamma,
            precision=self.precision,
            stop_train_acc=self.stop_train_acc,
            stop_val_acc=self.stop_val_acc,
            seed=seed,
        )


@dataclass(frozen=True)
class DownstreamSection:
    """Fine-tuning, retrieval, and visualization parameters."""

    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (100,)
    lr_gamma: float = 0.1
    stop_test_acc: float | None = None
    topk: tuple[int, ...] = (1, 5, 10, 20, 50)
    metric: str = "cosine"
    level: str = "video"

    def __post_init__(self):
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"downstream.metric must be cosine or euclidean, got {self.metric!r}")
        if self.level not in ("video", "clip"):
            raise ConfigError(f"downstream.level must be video or clip, got {self.level!r}")
        if any(k <= 0 for k in self.topk) or list(self.topk) != sorted(set(self.topk)):
            raise ConfigError(f"downstream.topk must be strictly increasing positives, got {self.topk}")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_milestones=self.lr_milestones,
            lr_gamma=self.lr_gamma,
            seed=seed,
        )


# Stage name -> (tag mixed into the global seed, config sections that
# determine the stage's output).  A later stage's slice is a superset of
# every earlier stage it consumes, so artifact fingerprints only change
# when a setting that actually feeds them changes.
_STAGES: dict[str, tuple[int, tuple[str, ...]]] = {
    "synth": (1, ("seed", "corpus")),
    "synth-actions": (2, ("seed", "actions")),
    "edit-shots": (3, ("seed", "corpus", "shots")),
    "build-samples": (4, ("seed", "corpus", "shots", "samples")),
    "pretrain": (5, ("seed", "corpus", "shots", "samples", "backbone", "training")),
    "finetune": (6, ("seed", "actions", "backbone", "downstream")),
    "retrieve": (7, ("seed", "backbone", "downstream")),
    "embed": (8, ("seed", "backbone", "downstream")),
    "attn": (9, ("seed", "backbone", "downstream")),
}


@dataclass(frozen=True)
class RunConfig:
    """One reproducible experiment: a global seed plus per-stage sections."""

    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    actions: ActionSection = field(default_factory=ActionSection)
    shots: ShotSection = field(default_factory=ShotSection)
    samples: SampleSection = field(default_factory=SampleSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    training: TrainSection = field(default_factory=TrainSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict[str, Any]:
        """Fully-resolved plain-data form (every default materialized)."""
        out: dict[str, Any] = {"seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            section = getattr(self, f.name)
            out[f.name] = {
                sf.name: _plain(getattr(section, sf.name)) for sf in fields(section)
            }
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        unknown = set(data) - set(_SECTION_CLASSES) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        if "seed" in data:
            kwargs["seed"] = _expect_int(data["seed"], "seed")
        for name, section_cls in _SECTION_CLASSES.items():
            if name in data:
                kwargs[name] = _build_section(section_cls, data[name], name)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def stage_seed(self, stage: str) -> int:
        """Deterministic per-stage seed derived from the global one."""
        tag, _ = _stage_entry(stage)
        return derive_seed(self.seed, tag)

    def stage_fingerprint(self, stage: str) -> str:
        """Hash of the config slice that determines the stage's output."""
        _, slice_keys = _stage_entry(stage)
        resolved = self.to_dict()
        payload = {k: resolved[k] for k in slice_keys}
        digest = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
        return digest[:16]


_SECTION_CLASSES = {
    "corpus": CorpusSection,
    "actions": ActionSection,
    "shots": ShotSection,
    "samples": SampleSection,
    "backbone": BackboneSection,
    "training": TrainSection,
    "downstream": DownstreamSection,
}


def _stage_entry(stage: str) -> tuple[int, tuple[str, ...]]:
    try:
        return _STAGES[stage]
    except KeyError:
        raise ConfigError(
            f"unknown stage {stage!r}; valid stages: {sorted(_STAGES)}"
        ) from None


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _expect_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _build_section(section_cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"section {path!r} must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(section_cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in section {path!r}")
    kwargs = {k: _from_plain(v) for k, v in data.items()}
    try:
        return section_cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"in section {path!r}: {exc}") from exc


def _from_plain(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_from_plain(v) for v in value)
    return value


def load_run_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus override mapping.

    Overrides use the same nested shape as the file and win key-by-key;
    with no file and no overrides the result is all defaults.
    """
    base: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                base = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    merged = _deep_merge(base, overrides or {})
    return RunConfig.from_dict(merged)


def _deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out
