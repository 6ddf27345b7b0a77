"""Synthetic ground-truthed corpora for pipeline testing.

Videos are rendered as smooth sinusoidal gratings plus a Gaussian blob
over a per-video background color. Shot cuts swap grating orientation,
period, and blob placement all at once, so adjacent-frame appearance
jumps hard at every recorded boundary while within-shot motion stays
gentle. Generation is a pure function of the spec (seed included):
rerunning produces bit-identical pixels.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vidrel.ingest import RawVideo, write_archive

MOTION_KINDS = ("translate", "rotate", "static")

# Grating periods in pixels; consecutive shots never reuse one.
_PERIODS = (20.0, 26.0, 33.0, 41.0)
_AMPLITUDE = 45.0
_BLOB_GAIN = 60.0
# The blob is taller than it is wide and always sits above the centre line
# of every possible crop.  Both properties survive crop jitter, so a frame
# stack carries visible evidence of any spatial rotation: 90/270 degrees
# turn the blob sideways, 180 degrees drop it below the centre line.
_BLOB_SIGMA_Y = 16.0
_BLOB_SIGMA_X = 8.0
# Every frame is brighter toward the top by a fixed gentle ramp.  "Up is
# brighter" is a local texture property, so it survives both crop jitter
# and spatially pooled features, and it points sideways or down after a
# spatial rotation while time-domain edits leave it alone.
_RAMP_GAIN = 40.0
# Minimum orientation jump across a cut (degrees, mod 180).
_MIN_CUT_ANGLE = 45.0


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Deterministic recipe for a multi-shot test corpus."""

    num_videos: int
    shots_per_video: tuple[int, int]  # inclusive range
    shot_length_range: tuple[int, int]  # inclusive range, frames
    motion_kinds: tuple[str, ...] = MOTION_KINDS
    height: int = 128
    width: int = 171
    fps: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.num_videos <= 0:
            raise ValueError("num_videos must be positive")
        if self.shots_per_video[0] > self.shots_per_video[1] or self.shots_per_video[0] < 1:
            raise ValueError(f"bad shots_per_video range {self.shots_per_video}")
        if self.shot_length_range[0] > self.shot_length_range[1] or self.shot_length_range[0] < 2:
            raise ValueError(f"bad shot_length_range {self.shot_length_range}")
        for kind in self.motion_kinds:
            if kind not in MOTION_KINDS:
                raise ValueError(f"unknown motion kind {kind!r}")


@dataclass(frozen=True)
class ShotTruth:
    video_id: str
    begin_frame: int
    end_frame: int


def _video_background(index: int, rng: np.random.Generator) -> np.ndarray:
    # Golden-ratio hue spacing keeps video identities far apart in color.
    hue = (0.11 + index * 0.381966) % 1.0
    value = 0.55 + 0.25 * rng.random()
    r, g, b = colorsys.hsv_to_rgb(hue, 0.45, value)
    return np.array([r, g, b], dtype=np.float64) * 255.0


def _draw_orientation(rng: np.random.Generator, previous: float | None) -> float:
    """Orientation in degrees, at least _MIN_CUT_ANGLE from the previous shot."""
    for _ in range(64):
        theta = float(rng.uniform(0.0, 180.0))
        if previous is None:
            return theta
        delta = abs(theta - previous) % 180.0
        if min(delta, 180.0 - delta) >= _MIN_CUT_ANGLE:
            return theta
    # rng-independent fallback; unreachable in practice
    return (previous + 90.0) % 180.0


@dataclass
class _ShotRecipe:
    kind: str
    length: int
    theta_deg: float
    period: float
    phase0: float
    speed: float  # px/frame (translate) or deg/frame (rotate)
    blob_center: tuple[float, float]
    blob_phase: float

    @property
    def end_theta_deg(self) -> float:
        """Grating orientation at the shot's final frame (rotation drifts it)."""
        if self.kind == "rotate":
            return (self.theta_deg + self.speed * (self.length - 1)) % 180.0
        return self.theta_deg % 180.0


def _plan_shot(
    rng: np.random.Generator,
    kind: str,
    length: int,
    height: int,
    width: int,
    prev_theta: float | None,
    used_periods: tuple[float, ...],
) -> _ShotRecipe:
    theta = _draw_orientation(rng, prev_theta)
    # Every shot of a video gets its own period while they last, so a
    # clip pair from two different shots never matches in stripe width.
    period_choices = [p for p in _PERIODS if p not in used_periods]
    if not period_choices:
        period_choices = [p for p in _PERIODS if p != used_periods[-1]]
    period = float(rng.choice(period_choices))
    if kind == "translate":
        speed = float(rng.uniform(0.9, 1.1))
    elif kind == "rotate":
        speed = float(rng.uniform(0.5, 0.8))
    else:
        speed = 0.0
    # Keep the blob centre 14-21 px above the frame centre so it stays in
    # the upper half of every 112x112 crop (vertical crop jitter is only
    # 16 px).  A time-reversed clip keeps it there while a 180-degree
    # rotation moves it below the line, which keeps those two transforms
    # visually distinct on a 180-degree-symmetric grating.
    cy = height / 2.0 - float(rng.uniform(14.0, 21.0))
    cx = width / 2.0 + float(rng.uniform(-8.0, 8.0))
    return _ShotRecipe(
        kind=kind,
        length=length,
        theta_deg=theta,
        period=period,
        phase0=float(rng.uniform(0.0, 2.0 * np.pi)),
        speed=speed,
        blob_center=(cy, cx),
        blob_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def render_shot(recipe: _ShotRecipe, height: int, width: int, bg: np.ndarray) -> np.ndarray:
    """Render one shot as (length, H, W, 3) uint8 RGB."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    frames = np.empty((recipe.length, height, width, 3), dtype=np.uint8)
    cy, cx = recipe.blob_center
    ramp = _RAMP_GAIN * (0.5 - ys / (height - 1))
    for t in range(recipe.length):
        if recipe.kind == "rotate":
            theta = np.deg2rad(recipe.theta_deg + recipe.speed * t)
            phase = recipe.phase0
        elif recipe.kind == "translate":
            theta = np.deg2rad(recipe.theta_deg)
            phase = recipe.phase0 + 2.0 * np.pi * recipe.speed * t / recipe.period
        else:
            theta = np.deg2rad(recipe.theta_deg)
            phase = recipe.phase0
        proj = xs * np.cos(theta) + ys * np.sin(theta)
        grating = _AMPLITUDE * np.sin(2.0 * np.pi * proj / recipe.period + phase)
        # Gentle circular wobble; for rotating shots it follows the rotation.
        if recipe.kind == "rotate":
            wobble = np.deg2rad(recipe.speed * t)
        elif recipe.kind == "translate":
            wobble = 0.05 * t
        else:
            wobble = 0.0
        by = cy + 3.5 * np.sin(recipe.blob_phase + wobble)
        bx = cx + 3.5 * np.cos(recipe.blob_phase + wobble)
        blob = _BLOB_GAIN * np.exp(
            -((ys - by) ** 2) / (2.0 * _BLOB_SIGMA_Y**2)
            - ((xs - bx) ** 2) / (2.0 * _BLOB_SIGMA_X**2)
        )
        lum = grating + blob + ramp
        frame = np.clip(bg[None, None, :] + lum[:, :, None], 0.0, 255.0)
        frames[t] = np.rint(frame).astype(np.uint8)
    return frames


def render_video(
    spec: SyntheticCorpusSpec, video_index: int
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Render one corpus video; returns (frames, shot boundary list)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, video_index]))
    bg = _video_background(video_index, rng)
    n_shots = int(rng.integers(spec.shots_per_video[0], spec.shots_per_video[1] + 1))
    blocks: list[np.ndarray] = []
    bounds: list[tuple[int, int]] = []
    prev_theta: float | None = None
    used_periods: tuple[float, ...] = ()
    cursor = 0
    for _ in range(n_shots):
        kind = str(rng.choice(spec.motion_kinds))
        length = int(
            rng.integers(spec.shot_length_range[0], spec.shot_length_range[1] + 1)
        )
        recipe = _plan_shot(
            rng, kind, length, spec.height, spec.width, prev_theta, used_periods
        )
        blocks.append(render_shot(recipe, spec.height, spec.width, bg))
        bounds.append((cursor, cursor + length))
        cursor += length
        # The next cut compares this shot's LAST frame with the next
        # shot's first, so the angle constraint must use the drifted
        # end-of-shot orientation, not the starting one.
        prev_theta = recipe.end_theta_deg
        used_periods = used_periods + (recipe.period,)
    return np.concatenate(blocks, axis=0), bounds


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec, out_dir: str | Path
) -> tuple[list[RawVideo], list[ShotTruth]]:
    """Write the corpus to disk and return (videos, ground-truth shots)."""
    out_dir = Path(out_dir)
    videos: list[RawVideo] = []
    truths: list[ShotTruth] = []
    for v in range(spec.num_videos):
        video_id = f"synth{v:04d}"
        frames, bounds = render_video(spec, v)
        videos.append(write_archive(out_dir / video_id, video_id, frames, fps=spec.fps))
        truths.extend(ShotTruth(video_id, b, e) for b, e in bounds)
    write_shot_truth(out_dir / "shots_truth.jsonl", truths)
    return videos, truths


def write_shot_truth(path: str | Path, truths: list[ShotTruth]) -> None:
    with open(path, "w") as fh:
        for t in truths:
            fh.write(
                json.dumps(
                    {
                        "video_id": t.video_id,
                        "begin_frame": t.begin_frame,
                        "end_frame": t.end_frame,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_shot_truth(path: str | Path) -> list[ShotTruth]:
    truths = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            truths.append(
                ShotTruth(rec["video_id"], rec["begin_frame"], rec["end_frame"])
            )
    return truths


# ---------------------------------------------------------------------------
# Labeled action sets for downstream evaluation
# ---------------------------------------------------------------------------

ACTION_CLASS_NAMES = (
    "vertical_stripes_drift",
    "horizontal_stripes_drift",
    "rotating_pattern",
    "static_pattern",
)


@dataclass(frozen=True)
class ActionDatasetSpec:
    """Four motion-kind classes, separable by construction."""

    train_per_class: int
    test_per_class: int
    frames_per_video: tuple[int, int] = (40, 56)
    height: int = 128
    width: int = 171
    fps: float = 25.0
    seed: int = 0


def _action_recipe(rng: np.random.Generator, label: int, length: int,
                   height: int, width: int) -> _ShotRecipe:
    if label == 0:  # vertical stripes (gradient along x), drifting
        theta = float(rng.uniform(-15.0, 15.0)) % 180.0
        kind, speed = "translate", float(rng.uniform(0.8, 1.2))
    elif label == 1:  # horizontal stripes, drifting
        theta = float(rng.uniform(75.0, 105.0))
        kind, speed = "translate", float(rng.uniform(0.8, 1.2))
    elif label == 2:  # any orientation, rotating
        theta = float(rng.uniform(0.0, 180.0))
        kind, speed = "rotate", float(rng.uniform(0.5, 0.8))
    else:  # static
        theta = float(rng.uniform(0.0, 180.0))
        kind, speed = "static", 0.0
    cy = height / 2.0 + float(rng.uniform(-0.1, 0.1)) * height
    cx = width / 2.0 + float(rng.uniform(-0.1, 0.1)) * width
    return _ShotRecipe(
        kind=kind,
        length=length,
        theta_deg=theta,
        period=float(rng.choice(_PERIODS)),
        phase0=float(rng.uniform(0.0, 2.0 * np.pi)),
        speed=speed,
        blob_center=(cy, cx),
        blob_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def generate_action_dataset(spec: ActionDatasetSpec, out_dir: str | Path) -> Path:
    """Write a labeled single-shot corpus plus labels.jsonl; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    counter = 0
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for label in range(len(ACTION_CLASS_NAMES)):
            for _ in range(per_class):
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, 7000 + counter])
                )
                video_id = f"act{counter:04d}"
                length = int(
                    rng.integers(spec.frames_per_video[0], spec.frames_per_video[1] + 1)
                )
                bg = _video_background(int(rng.integers(0, 1000)), rng)
                recipe = _action_recipe(rng, label, length, spec.height, spec.width)
                frames = render_shot(recipe, spec.height, spec.width, bg)
                write_archive(out_dir / video_id, video_id, frames, fps=spec.fps)
                records.append(
                    {
                        "video_id": video_id,
                        "path": video_id,
                        "label": label,
                        "split": split,
                    }
                )
                counter += 1
    labels_path = out_dir / "labels.jsonl"
    with open(labels_path, "w") as fh:
        fh.write(
            json.dumps(
                {"kind": "labels", "class_count": len(ACTION_CLASS_NAMES)},
                sort_keys=True,
            )
            + "\n"
        )
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return labels_path
