"""Relation-labeled clip-pair sampling.

Each training example is a pair of 16-frame clips plus the relation
between them: drawn from the same shot, the same video, different
videos, or one clip is a rotated / time-reversed / frame-shuffled /
temporally dilated rendition of the other. Labels are correct by
construction and can be re-derived from provenance alone.

Sampling is split into a cheap planning stage (pure index arithmetic,
random-access deterministic) and a realization stage that decodes
pixels through a FrameStore.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from vidrel.ingest import CANONICAL_HEIGHT, CANONICAL_WIDTH, FrameStore
from vidrel.shots import Manifest, Segment

CLIP_LEN = 16
CROP_SIZE = 112
ROTATION_ANGLES = (90, 180, 270)
DILATION_INTERVALS = (2, 4)
MAX_CATEGORY_RETRIES = 16
_MAX_OFFSET_REDRAWS = 64


class RelationCategory(IntEnum):
    """Fixed canonical ordering; label indices follow the active subset."""

    SAME_SHOT = 0
    SAME_VIDEO = 1  # same video, different shot
    CROSS_VIDEO = 2
    ROTATED = 3
    REVERSED = 4
    SHUFFLED = 5
    DILATED = 6


ALL_RELATIONS = tuple(RelationCategory)

_COOCCURRENCE = (
    RelationCategory.SAME_SHOT,
    RelationCategory.SAME_VIDEO,
    RelationCategory.CROSS_VIDEO,
)


class NotSatisfiable(Exception):
    """The corpus cannot supply a partner for the requested category."""


class DegenerateCorpusError(RuntimeError):
    """Category resampling kept failing; the corpus is too small/uniform."""


class LabelError(ValueError):
    """A sample's provenance contradicts its label."""


@dataclass(frozen=True)
class TransformDescriptor:
    """What was done to a clip, precisely enough to invert it."""

    kind: str = "none"  # none | rotate | invert | shuffle | dilate
    rotation_deg: int | None = None
    permutation: tuple[int, ...] | None = None
    interval: int | None = None

    def __post_init__(self):
        populated = {
            "rotation_deg": self.rotation_deg is not None,
            "permutation": self.permutation is not None,
            "interval": self.interval is not None,
        }
        expected = {
            "none": set(),
            "rotate": {"rotation_deg"},
            "invert": set(),
            "shuffle": {"permutation"},
            "dilate": {"interval"},
        }
        if self.kind not in expected:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        actual = {name for name, on in populated.items() if on}
        if actual != expected[self.kind]:
            raise ValueError(
                f"transform {self.kind!r} must populate exactly "
                f"{sorted(expected[self.kind])}, got {sorted(actual)}"
            )
        if self.rotation_deg is not None and self.rotation_deg not in ROTATION_ANGLES:
            raise ValueError(f"rotation must be one of {ROTATION_ANGLES}")
        if self.interval is not None and self.interval not in DILATION_INTERVALS:
            raise ValueError(f"interval must be one of {DILATION_INTERVALS}")
        if self.permutation is not None:
            _check_permutation(self.permutation)


def _check_permutation(perm: tuple[int, ...]) -> None:
    n = len(perm)
    if sorted(perm) != list(range(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm}")
    if list(perm) == list(range(n)):
        raise ValueError("identity permutation is not a shuffle")
    if list(perm) == list(range(n - 1, -1, -1)):
        raise ValueError("full reversal is reserved for time inversion")


IDENTITY = TransformDescriptor()


@dataclass(frozen=True)
class ClipPlan:
    """All indices needed to cut one clip, no pixels.

    frame_indices are absolute video frame numbers in presentation
    order (already reflecting any reversal/shuffle/dilation).
    start_offset is the clip's position within its (possibly
    transformed) segment index list.
    """

    segment_id: str
    video_id: str
    shot_id: str
    start_offset: int
    frame_indices: tuple[int, ...]
    crop_y: int
    crop_x: int
    transform: TransformDescriptor = IDENTITY

    def __post_init__(self):
        if len(self.frame_indices) != CLIP_LEN:
            raise ValueError(f"expected {CLIP_LEN} frames, got {len(self.frame_indices)}")
        if not (0 <= self.crop_y <= CANONICAL_HEIGHT - CROP_SIZE):
            raise ValueError(f"crop_y {self.crop_y} out of range")
        if not (0 <= self.crop_x <= CANONICAL_WIDTH - CROP_SIZE):
            raise ValueError(f"crop_x {self.crop_x} out of range")


@dataclass(frozen=True)
class SamplePlan:
    label: RelationCategory
    clip_a: ClipPlan
    clip_b: ClipPlan
    rng_seed: int
    retries: int = 0


@dataclass(frozen=True)
class Clip:
    """A realized clip: 16 RGB frames at 112x112 plus provenance."""

    frames: np.ndarray
    segment_id: str
    start_offset: int
    transform: TransformDescriptor = IDENTITY

    def __post_init__(self):
        if self.frames.shape != (CLIP_LEN, CROP_SIZE, CROP_SIZE, 3):
            raise ValueError(f"bad clip shape {self.frames.shape}")


@dataclass(frozen=True)
class RelationSample:
    clip_a: Clip
    clip_b: Clip
    label: RelationCategory
    rng_seed: int


def segment_frame_indices(segment: Segment) -> list[int]:
    return list(range(segment.start, segment.end))


def sample_anchor(manifest: Manifest, rng: np.random.Generator) -> Segment:
    """Uniform draw over all segments."""
    if len(manifest) == 0:
        raise ValueError("manifest has no segments")
    return manifest.segments[int(rng.integers(len(manifest)))]


def eligible_partners(
    manifest: Manifest, anchor: Segment, category: RelationCategory
) -> list[Segment]:
    if category is RelationCategory.SAME_SHOT:
        return manifest.by_shot(anchor.shot_id)
    if category is RelationCategory.SAME_VIDEO:
        return [
            s for s in manifest.by_video(anchor.video_id) if s.shot_id != anchor.shot_id
        ]
    if category is RelationCategory.CROSS_VIDEO:
        return [s for s in manifest.segments if s.video_id != anchor.video_id]
    raise ValueError(f"{category.name} is not a co-occurrence category")


def sample_partner_cooccurrence(
    anchor: Segment,
    category: RelationCategory,
    manifest: Manifest,
    rng: np.random.Generator,
) -> Segment:
    """Uniform draw over partners satisfying the co-occurrence rule.

    For SAME_SHOT the anchor segment itself is eligible; the clip
    offsets are forced apart later.
    """
    pool = eligible_partners(manifest, anchor, category)
    if not pool:
        raise NotSatisfiable(f"no {category.name} partner for {anchor.segment_id}")
    return pool[int(rng.integers(len(pool)))]


def invert_segment_frames(indices: list[int]) -> list[int]:
    """Time reversal of a frame index list."""
    if not indices:
        raise ValueError("empty frame index list")
    return indices[::-1]


def dilate_segment(indices: list[int], interval: int) -> list[int]:
    """Every interval-th frame; fails if a 16-frame clip no longer fits."""
    if interval not in DILATION_INTERVALS:
        raise ValueError(f"interval must be one of {DILATION_INTERVALS}")
    if len(indices) < interval * CLIP_LEN:
        raise NotSatisfiable(
            f"{len(indices)} frames cannot support {interval}x dilation"
        )
    return indices[::interval]


def shuffle_permutation(rng: np.random.Generator, k: int = CLIP_LEN) -> tuple[int, ...]:
    """Random permutation of 0..k-1 that is neither identity nor reversal."""
    if k < 3:
        raise ValueError(f"need k >= 3 for a usable shuffle, got {k}")
    identity = list(range(k))
    reversal = identity[::-1]
    while True:
        perm = [int(i) for i in rng.permutation(k)]
        if perm != identity and perm != reversal:
            return tuple(perm)


def rotate_frames(frames: np.ndarray, angle: int) -> np.ndarray:
    """Rotate every frame of a (T, H, W, C) stack counterclockwise."""
    if angle not in ROTATION_ANGLES:
        raise ValueError(f"rotation must be one of {ROTATION_ANGLES}")
    if frames.shape[1] != frames.shape[2]:
        raise ValueError(f"frames must be square, got {frames.shape[1:3]}")
    return np.ascontiguousarray(np.rot90(frames, k=angle // 90, axes=(1, 2)))


def rotate_clip(
    clip: Clip, angle: int | None = None, rng: np.random.Generator | None = None
) -> Clip:
    """Rotate a realized clip by 90/180/270, recording the angle."""
    if angle is None:
        if rng is None:
            raise ValueError("either angle or rng is required")
        angle = int(rng.choice(ROTATION_ANGLES))
    return Clip(
        frames=rotate_frames(clip.frames, angle),
        segment_id=clip.segment_id,
        start_offset=clip.start_offset,
        transform=TransformDescriptor(kind="rotate", rotation_deg=angle),
    )


def shuffle_frames(clip: Clip, rng: np.random.Generator) -> Clip:
    """Permute a realized clip's frames, recording the permutation."""
    perm = shuffle_permutation(rng, len(clip.frames))
    return Clip(
        frames=clip.frames[list(perm)],
        segment_id=clip.segment_id,
        start_offset=clip.start_offset,
        transform=TransformDescriptor(kind="shuffle", permutation=perm),
    )


class RelationSampler:
    """Deterministic random-access source of relation-labeled pairs.

    plan(i) depends only on (manifest, relations, seed, worker, i), so
    parallel workers with distinct worker ids produce disjoint,
    reproducible streams. Categories a corpus cannot satisfy (e.g.
    cross-video pairs in a one-video corpus) are resampled a bounded
    number of times and counted in fallback_counts.
    """

    def __init__(
        self,
        manifest: Manifest,
        relations: tuple[RelationCategory, ...] = ALL_RELATIONS,
        seed: int = 0,
        aligned_patterns: bool = False,
        worker: int = 0,
    ):
        if len(manifest) == 0:
            raise ValueError("manifest has no segments")
        if not relations:
            raise ValueError("need at least one relation category")
        if len(set(relations)) != len(relations):
            raise ValueError(f"duplicate categories in {relations}")
        self.manifest = manifest
        self.relations = tuple(sorted(relations))
        self.seed = int(seed)
        self.aligned_patterns = bool(aligned_patterns)
        self.worker = int(worker)
        self.fallback_counts: Counter[RelationCategory] = Counter()

    @property
    def num_classes(self) -> int:
        return len(self.relations)

    def label_index(self, category: RelationCategory) -> int:
        """Class index of a category within the active subset."""
        return self.relations.index(category)

    def worker_sampler(self, worker: int) -> "RelationSampler":
        return RelationSampler(
            self.manifest,
            self.relations,
            seed=self.seed,
            aligned_patterns=self.aligned_patterns,
            worker=worker,
        )

    def plan(self, index: int) -> SamplePlan:
        ss = np.random.SeedSequence([self.seed, self.worker, int(index)])
        rng = np.random.default_rng(ss)
        rng_seed = int(ss.generate_state(1, np.uint64)[0])
        failed: list[RelationCategory] = []
        for attempt in range(MAX_CATEGORY_RETRIES + 1):
            category = self.relations[int(rng.integers(len(self.relations)))]
            try:
                clip_a, clip_b = self._plan_pair(category, rng)
            except NotSatisfiable:
                failed.append(category)
                self.fallback_counts[category] += 1
                continue
            return SamplePlan(
                label=category,
                clip_a=clip_a,
                clip_b=clip_b,
                rng_seed=rng_seed,
                retries=attempt,
            )
        names = sorted({c.name for c in failed})
        raise DegenerateCorpusError(
            f"no satisfiable category after {MAX_CATEGORY_RETRIES + 1} draws; "
            f"failing categories: {', '.join(names)}"
        )

    def plans(self, count: int, start: int = 0) -> list[SamplePlan]:
        return [self.plan(i) for i in range(start, start + count)]

    def realize(self, plan: SamplePlan, store: FrameStore) -> RelationSample:
        return RelationSample(
            clip_a=realize_clip(plan.clip_a, store),
            clip_b=realize_clip(plan.clip_b, store),
            label=plan.label,
            rng_seed=plan.rng_seed,
        )

    def sample(self, index: int, store: FrameStore) -> RelationSample:
        return self.realize(self.plan(index), store)

    # -- planning internals ------------------------------------------------

    def _plan_pair(
        self, category: RelationCategory, rng: np.random.Generator
    ) -> tuple[ClipPlan, ClipPlan]:
        anchor = sample_anchor(self.manifest, rng)
        if category in _COOCCURRENCE:
            partner = sample_partner_cooccurrence(anchor, category, self.manifest, rng)
            clip_a = self._extract(rng, anchor)
            forbid = (
                clip_a.start_offset
                if partner.segment_id == anchor.segment_id
                else None
            )
            clip_b = self._extract(rng, partner, forbid_offset=forbid)
            return clip_a, clip_b

        clip_a = self._extract(rng, anchor)
        if category is RelationCategory.ROTATED:
            angle = int(rng.choice(ROTATION_ANGLES))
            clip_b = self._extract(
                rng, anchor,
                transform=TransformDescriptor(kind="rotate", rotation_deg=angle),
            )
        elif category is RelationCategory.REVERSED:
            reversed_ix = invert_segment_frames(segment_frame_indices(anchor))
            forced = None
            if self.aligned_patterns:
                forced = anchor.length - CLIP_LEN - clip_a.start_offset
            clip_b = self._extract(
                rng, anchor,
                index_list=reversed_ix,
                transform=TransformDescriptor(kind="invert"),
                forced_offset=forced,
            )
        elif category is RelationCategory.SHUFFLED:
            perm = shuffle_permutation(rng)
            forced = clip_a.start_offset if self.aligned_patterns else None
            clip_b = self._extract(
                rng, anchor,
                transform=TransformDescriptor(kind="shuffle", permutation=perm),
                forced_offset=forced,
            )
        elif category is RelationCategory.DILATED:
            eligible = [s for s in DILATION_INTERVALS if anchor.length >= s * CLIP_LEN]
            if not eligible:
                raise NotSatisfiable(
                    f"segment {anchor.segment_id} too short for any dilation"
                )
            interval = int(rng.choice(eligible))
            dilated = dilate_segment(segment_frame_indices(anchor), interval)
            forced = None
            if self.aligned_patterns:
                forced = min(
                    round(clip_a.start_offset / interval), len(dilated) - CLIP_LEN
                )
            clip_b = self._extract(
                rng, anchor,
                index_list=dilated,
                transform=TransformDescriptor(kind="dilate", interval=interval),
                forced_offset=forced,
            )
        else:
            raise ValueError(f"unhandled category {category}")
        return clip_a, clip_b

    def _extract(
        self,
        rng: np.random.Generator,
        segment: Segment,
        index_list: list[int] | None = None,
        transform: TransformDescriptor = IDENTITY,
        forced_offset: int | None = None,
        forbid_offset: int | None = None,
    ) -> ClipPlan:
        """Plan one clip: random start offset and one shared crop window."""
        indices = index_list if index_list is not None else segment_frame_indices(segment)
        n = len(indices)
        if n < CLIP_LEN:
            raise NotSatisfiable(
                f"segment {segment.segment_id} has only {n} usable frames"
            )
        if forced_offset is not None:
            offset = int(forced_offset)
            if not 0 <= offset <= n - CLIP_LEN:
                raise NotSatisfiable(f"aligned offset {offset} out of range")
        else:
            offset = int(rng.integers(0, n - CLIP_LEN + 1))
            redraws = 0
            while forbid_offset is not None and offset == forbid_offset:
                if n == CLIP_LEN or redraws >= _MAX_OFFSET_REDRAWS:
                    raise NotSatisfiable(
                        f"cannot pick a distinct offset in {segment.segment_id}"
                    )
                offset = int(rng.integers(0, n - CLIP_LEN + 1))
                redraws += 1
        window = list(indices[offset : offset + CLIP_LEN])
        if transform.kind == "shuffle":
            window = [window[p] for p in transform.permutation]
        crop_y = int(rng.integers(0, CANONICAL_HEIGHT - CROP_SIZE + 1))
        crop_x = int(rng.integers(0, CANONICAL_WIDTH - CROP_SIZE + 1))
        return ClipPlan(
            segment_id=segment.segment_id,
            video_id=segment.video_id,
            shot_id=segment.shot_id,
            start_offset=offset,
            frame_indices=tuple(window),
            crop_y=crop_y,
            crop_x=crop_x,
            transform=transform,
        )


def realize_clip(plan: ClipPlan, store: FrameStore) -> Clip:
    """Decode a planned clip to pixels: gather, crop, then rotate."""
    frames = store.gather(plan.video_id, list(plan.frame_indices))
    frames = frames[
        :,
        plan.crop_y : plan.crop_y + CROP_SIZE,
        plan.crop_x : plan.crop_x + CROP_SIZE,
        :,
    ]
    if plan.transform.kind == "rotate":
        frames = rotate_frames(frames, plan.transform.rotation_deg)
    return Clip(
        frames=np.ascontiguousarray(frames),
        segment_id=plan.segment_id,
        start_offset=plan.start_offset,
        transform=plan.transform,
    )


def _check_clip_plan(plan: ClipPlan, manifest: Manifest) -> Segment:
    """Structural validity of one clip plan against the manifest."""
    seg = manifest.segment(plan.segment_id)
    if plan.video_id != seg.video_id or plan.shot_id != seg.shot_id:
        raise LabelError(f"provenance mismatch for {plan.segment_id}")
    lo, hi = min(plan.frame_indices), max(plan.frame_indices)
    if lo < seg.start or hi >= seg.end:
        raise LabelError(
            f"clip frames [{lo}, {hi}] leave segment "
            f"[{seg.start}, {seg.end}) of {plan.segment_id}"
        )
    steps = np.diff(plan.frame_indices)
    kind = plan.transform.kind
    if kind in ("none", "rotate"):
        if not np.all(steps == 1):
            raise LabelError(f"{kind} clip is not contiguous ascending")
    elif kind == "invert":
        if not np.all(steps == -1):
            raise LabelError("inverted clip is not contiguous descending")
    elif kind == "shuffle":
        window = sorted(plan.frame_indices)
        if not np.all(np.diff(window) == 1):
            raise LabelError("shuffled clip frames are not one contiguous window")
        expected = tuple(window[p] for p in plan.transform.permutation)
        if expected != plan.frame_indices:
            raise LabelError("frame order disagrees with recorded permutation")
    elif kind == "dilate":
        if not np.all(steps == plan.transform.interval):
            raise LabelError(
                f"dilated clip gaps {set(int(s) for s in steps)} != "
                f"{plan.transform.interval}"
            )
    return seg


def verify_plan_label(plan: SamplePlan, manifest: Manifest) -> RelationCategory:
    """Re-derive a sample's label from provenance and transforms only.

    Independent of the sampler's construction path; raises LabelError if
    the plan is structurally inconsistent or the stored label is wrong.
    """
    seg_a = _check_clip_plan(plan.clip_a, manifest)
    seg_b = _check_clip_plan(plan.clip_b, manifest)
    if plan.clip_a.transform.kind != "none":
        raise LabelError("first clip of a pair must be untransformed")

    kind = plan.clip_b.transform.kind
    if kind == "none":
        if seg_b.shot_id == seg_a.shot_id:
            derived = RelationCategory.SAME_SHOT
            if (
                seg_b.segment_id == seg_a.segment_id
                and plan.clip_b.start_offset == plan.clip_a.start_offset
            ):
                raise LabelError("same-shot pair reuses the identical clip window")
        elif seg_b.video_id == seg_a.video_id:
            derived = RelationCategory.SAME_VIDEO
        else:
            derived = RelationCategory.CROSS_VIDEO
    else:
        if seg_b.segment_id != seg_a.segment_id:
            raise LabelError(f"{kind} partner must come from the anchor segment")
        derived = {
            "rotate": RelationCategory.ROTATED,
            "invert": RelationCategory.REVERSED,
            "shuffle": RelationCategory.SHUFFLED,
            "dilate": RelationCategory.DILATED,
        }[kind]

    if derived is not plan.label:
        raise LabelError(f"stored label {plan.label.name}, derived {derived.name}")
    return derived


# -- plan persistence ------------------------------------------------------


def _transform_to_dict(t: TransformDescriptor) -> dict:
    d: dict = {"kind": t.kind}
    if t.rotation_deg is not None:
        d["rotation_deg"] = t.rotation_deg
    if t.permutation is not None:
        d["permutation"] = list(t.permutation)
    if t.interval is not None:
        d["interval"] = t.interval
    return d


def _transform_from_dict(d: dict) -> TransformDescriptor:
    return TransformDescriptor(
        kind=d["kind"],
        rotation_deg=d.get("rotation_deg"),
        permutation=tuple(d["permutation"]) if "permutation" in d else None,
        interval=d.get("interval"),
    )


def _clip_to_dict(c: ClipPlan) -> dict:
    return {
        "segment_id": c.segment_id,
        "video_id": c.video_id,
        "shot_id": c.shot_id,
        "start_offset": c.start_offset,
        "frame_indices": list(c.frame_indices),
        "crop_y": c.crop_y,
        "crop_x": c.crop_x,
        "transform": _transform_to_dict(c.transform),
    }


def _clip_from_dict(d: dict) -> ClipPlan:
    return ClipPlan(
        segment_id=d["segment_id"],
        video_id=d["video_id"],
        shot_id=d["shot_id"],
        start_offset=d["start_offset"],
        frame_indices=tuple(d["frame_indices"]),
        crop_y=d["crop_y"],
        crop_x=d["crop_x"],
        transform=_transform_from_dict(d["transform"]),
    )


def save_plans(
    plans: list[SamplePlan],
    path: str | Path,
    relations: tuple[RelationCategory, ...] = ALL_RELATIONS,
    fingerprint: str = "",
) -> None:
    """Line-delimited JSON sample index: meta header then one plan per line."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {
                    "kind": "samples",
                    "fingerprint": fingerprint,
                    "count": len(plans),
                    "relations": [c.name.lower() for c in sorted(relations)],
                },
                sort_keys=True,
            )
            + "\n"
        )
        for p in plans:
            fh.write(
                json.dumps(
                    {
                        "label": p.label.name.lower(),
                        "clip_a": _clip_to_dict(p.clip_a),
                        "clip_b": _clip_to_dict(p.clip_b),
                        "rng_seed": p.rng_seed,
                        "retries": p.retries,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_plans(path: str | Path) -> tuple[list[SamplePlan], dict]:
    path = Path(path)
    plans: list[SamplePlan] = []
    meta: dict = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "samples":
                meta = rec
                continue
            plans.append(
                SamplePlan(
                    label=RelationCategory[rec["label"].upper()],
                    clip_a=_clip_from_dict(rec["clip_a"]),
                    clip_b=_clip_from_dict(rec["clip_b"]),
                    rng_seed=rec["rng_seed"],
                    retries=rec.get("retries", 0),
                )
            )
    return plans, meta
