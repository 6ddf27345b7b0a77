"""Shot editing: cut detection from HOG differences, fixed-length
segmentation with provenance ids, and the persisted segment manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vidrel.ingest import (
    CANONICAL_HEIGHT,
    CANONICAL_WIDTH,
    RawVideo,
    decode_frames,
    resize_frame,
)

DEFAULT_SEGMENT_LEN = 300
MIN_SEGMENT_LEN = 48

# Adaptive mode declares a video single-shot unless its largest
# adjacent-frame difference clearly dominates the typical one. Without
# this guard mean+3*std collapses onto near-constant difference series
# and fires spurious cuts.
_SINGLE_SHOT_RATIO = 5.0


@dataclass(frozen=True)
class HogParams:
    """Descriptor settings, pinned so tests can rely on exact lengths.

    Grayscale input, square cells, 2x2-cell blocks slid one cell at a
    time, epsilon-L2 block normalization followed by clipping.
    """

    cell_size: int = 16
    orientation_bins: int = 9
    block_size: int = 2
    clip: float = 0.2

    def grid_shape(self, height: int = CANONICAL_HEIGHT, width: int = CANONICAL_WIDTH):
        return height // self.cell_size, width // self.cell_size

    def descriptor_length(
        self, height: int = CANONICAL_HEIGHT, width: int = CANONICAL_WIDTH
    ) -> int:
        cy, cx = self.grid_shape(height, width)
        by = cy - self.block_size + 1
        bx = cx - self.block_size + 1
        return by * bx * self.block_size**2 * self.orientation_bins


@dataclass(frozen=True)
class Shot:
    video_id: str
    begin: int  # inclusive
    end: int  # exclusive
    shot_id: str

    def __post_init__(self):
        if not 0 <= self.begin < self.end:
            raise ValueError(f"bad shot bounds [{self.begin}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.begin


@dataclass(frozen=True)
class Segment:
    segment_id: str
    video_id: str
    shot_id: str
    start: int  # inclusive
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """RGB uint8 -> float64 luma."""
    f = frame.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def hog_descriptor(frame: np.ndarray, params: HogParams = HogParams()) -> np.ndarray:
    """Histogram-of-oriented-gradients descriptor of one grayscale frame.

    The frame must already be at the canonical 128x171 size. Orientations
    are unsigned (0..180 degrees); each pixel's magnitude is split
    linearly between the two nearest bin centers (wrapping), so slowly
    rotating content moves histogram mass continuously. Pixels beyond
    the last full cell are ignored.
    """
    if frame.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale frame, got shape {frame.shape}")
    if frame.shape != (CANONICAL_HEIGHT, CANONICAL_WIDTH):
        raise ValueError(
            f"expected canonical {CANONICAL_HEIGHT}x{CANONICAL_WIDTH} frame, "
            f"got {frame.shape[0]}x{frame.shape[1]}"
        )
    f = frame.astype(np.float64)
    gy, gx = np.gradient(f)
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx) % np.pi  # unsigned, [0, pi)

    cell = params.cell_size
    bins = params.orientation_bins
    n_cy, n_cx = params.grid_shape(*frame.shape)
    h, w = n_cy * cell, n_cx * cell
    magnitude = magnitude[:h, :w]
    orientation = orientation[:h, :w]

    bin_width = np.pi / bins
    coord = orientation / bin_width - 0.5
    low = np.floor(coord)
    frac = coord - low
    lo_idx = (low.astype(np.intp)) % bins
    hi_idx = (lo_idx + 1) % bins
    ys, xs = np.mgrid[0:h, 0:w]
    cell_base = ((ys // cell) * n_cx + (xs // cell)) * bins
    hist = np.bincount(
        (cell_base + lo_idx).ravel(),
        weights=(magnitude * (1.0 - frac)).ravel(),
        minlength=n_cy * n_cx * bins,
    )
    hist += np.bincount(
        (cell_base + hi_idx).ravel(),
        weights=(magnitude * frac).ravel(),
        minlength=n_cy * n_cx * bins,
    )
    hist = hist.reshape(n_cy, n_cx, bins)

    bs = params.block_size
    blocks = []
    for by in range(n_cy - bs + 1):
        for bx in range(n_cx - bs + 1):
            v = hist[by : by + bs, bx : bx + bs].ravel()
            v = v / np.sqrt(np.sum(v**2) + 1e-12)
            blocks.append(np.minimum(v, params.clip))
    return np.concatenate(blocks)


def frame_difference(d_t: np.ndarray, d_t1: np.ndarray) -> float:
    """Mean absolute elementwise difference of two descriptors."""
    if d_t.shape != d_t1.shape:
        raise ValueError(f"descriptor length mismatch: {d_t.shape} vs {d_t1.shape}")
    return float(np.mean(np.abs(d_t - d_t1)))


def adjacent_differences(
    video: RawVideo, params: HogParams = HogParams(), chunk: int = 256
) -> np.ndarray:
    """HOG difference between every adjacent frame pair, length T-1.

    Frames are decoded in bounded chunks; whole videos never sit in
    memory at once.
    """
    if video.frame_count == 0:
        raise ValueError(f"video {video.video_id} has no frames")
    diffs = np.empty(max(video.frame_count - 1, 0), dtype=np.float64)
    prev_desc: np.ndarray | None = None
    pos = 0
    for start in range(0, video.frame_count, chunk):
        end = min(start + chunk, video.frame_count)
        seq = decode_frames(video, start, end)
        for frame in seq.frames:
            desc = hog_descriptor(to_grayscale(resize_frame(frame)), params)
            if prev_desc is not None:
                diffs[pos] = frame_difference(prev_desc, desc)
                pos += 1
            prev_desc = desc
    return diffs


def adaptive_threshold(diffs: np.ndarray) -> float:
    """Per-video threshold: mean + 3*std, guarded for cut-free series."""
    if len(diffs) == 0:
        return np.inf
    peak = float(np.max(diffs))
    typical = float(np.median(diffs))
    if peak <= _SINGLE_SHOT_RATIO * typical or peak == 0.0:
        return np.inf
    return float(np.mean(diffs) + 3.0 * np.std(diffs))


def detect_shot_changes(
    video: RawVideo,
    threshold: float | str = "adaptive",
    params: HogParams = HogParams(),
) -> list[Shot]:
    """Partition a video into shots at HOG-difference peaks.

    `threshold` is a positive number, or "adaptive" for the per-video
    mean + 3*std rule. A difference strictly above the threshold marks a
    cut between the two frames it straddles.
    """
    diffs = adjacent_differences(video, params)
    if isinstance(threshold, str):
        if threshold != "adaptive":
            raise ValueError(f"unknown threshold mode {threshold!r}")
        thr = adaptive_threshold(diffs)
    else:
        thr = float(threshold)
        if thr <= 0:
            raise ValueError(f"threshold must be positive, got {thr}")
    cuts = [int(t) + 1 for t in np.nonzero(diffs > thr)[0]]
    bounds = [0] + cuts + [video.frame_count]
    return [
        Shot(
            video_id=video.video_id,
            begin=b,
            end=e,
            shot_id=f"{video.video_id}_s{j:03d}",
        )
        for j, (b, e) in enumerate(zip(bounds[:-1], bounds[1:]))
    ]


def segment_shots(
    shots: list[Shot],
    k: int = DEFAULT_SEGMENT_LEN,
    min_len: int = MIN_SEGMENT_LEN,
) -> list[Segment]:
    """Cut shots into fixed-length segments.

    Full k-frame windows are enumerated from each shot start; the final
    partial window is kept iff it is at least `min_len` frames. Shots
    shorter than `min_len` therefore yield nothing.
    """
    if not (k > min_len > 0):
        raise ValueError(f"need k > min_len > 0, got k={k} min_len={min_len}")
    segments: list[Segment] = []
    for shot in shots:
        idx = 0
        cursor = shot.begin
        while cursor + k <= shot.end:
            segments.append(_segment(shot, idx, cursor, cursor + k))
            cursor += k
            idx += 1
        if shot.end - cursor >= min_len:
            segments.append(_segment(shot, idx, cursor, shot.end))
    return segments


def _segment(shot: Shot, idx: int, start: int, end: int) -> Segment:
    return Segment(
        segment_id=f"{shot.shot_id}_g{idx:03d}",
        video_id=shot.video_id,
        shot_id=shot.shot_id,
        start=start,
        end=end,
    )


@dataclass
class Manifest:
    """All segments of a corpus plus provenance indexes."""

    segments: list[Segment]
    sources: dict[str, str]  # video_id -> source_path
    fingerprint: str = ""
    _by_shot: dict[str, list[Segment]] = field(default_factory=dict, repr=False, compare=False)
    _by_video: dict[str, list[Segment]] = field(default_factory=dict, repr=False, compare=False)
    _by_id: dict[str, Segment] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for seg in self.segments:
            if seg.segment_id in self._by_id:
                raise ValueError(f"duplicate segment_id {seg.segment_id}")
            self._by_id[seg.segment_id] = seg
            self._by_shot.setdefault(seg.shot_id, []).append(seg)
            self._by_video.setdefault(seg.video_id, []).append(seg)

    def __len__(self) -> int:
        return len(self.segments)

    def segment(self, segment_id: str) -> Segment:
        try:
            return self._by_id[segment_id]
        except KeyError:
            raise KeyError(f"unknown segment_id {segment_id}")

    def by_shot(self, shot_id: str) -> list[Segment]:
        return self._by_shot.get(shot_id, [])

    def by_video(self, video_id: str) -> list[Segment]:
        return self._by_video.get(video_id, [])

    @property
    def video_ids(self) -> list[str]:
        return list(self._by_video.keys())

    @property
    def shot_ids(self) -> list[str]:
        return list(self._by_shot.keys())


def build_manifest(
    corpus: list[RawVideo],
    k: int = DEFAULT_SEGMENT_LEN,
    min_len: int = MIN_SEGMENT_LEN,
    threshold: float | str = "adaptive",
    params: HogParams = HogParams(),
    fingerprint: str = "",
    out_path: str | Path | None = None,
) -> Manifest:
    """Detect shots and segment every corpus video into one manifest.

    Videos are processed in video_id order so the result is
    byte-deterministic for a given corpus and parameter set.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    segments: list[Segment] = []
    sources: dict[str, str] = {}
    for video in sorted(corpus, key=lambda v: v.video_id):
        try:
            shots = detect_shot_changes(video, threshold, params)
        except OSError as exc:
            raise OSError(f"shot detection failed for {video.source_path}: {exc}")
        segments.extend(segment_shots(shots, k, min_len))
        sources[video.video_id] = video.source_path
    manifest = Manifest(segments=segments, sources=sources, fingerprint=fingerprint)
    if out_path is not None:
        save_manifest(manifest, out_path)
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Line-delimited JSON: one meta header line, then one line per segment."""
    path = Path(path)
    try:
        with open(path, "w") as fh:
            fh.write(
                json.dumps(
                    {
                        "kind": "manifest",
                        "fingerprint": manifest.fingerprint,
                        "segment_count": len(manifest.segments),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            for seg in manifest.segments:
                fh.write(
                    json.dumps(
                        {
                            "segment_id": seg.segment_id,
                            "video_id": seg.video_id,
                            "shot_id": seg.shot_id,
                            "start_frame": seg.start,
                            "end_frame": seg.end,
                            "source_path": manifest.sources[seg.video_id],
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    segments: list[Segment] = []
    sources: dict[str, str] = {}
    fingerprint = ""
    try:
        with open(path) as fh:
            lines = [line for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}")
    for line in lines:
        rec = json.loads(line)
        if rec.get("kind") == "manifest":
            fingerprint = rec.get("fingerprint", "")
            continue
        segments.append(
            Segment(
                segment_id=rec["segment_id"],
                video_id=rec["video_id"],
                shot_id=rec["shot_id"],
                start=rec["start_frame"],
                end=rec["end_frame"],
            )
        )
        sources[rec["video_id"]] = rec["source_path"]
    return Manifest(segments=segments, sources=sources, fingerprint=fingerprint)
