"""Video decoding, the canonical resize, and frame caching.

Two on-disk source kinds are supported: common container videos (read
through OpenCV) and the lossless archive format used for synthetic
corpora (a directory of numbered PNG frames plus a ``meta.json``
record). All decoded frames are RGB uint8; OpenCV's BGR order never
leaks past this module.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

# Frames are resized to this size before any cropping or transform.
CANONICAL_HEIGHT = 128
CANONICAL_WIDTH = 171

ARCHIVE_META = "meta.json"
_FRAME_TMPL = "frame_{:06d}.png"


class VideoDecodeError(OSError):
    """Raised when a source file cannot be opened or decoded."""


@dataclass(frozen=True)
class RawVideo:
    """An on-disk video plus the metadata needed to decode it by range."""

    video_id: str
    source_path: str
    frame_count: int
    fps: float
    native_height: int
    native_width: int

    def __post_init__(self):
        if self.frame_count < 0:
            raise ValueError(f"frame_count must be >= 0, got {self.frame_count}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


@dataclass
class FrameSequence:
    """An ordered block of same-sized RGB frames."""

    frames: np.ndarray  # (N, H, W, 3) uint8
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.frames)


def resize_frame(frame: np.ndarray) -> np.ndarray:
    """Bilinear resize of one RGB frame to the canonical 128x171."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 frame, got shape {frame.shape}")
    if frame.shape[0] == 0 or frame.shape[1] == 0:
        raise ValueError("cannot resize an empty frame")
    if frame.shape[:2] == (CANONICAL_HEIGHT, CANONICAL_WIDTH):
        return frame
    return cv2.resize(
        frame, (CANONICAL_WIDTH, CANONICAL_HEIGHT), interpolation=cv2.INTER_LINEAR
    )


def _is_archive(path: Path) -> bool:
    return path.is_dir() and (path / ARCHIVE_META).is_file()


def probe_video(path: str | Path, video_id: str | None = None) -> RawVideo:
    """Build a RawVideo record for a container file or a frame archive."""
    path = Path(path)
    if _is_archive(path):
        meta = json.loads((path / ARCHIVE_META).read_text())
        return RawVideo(
            video_id=video_id or meta["video_id"],
            source_path=str(path),
            frame_count=int(meta["frame_count"]),
            fps=float(meta["fps"]),
            native_height=int(meta["height"]),
            native_width=int(meta["width"]),
        )
    if not path.exists():
        raise VideoDecodeError(f"no such video source: {path}")
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise VideoDecodeError(f"cannot open video container: {path}")
    try:
        count = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        fps = cap.get(cv2.CAP_PROP_FPS) or 25.0
        height = int(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
        width = int(cap.get(cv2.CAP_PROP_FRAME_WIDTH))
    finally:
        cap.release()
    return RawVideo(
        video_id=video_id or path.stem,
        source_path=str(path),
        frame_count=count,
        fps=float(fps),
        native_height=height,
        native_width=width,
    )


def decode_frames(video: RawVideo, start: int, end: int) -> FrameSequence:
    """Decode frames [start, end) of `video` in temporal order.

    Decoding is range-based so callers never have to hold a whole
    untrimmed video in memory.
    """
    if not (0 <= start < end <= video.frame_count):
        raise ValueError(
            f"range [{start}, {end}) out of bounds for {video.video_id} "
            f"with {video.frame_count} frames"
        )
    path = Path(video.source_path)
    if _is_archive(path):
        frames = _decode_archive(path, start, end)
    else:
        frames = _decode_container(path, start, end)
    if len(frames) != end - start:
        raise VideoDecodeError(
            f"decoded {len(frames)}/{end - start} frames from {path}"
        )
    block = np.stack(frames)
    return FrameSequence(frames=block, height=block.shape[1], width=block.shape[2])


def _decode_archive(path: Path, start: int, end: int) -> list[np.ndarray]:
    frames = []
    for t in range(start, end):
        fp = path / _FRAME_TMPL.format(t)
        img = cv2.imread(str(fp), cv2.IMREAD_COLOR)
        if img is None:
            raise VideoDecodeError(f"missing or unreadable archive frame: {fp}")
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    return frames


def _decode_container(path: Path, start: int, end: int) -> list[np.ndarray]:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise VideoDecodeError(f"cannot open video container: {path}")
    try:
        if start > 0:
            cap.set(cv2.CAP_PROP_POS_FRAMES, start)
        frames = []
        for _ in range(end - start):
            ok, img = cap.read()
            if not ok:
                raise VideoDecodeError(f"decode failed mid-range in {path}")
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    finally:
        cap.release()
    return frames


def write_archive(
    out_dir: str | Path,
    video_id: str,
    frames: np.ndarray,
    fps: float = 25.0,
) -> RawVideo:
    """Write frames as a lossless archive (numbered PNGs + meta.json)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VideoDecodeError(f"cannot create archive directory {out_dir}: {exc}")
    n, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    for t in range(n):
        fp = out_dir / _FRAME_TMPL.format(t)
        bgr = cv2.cvtColor(frames[t], cv2.COLOR_RGB2BGR)
        if not cv2.imwrite(str(fp), bgr):
            raise VideoDecodeError(f"cannot write archive frame: {fp}")
    meta = {
        "video_id": video_id,
        "frame_count": n,
        "fps": fps,
        "height": h,
        "width": w,
    }
    (out_dir / ARCHIVE_META).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return RawVideo(
        video_id=video_id,
        source_path=str(out_dir),
        frame_count=n,
        fps=fps,
        native_height=h,
        native_width=w,
    )


def scan_corpus(root: str | Path) -> list[RawVideo]:
    """Find every decodable video under `root`, sorted by video_id.

    Archives are recognized by their meta.json; anything else with a
    common container suffix is probed through OpenCV.
    """
    root = Path(root)
    if not root.is_dir():
        raise VideoDecodeError(f"corpus root is not a directory: {root}")
    videos = []
    suffixes = {".mp4", ".avi", ".mkv", ".mov", ".webm"}
    for path in sorted(root.iterdir()):
        if _is_archive(path):
            videos.append(probe_video(path))
        elif path.is_file() and path.suffix.lower() in suffixes:
            videos.append(probe_video(path))
    seen: set[str] = set()
    for v in videos:
        if v.video_id in seen:
            raise ValueError(f"duplicate video_id in corpus: {v.video_id}")
        seen.add(v.video_id)
    return videos


class FrameStore:
    """LRU cache of canonically resized frames, keyed by video_id.

    Whole videos are cached at 128x171 (a few MB per 300-frame video),
    which makes repeated clip extraction during training cheap without
    re-decoding PNGs every epoch.
    """

    def __init__(self, videos: list[RawVideo] | None = None, max_videos: int = 32):
        self.max_videos = max_videos
        self._videos: dict[str, RawVideo] = {}
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        for v in videos or []:
            self.add(v)

    def add(self, video: RawVideo) -> None:
        self._videos[video.video_id] = video

    def video(self, video_id: str) -> RawVideo:
        return self._videos[video_id]

    def canonical_frames(self, video_id: str, start: int, end: int) -> np.ndarray:
        """Frames [start, end) of a video at canonical size, (N,128,171,3)."""
        block = self._canonical_video(video_id)
        if not (0 <= start < end <= len(block)):
            raise ValueError(
                f"range [{start}, {end}) out of bounds for {video_id}"
            )
        return block[start:end]

    def gather(self, video_id: str, indices: np.ndarray) -> np.ndarray:
        """Canonical frames at explicit (possibly reordered) indices."""
        block = self._canonical_video(video_id)
        return block[np.asarray(indices)]

    def _canonical_video(self, video_id: str) -> np.ndarray:
        if video_id in self._cache:
            self._cache.move_to_end(video_id)
            return self._cache[video_id]
        video = self._videos[video_id]
        seq = decode_frames(video, 0, video.frame_count)
        block = np.stack([resize_frame(f) for f in seq.frames])
        self._cache[video_id] = block
        while len(self._cache) > self.max_videos:
            self._cache.popitem(last=False)
        return block
