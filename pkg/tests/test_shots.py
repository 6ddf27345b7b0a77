"""Shot detection, segmentation, and the manifest."""

import numpy as np
import pytest

from vidrel.ingest import CANONICAL_HEIGHT, CANONICAL_WIDTH, write_archive
from vidrel.shots import (
    HogParams,
    Manifest,
    Segment,
    Shot,
    adaptive_threshold,
    adjacent_differences,
    build_manifest,
    detect_shot_changes,
    frame_difference,
    hog_descriptor,
    load_manifest,
    save_manifest,
    segment_shots,
    to_grayscale,
)


def _naive_hog(frame: np.ndarray, params: HogParams) -> np.ndarray:
    """Straight-line reference: per-pixel loops, no vectorization tricks."""
    f = frame.astype(np.float64)
    gy, gx = np.gradient(f)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % np.pi

    cell, bins, bs = params.cell_size, params.orientation_bins, params.block_size
    n_cy, n_cx = params.grid_shape(*frame.shape)
    hist = np.zeros((n_cy, n_cx, bins))
    bin_width = np.pi / bins
    for y in range(n_cy * cell):
        for x in range(n_cx * cell):
            coord = ang[y, x] / bin_width - 0.5
            low = int(np.floor(coord))
            frac = coord - low
            hist[y // cell, x // cell, low % bins] += mag[y, x] * (1 - frac)
            hist[y // cell, x // cell, (low + 1) % bins] += mag[y, x] * frac

    blocks = []
    for by in range(n_cy - bs + 1):
        for bx in range(n_cx - bs + 1):
            v = hist[by : by + bs, bx : bx + bs].ravel()
            v = v / np.sqrt((v**2).sum() + 1e-12)
            blocks.append(np.minimum(v, params.clip))
    return np.concatenate(blocks)


def _ramp_frame(angle_rad: float) -> np.ndarray:
    """Grayscale plane whose gradient points at `angle_rad` everywhere."""
    ys, xs = np.mgrid[0:CANONICAL_HEIGHT, 0:CANONICAL_WIDTH].astype(np.float64)
    return np.cos(angle_rad) * xs + np.sin(angle_rad) * ys


class TestHogDescriptor:
    def test_descriptor_length_formula(self):
        params = HogParams()
        desc = hog_descriptor(np.zeros((CANONICAL_HEIGHT, CANONICAL_WIDTH)))
        # 8x10 cell grid -> 7x9 blocks of 2x2 cells x 9 bins
        assert params.grid_shape() == (8, 10)
        assert len(desc) == 7 * 9 * 4 * 9 == params.descriptor_length()

    def test_matches_naive_reference(self, rng):
        params = HogParams()
        frame = rng.uniform(0, 255, size=(CANONICAL_HEIGHT, CANONICAL_WIDTH))
        np.testing.assert_allclose(
            hog_descriptor(frame, params), _naive_hog(frame, params), atol=1e-12
        )

    def test_bin_center_angle_occupies_single_bin(self):
        # Gradient direction exactly at a bin center: every block entry is
        # either 0 or the clipped 0.5 that a one-hot 2x2 block normalizes to.
        bins = 9
        for k in (0, 3, 8):
            angle = (k + 0.5) * np.pi / bins
            desc = hog_descriptor(_ramp_frame(angle))
            blocks = desc.reshape(-1, 4, bins)
            np.testing.assert_allclose(blocks[..., k], 0.2, atol=1e-12)
            others = np.delete(blocks, k, axis=2)
            np.testing.assert_allclose(others, 0.0, atol=1e-12)

    def test_boundary_angle_splits_between_bins(self):
        # Halfway between centers 2 and 3 the vote splits evenly; with the
        # clip disabled each occupied entry is 1/sqrt(8).
        params = HogParams(clip=1.0)
        desc = hog_descriptor(_ramp_frame(3 * np.pi / 9), params)
        blocks = desc.reshape(-1, 4, 9)
        np.testing.assert_allclose(blocks[..., 2], 1 / np.sqrt(8), atol=1e-12)
        np.testing.assert_allclose(blocks[..., 3], 1 / np.sqrt(8), atol=1e-12)
        others = np.delete(blocks, [2, 3], axis=2)
        np.testing.assert_allclose(others, 0.0, atol=1e-12)

    def test_wrapped_split_across_last_and_first_bin(self):
        # 175 degrees sits a quarter bin above the last center (170), so the
        # mass splits 3:1 between bin 8 and bin 0, wrapping circularly.
        params = HogParams(clip=1.0)
        desc = hog_descriptor(_ramp_frame(np.deg2rad(175.0)), params)
        blocks = desc.reshape(-1, 4, 9)
        norm = np.sqrt(4 * (0.75**2 + 0.25**2))
        np.testing.assert_allclose(blocks[..., 8], 0.75 / norm, atol=1e-12)
        np.testing.assert_allclose(blocks[..., 0], 0.25 / norm, atol=1e-12)

    def test_rejects_wrong_shapes(self):
        with pytest.raises(ValueError):
            hog_descriptor(np.zeros((64, 64)))
        with pytest.raises(ValueError):
            hog_descriptor(np.zeros((CANONICAL_HEIGHT, CANONICAL_WIDTH, 3)))

    def test_grayscale_weights(self):
        frame = np.zeros((2, 2, 3), dtype=np.uint8)
        frame[..., 0] = 100
        np.testing.assert_allclose(to_grayscale(frame), 29.9)


class TestFrameDifference:
    def test_mean_absolute(self):
        a = np.array([0.0, 1.0, 2.0])
        b = np.array([1.0, 1.0, 0.0])
        assert frame_difference(a, b) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frame_difference(np.zeros(3), np.zeros(4))


class TestAdaptiveThreshold:
    def test_flat_series_yields_no_cuts(self):
        assert adaptive_threshold(np.full(100, 0.01)) == np.inf
        assert adaptive_threshold(np.zeros(100)) == np.inf
        assert adaptive_threshold(np.array([])) == np.inf

    def test_spiky_series_gets_mean_plus_three_std(self):
        diffs = np.concatenate([np.full(99, 0.01), [1.0]])
        expected = diffs.mean() + 3 * diffs.std()
        assert adaptive_threshold(diffs) == pytest.approx(expected)


class TestDetectShotChanges:
    @pytest.fixture()
    def two_scene_video(self, tmp_path):
        ys, xs = np.mgrid[0:90, 0:120].astype(np.float64)
        scene_a = np.clip(xs, 0, 255).astype(np.uint8)
        scene_b = np.clip(ys * 2, 0, 255).astype(np.uint8)
        frames = np.stack([scene_a] * 20 + [scene_b] * 15)
        return write_archive(tmp_path / "vid", "vid", np.repeat(frames[..., None], 3, axis=3))

    def test_single_cut_found(self, two_scene_video):
        shots = detect_shot_changes(two_scene_video)
        assert [(s.begin, s.end) for s in shots] == [(0, 20), (20, 35)]
        assert [s.shot_id for s in shots] == ["vid_s000", "vid_s001"]

    def test_static_video_is_one_shot(self, tmp_path, rng):
        frame = rng.integers(0, 256, size=(90, 120, 3), dtype=np.uint8)
        video = write_archive(tmp_path / "flat", "flat", np.stack([frame] * 12))
        shots = detect_shot_changes(video)
        assert [(s.begin, s.end) for s in shots] == [(0, 12)]

    def test_explicit_threshold_validation(self, two_scene_video):
        with pytest.raises(ValueError):
            detect_shot_changes(two_scene_video, threshold=-1.0)
        with pytest.raises(ValueError):
            detect_shot_changes(two_scene_video, threshold="bogus")

    def test_adjacent_differences_length(self, two_scene_video):
        diffs = adjacent_differences(two_scene_video)
        assert diffs.shape == (34,)
        assert diffs.argmax() == 19


class TestSegmentShots:
    @staticmethod
    def _oracle(begin, end, k, min_len):
        spans = []
        i = 0
        while begin + (i + 1) * k <= end:
            spans.append((begin + i * k, begin + (i + 1) * k))
            i += 1
        tail_start = begin + i * k
        if end - tail_start >= min_len:
            spans.append((tail_start, end))
        return spans

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(200):
            begin = int(rng.integers(0, 500))
            length = int(rng.integers(1, 900))
            k = int(rng.integers(49, 320))
            shot = Shot("v", begin, begin + length, "v_s000")
            segments = segment_shots([shot], k=k, min_len=48)
            got = [(s.start, s.end) for s in segments]
            assert got == self._oracle(begin, begin + length, k, 48)

    def test_ids_enumerate_within_shot(self):
        shot = Shot("v", 10, 10 + 700, "v_s002")
        segments = segment_shots([shot], k=300, min_len=48)
        assert [s.segment_id for s in segments] == [
            "v_s002_g000",
            "v_s002_g001",
            "v_s002_g002",
        ]
        assert [(s.start, s.end) for s in segments] == [
            (10, 310),
            (310, 610),
            (610, 710),
        ]

    def test_short_tail_dropped(self):
        shot = Shot("v", 0, 340, "v_s000")
        segments = segment_shots([shot], k=300, min_len=48)
        assert [(s.start, s.end) for s in segments] == [(0, 300)]

    def test_short_shot_kept_iff_min_len(self):
        assert segment_shots([Shot("v", 0, 48, "v_s000")], k=300, min_len=48)
        assert not segment_shots([Shot("v", 0, 47, "v_s000")], k=300, min_len=48)

    def test_parameter_validation(self):
        shot = Shot("v", 0, 100, "v_s000")
        with pytest.raises(ValueError):
            segment_shots([shot], k=48, min_len=48)
        with pytest.raises(ValueError):
            segment_shots([shot], k=300, min_len=0)


class TestManifest:
    def test_segments_stay_inside_true_shots(self, mixed_corpus, mixed_manifest):
        _, truths = mixed_corpus
        spans = {}
        for t in truths:
            spans.setdefault(t.video_id, []).append((t.begin_frame, t.end_frame))
        for seg in mixed_manifest.segments:
            assert any(
                b <= seg.start < seg.end <= e for b, e in spans[seg.video_id]
            ), f"{seg.segment_id} crosses a shot boundary"

    def test_lookup_and_grouping(self, mixed_manifest):
        seg = mixed_manifest.segments[0]
        assert mixed_manifest.segment(seg.segment_id) == seg
        with pytest.raises(KeyError):
            mixed_manifest.segment("nope")

    def test_save_load_round_trip(self, tmp_path, mixed_manifest):
        path = tmp_path / "manifest.jsonl"
        save_manifest(mixed_manifest, path)
        loaded = load_manifest(path)
        assert loaded.segments == mixed_manifest.segments
        assert loaded.sources == mixed_manifest.sources
        assert loaded.fingerprint == mixed_manifest.fingerprint

    def test_duplicate_segment_ids_rejected(self, mixed_manifest):
        seg = mixed_manifest.segments[0]
        with pytest.raises(ValueError):
            Manifest(
                segments=(seg, seg),
                sources=dict(mixed_manifest.sources),
            )

    def test_build_manifest_writes_file(self, tmp_path, mixed_corpus):
        videos, _ = mixed_corpus
        out = tmp_path / "m.jsonl"
        manifest = build_manifest(videos[:2], k=64, min_len=48, out_path=out)
        assert load_manifest(out).segments == manifest.segments
