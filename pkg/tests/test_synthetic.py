"""Properties of the generated test corpora."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from vidrel.ingest import decode_frames
from vidrel.synthetic import (
    ACTION_CLASS_NAMES,
    ActionDatasetSpec,
    ShotTruth,
    SyntheticCorpusSpec,
    generate_action_dataset,
    generate_synthetic_corpus,
    read_shot_truth,
    render_video,
    write_shot_truth,
)
from vidrel.downstream import load_action_dataset


def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestCorpusGeneration:
    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticCorpusSpec(
            num_videos=2, shots_per_video=(1, 2), shot_length_range=(60, 80), seed=9
        )
        generate_synthetic_corpus(spec, tmp_path / "a")
        generate_synthetic_corpus(spec, tmp_path / "b")
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    def test_video_independent_of_corpus_size(self, tmp_path):
        small = SyntheticCorpusSpec(
            num_videos=1, shots_per_video=(1, 2), shot_length_range=(60, 80), seed=9
        )
        large = SyntheticCorpusSpec(
            num_videos=3, shots_per_video=(1, 2), shot_length_range=(60, 80), seed=9
        )
        frames_small, bounds_small = render_video(small, 0)
        frames_large, bounds_large = render_video(large, 0)
        np.testing.assert_array_equal(frames_small, frames_large)
        assert bounds_small == bounds_large

    def test_truth_covers_video_contiguously(self, mixed_corpus):
        videos, truths = mixed_corpus
        by_video = {v.video_id: v for v in videos}
        for video_id in by_video:
            spans = [
                (t.begin_frame, t.end_frame) for t in truths if t.video_id == video_id
            ]
            assert spans, f"no shots recorded for {video_id}"
            assert spans[0][0] == 0
            assert spans[-1][1] == by_video[video_id].frame_count
            for (_, prev_end), (begin, end) in zip(spans, spans[1:]):
                assert begin == prev_end
                assert begin < end

    def test_shot_lengths_within_band(self, mixed_corpus):
        _, truths = mixed_corpus
        for t in truths:
            assert 60 <= t.end_frame - t.begin_frame <= 120

    def test_frames_top_brighter_than_bottom(self, mixed_corpus):
        videos, _ = mixed_corpus
        video = videos[0]
        frames = np.stack(decode_frames(video, 0, 3).frames).astype(np.float64)
        top = frames[:, :30].mean()
        bottom = frames[:, -30:].mean()
        assert top - bottom > 8.0

    def test_backgrounds_differ_between_videos(self, mixed_corpus):
        videos, _ = mixed_corpus
        means = []
        for video in videos[:4]:
            frame = decode_frames(video, 0, 1).frames[0].astype(np.float64)
            means.append(frame.mean(axis=(0, 1)))
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert np.abs(means[i] - means[j]).max() > 5.0

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(
                num_videos=0, shots_per_video=(1, 2), shot_length_range=(60, 80)
            )
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(
                num_videos=1, shots_per_video=(2, 1), shot_length_range=(60, 80)
            )


class TestShotTruthIO:
    def test_round_trip(self, tmp_path):
        truths = [ShotTruth("v0", 0, 70), ShotTruth("v0", 70, 150), ShotTruth("v1", 0, 64)]
        path = tmp_path / "truth.jsonl"
        write_shot_truth(path, truths)
        assert read_shot_truth(path) == truths


class TestActionDataset:
    def test_labels_structure_and_balance(self, tmp_path):
        spec = ActionDatasetSpec(train_per_class=3, test_per_class=2, seed=4)
        labels_path = generate_action_dataset(spec, tmp_path)
        splits = load_action_dataset(labels_path)
        assert set(splits) == {"train", "test"}
        assert len(splits["train"]) == 3 * len(ACTION_CLASS_NAMES)
        assert len(splits["test"]) == 2 * len(ACTION_CLASS_NAMES)
        for split in splits.values():
            counts = np.bincount(split.labels, minlength=len(ACTION_CLASS_NAMES))
            assert len(set(counts)) == 1, "classes must be balanced"

    def test_splits_disjoint(self, tmp_path):
        spec = ActionDatasetSpec(train_per_class=2, test_per_class=2, seed=4)
        splits = load_action_dataset(generate_action_dataset(spec, tmp_path))
        train_ids = {v.video_id for v in splits["train"].videos}
        test_ids = {v.video_id for v in splits["test"].videos}
        assert not train_ids & test_ids

    def test_lengths_within_band(self, tmp_path):
        spec = ActionDatasetSpec(
            train_per_class=2, test_per_class=1, frames_per_video=(40, 48), seed=4
        )
        splits = load_action_dataset(generate_action_dataset(spec, tmp_path))
        for split in splits.values():
            for video in split.videos:
                assert 40 <= video.frame_count <= 48
