"""Shared fixtures: small deterministic corpora built once per session."""

import numpy as np
import pytest

from vidrel.ingest import FrameStore
from vidrel.shots import build_manifest
from vidrel.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus


@pytest.fixture(scope="session")
def mixed_corpus(tmp_path_factory):
    """Five videos with 1-3 shots each, all motion kinds, plus ground truth."""
    spec = SyntheticCorpusSpec(
        num_videos=5,
        shots_per_video=(1, 3),
        shot_length_range=(60, 120),
        seed=33,
    )
    out = tmp_path_factory.mktemp("mixed_corpus")
    videos, truths = generate_synthetic_corpus(spec, out)
    return videos, truths


@pytest.fixture(scope="session")
def mixed_manifest(mixed_corpus):
    """Segment manifest over the mixed corpus, dense segmentation."""
    videos, _ = mixed_corpus
    return build_manifest(videos, k=64, min_len=48)


@pytest.fixture(scope="session")
def mixed_store(mixed_corpus):
    videos, _ = mixed_corpus
    return FrameStore(videos)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
