"""Self-supervised video representation learning from clip relations.

Pipeline: untrimmed videos -> single-shot segments -> relation-labeled
clip pairs -> siamese 3D-CNN pretraining -> action recognition /
nearest-neighbor retrieval evaluation.
"""

from vidrel.ingest import (
    CANONICAL_HEIGHT,
    CANONICAL_WIDTH,
    FrameSequence,
    FrameStore,
    RawVideo,
    decode_frames,
    resize_frame,
)
from vidrel.shots import (
    HogParams,
    Manifest,
    Segment,
    Shot,
    build_manifest,
    detect_shot_changes,
    frame_difference,
    hog_descriptor,
    segment_shots,
)
from vidrel.sampling import (
    ALL_RELATIONS,
    Clip,
    RelationCategory,
    RelationSample,
    RelationSampler,
    SamplePlan,
    TransformDescriptor,
    verify_plan_label,
)
from vidrel.backbones import (
    BackboneConfig,
    FeatureBackbone,
    build_backbone,
    load_backbone,
    numeric_gradient_check,
    save_backbone,
)
from vidrel.training import (
    Checkpoint,
    SiameseModel,
    TrainConfig,
    cross_entropy,
    export_single_stack,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    softmax,
)
from vidrel.downstream import (
    LabeledVideoDataset,
    VideoClassifier,
    VideoDescriptor,
    attention_map,
    extract_descriptor,
    finetune,
    load_action_dataset,
    pca_embed,
    predict_video,
    retrieve,
)
from vidrel.config import ConfigError, RunConfig, load_run_config

__version__ = "0.1.0"
