"""Skeleton-conditioned motion diffusion toolkit for arbitrary topologies."""

from .skeleton import (
    RelationKind,
    RestPose,
    Skeleton,
    Topology,
    augment_add,
    augment_remove,
    build_topology,
    compute_distances,
    compute_relations,
    rest_pose_features,
)
from .bvh import BvhDocument, parse_bvh, write_bvh
from .motion import JointMotion, MotionTensor, crop_window, load_motion, pad, save_motion
from .rotations import geodesic_loss, matrix_to_rotation_6d, rotation_6d_to_matrix
from .preprocess import (
    ClipMeta,
    NormalizationStats,
    PreprocessConfig,
    clean_names,
    compute_stats,
    denormalize,
    detect_foot_contacts,
    normalize,
    preprocess_clip,
)
from .features import clip_from_features, features_from_clip, footlock_cleanup
from .denoiser import (
    ActivationTap,
    Denoiser,
    DenoiserConfig,
    HashedNameEmbedder,
    SkeletonBatch,
    TableNameEmbedder,
)
from .diffusion import (
    LossWeights,
    NoiseSchedule,
    dift_features,
    edit_sample,
    q_sample,
    sample,
    training_loss,
)
from .training import (
    Dataset,
    DatasetEntry,
    TrainConfig,
    augment_sample,
    balanced_batches,
    train,
)
from .metrics import (
    MetricConfig,
    MetricReport,
    coverage,
    evaluate_skeleton,
    inter_diversity,
    intra_diversity_diff,
    local_diversity,
    ood_score,
    select_benchmark,
)
from .analysis import (
    CorrespondenceMap,
    SegmentationResult,
    spatial_correspondence,
    temporal_correspondence,
    temporal_segmentation,
)

__version__ = "0.1.0"
