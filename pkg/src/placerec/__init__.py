"""Attention-weighted VLAD descriptors for visual place recognition.

The pipeline: ingest or synthesize grids of local features, softly assign
them to visual words, down-weight features near shadow centroids, pool
double-weighted residuals into a normalized descriptor, learn the pooling
parameters with a triplet ranking loss over geo-mined tuples, optionally
whiten, and evaluate Recall@N retrieval.
"""

from .encoding import (
    AttentionMaps,
    ClusterModel,
    Descriptor,
    aggregate,
    centroids_to_affine,
    encode,
    encode_baseline,
    encode_batch,
    encode_with_attention,
    finalize,
    intra_weight,
    load_model,
    read_descriptor_file,
    save_model,
    soft_assign,
    write_attention_csv,
    write_descriptor_file,
)
from .errors import (
    ConfigError,
    DegenerateDescriptor,
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    FormatError,
    InsufficientDynamic,
    InsufficientStatic,
    InvalidSpec,
    NoPositive,
    PlacerecError,
    RankDeficientWarning,
    TooFewSamples,
    ZeroFeature,
)
from .evaluation import (
    DescriptorIndex,
    RecallResult,
    build_index,
    load_index,
    query_topn,
    recall_at,
    save_index,
    write_recall_csv,
)
from .features import (
    DEFAULT_PARTITION,
    GeoTag,
    LocalFeatureSet,
    SemanticPartition,
    SyntheticPlaceSpec,
    generate_synthetic_dataset,
    group_places,
    normalize_features,
    read_feature_file,
    read_geotag_manifest,
    write_feature_file,
    write_geotag_manifest,
)
from .initialization import init_normal, init_semantic, kmeans, sample_feature_pool
from .training import (
    Gradients,
    SgdConfig,
    TrainingTuple,
    TrainResult,
    finite_difference_gradients,
    gradient_check,
    load_optimizer_state,
    mine_tuples,
    save_optimizer_state,
    train,
    triplet_loss,
    tuple_forward_backward,
    tuple_loss,
    write_history_csv,
)
from .whitening import (
    WhiteningTransform,
    apply_whitening,
    apply_whitening_batch,
    fit_whitening,
    load_whitening,
    save_whitening,
    transform,
)

__version__ = "0.1.0"
