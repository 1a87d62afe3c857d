"""Self-supervised land-cover segmentation by correspondence distillation.

A frozen backbone's patch features are distilled into a small trainable
projection head by matching cosine-similarity structure; the resulting codes
are clustered into land-cover classes and scored against ground truth with
Hungarian-matched metrics.
"""

from .cluster_probe import (
    Centroids,
    ConfusionMatrix,
    EvalReport,
    accumulate_confusion,
    assign_clusters,
    evaluate,
    greedy_match,
    hungarian_match,
    kmeans_cosine,
    kmeans_cosine_trace,
    kmeans_plus_plus_init,
    match_and_evaluate,
    pad_square,
    upsample_mask,
    write_report,
)
from .correspondence import (
    CorrTensor,
    LossTerms,
    PairSample,
    correlation_loss,
    cosine_correspondence,
    cosine_correspondence_backward,
    knn_pairs,
    pool_feature_map,
    sample_pairs,
    spatial_center,
    unit_grid,
)
from .dataset import (
    Palette,
    PaletteEntry,
    RgbTile,
    SplitEntry,
    SplitManifest,
    build_split,
    deepglobe_palette,
    load_palette,
    load_tile,
    mask_from_palette,
    mask_resize_nearest,
    palette_from_dict,
    palette_to_dict,
    render_mask,
    resize_bilinear,
    save_tile_png,
)
from .errors import (
    ConfigError,
    CorrsegError,
    CorruptionError,
    DataError,
    DecodeError,
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    InvariantError,
    ManifestError,
    NumericError,
    ParameterError,
    ShapeError,
    UndefinedMetricsError,
    UnsupportedVersionError,
    WriteError,
)
from .feature_io import (
    CodeMap,
    FeatureMap,
    LabelMask,
    Region,
    SceneSpec,
    generate_synthetic_scene,
    random_rect_layout,
    read_feature_map,
    scene_prototypes,
    stripe_layout,
    write_feature_map,
)
from .seg_head import (
    AdamState,
    HeadParams,
    PairMix,
    TrainConfig,
    adam_step,
    head_backward,
    head_forward,
    init_adam_state,
    init_head,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

__version__ = "0.1.0"
