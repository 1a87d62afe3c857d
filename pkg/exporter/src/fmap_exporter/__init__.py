"""Frozen-backbone feature exporter for the .fmap interchange format."""

from .errors import (
    EmptyInputError,
    ExporterError,
    FrozenWeightError,
    SpecError,
    WeightLoadError,
    WriteError,
)
from .export import (
    ExportSpec,
    export_features,
    extract_features,
    list_tiles,
    load_backbone,
    load_tile_tensor,
)
from .fmap_writer import write_fmap
from .vit import (
    VisionTransformer,
    build_vit_from_state_dict,
    interpolate_pos_embed,
    weight_checksum,
)

__version__ = "0.1.0"
