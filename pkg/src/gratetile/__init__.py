"""Uneven sparse-tensor tiling and DRAM traffic simulation for CNN feature maps."""
from .core import (
    FeatureMap,
    LayerConfig,
    PlatformProfile,
    SparsityModel,
    SMALL,
    LARGE,
    PLATFORMS,
    generate_feature_map,
    zero_fraction,
    load_feature_map,
    store_feature_map,
    layer_catalog,
)
from .division import (
    DivisionMode,
    GrateConfig,
    build_grid,
    grate_config,
    reduce_config,
    resolve_mode,
    spatial_cuts,
    subtensors_in_window,
    window_for_tile,
)
from .layout import locate, metadata_bits_per_kb, pack, size_field_widths, unpack
from .simulator import (
    FetchReport,
    aggregate,
    brute_force_oracle,
    derive_tile_config,
    simulate_layer,
)

__version__ = "0.1.0"
