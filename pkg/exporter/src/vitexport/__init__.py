from .export import (
    BASE_CONFIG,
    DEFAULT_MODEL,
    ExportManifestSpec,
    export,
    expand_mapping,
    fixture_input,
    load_mapping,
    map_state,
    synthetic_checkpoint,
)
from .reference import pooled_features
from .wman import ExportError, write_manifest

__all__ = [
    "BASE_CONFIG", "DEFAULT_MODEL", "ExportManifestSpec", "export",
    "expand_mapping", "fixture_input", "load_mapping", "map_state",
    "synthetic_checkpoint", "pooled_features", "ExportError",
    "write_manifest",
]

__version__ = "0.1.0"
