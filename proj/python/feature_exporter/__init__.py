"""Turn image folders into feature bundles for the amoe engine."""

from .bundle import Bundle, encode_bundle, write_bundle, write_manifest
from .export import Encoder, EncoderOutput, ExportSpec, export, mask_to_grid

__all__ = [
    "Bundle",
    "Encoder",
    "EncoderOutput",
    "ExportSpec",
    "encode_bundle",
    "export",
    "mask_to_grid",
    "write_bundle",
    "write_manifest",
]
