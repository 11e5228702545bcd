"""Build-time toolchain: assembler, taint bitmap, CFG, path enumeration and image format."""
from .adp import DEFAULT_PATH_BOUND, AdpPath, enumerate_adps, manual_adp, path_hash
from .assembler import Program, assemble
from .bitmap import bitmap_bit, build_taint_bitmap
from .cfg import Cfg, CfgNode, build_cfg
from .image import ImageMeta, ProgramImage, emit_image, parse_image, serialize, verify_image
from .prep import PrepResult, prep

__all__ = [
    "AdpPath", "Cfg", "CfgNode", "DEFAULT_PATH_BOUND", "ImageMeta", "PrepResult", "Program",
    "ProgramImage", "assemble", "bitmap_bit", "build_cfg", "build_taint_bitmap", "emit_image",
    "enumerate_adps", "manual_adp", "parse_image", "path_hash", "prep", "serialize", "verify_image",
]
