"""Architecture-agnostic neural parameter compression with additive quantization."""

__version__ = "0.1.0"

from .aq_model import AqHyper, OptimConfig, extract_codes, reconstruct_hard, train_aq
from .entropy_codec import read_container, write_container
from .estimators import AdditiveQuantizer, ArchiveCompressor, MLPTaskClassifier
from .pager import PageManifest, flatten, unflatten
from .tensor_io import TensorArchive, TensorEntry, read_archive, write_archive

__all__ = [
    "AdditiveQuantizer",
    "AqHyper",
    "ArchiveCompressor",
    "MLPTaskClassifier",
    "OptimConfig",
    "PageManifest",
    "TensorArchive",
    "TensorEntry",
    "extract_codes",
    "flatten",
    "read_archive",
    "read_container",
    "reconstruct_hard",
    "train_aq",
    "unflatten",
    "write_archive",
    "write_container",
]
