"""Kidney/tumor CT segmentation inference toolkit: geometry, I/O, sliding-window
inference, ensembling, post-processing, loss and metrics."""
__version__ = "0.1.0"

from ._accel import backend, set_backend
from .volcore import Geometry, LabelMap, MultiChannelProb, Volume, read_nifti, write_nifti
from .labelspace import KITS_CLASSMAP, ClassMap, decode, encode

__all__ = [
    "Geometry",
    "Volume",
    "LabelMap",
    "MultiChannelProb",
    "read_nifti",
    "write_nifti",
    "ClassMap",
    "KITS_CLASSMAP",
    "encode",
    "decode",
    "backend",
    "set_backend",
]
