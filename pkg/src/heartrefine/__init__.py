"""Whole-heart label refinement on voxel grids.

Volumes are numpy arrays in (z, y, x) order.  The subpackage
:mod:`heartrefine.unet` holds a small 3-D U-Net written directly in numpy.
"""
from .io import VolumeFormatError, load_volume, save_volume
from .labels import (
    Annotation,
    Connectivity,
    CropBox,
    Plane,
    argmax_decode,
    connected_components,
    dilate,
    extract_pav,
    fuse_predictions,
    largest_component_cleanup,
    lv_myo_reassign,
    one_hot_encode,
    parcellate_la_boxes,
    split_by_plane,
)
from .metrics import DiceReport, dice, dice_all, dice_report
from .phantom import PhantomParams, degrade_labels, generate_phantom, random_params
from .schema import SEVEN, SIX, SIX_NO_PA_REFINED, TEN, LabelSchema, Variant, get_schema
from .volume import (
    FOVError,
    IntensityVolume,
    LabelVolume,
    crop_or_pad,
    fit_field_of_view,
    heart_center,
    preprocess,
    resample_isotropic,
)

__all__ = [
    "VolumeFormatError", "load_volume", "save_volume", "Annotation", "Connectivity", "CropBox",
    "Plane", "argmax_decode", "connected_components", "dilate", "extract_pav", "fuse_predictions",
    "largest_component_cleanup", "lv_myo_reassign", "one_hot_encode", "parcellate_la_boxes",
    "split_by_plane", "DiceReport", "dice", "dice_all", "dice_report", "PhantomParams",
    "degrade_labels", "generate_phantom", "random_params", "SEVEN", "SIX", "SIX_NO_PA_REFINED",
    "TEN", "LabelSchema", "Variant", "get_schema", "FOVError", "IntensityVolume", "LabelVolume",
    "crop_or_pad", "fit_field_of_view", "heart_center", "preprocess", "resample_isotropic",
]

__version__ = "0.1.0"
