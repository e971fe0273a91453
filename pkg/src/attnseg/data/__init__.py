"""Phantom synthesis, augmentation, windowing and fold splitting."""

from attnseg.data.folds import Fold, FoldSplit, check_disjoint, split_kfold
from attnseg.data.io import read_dataset, synthesize_dataset, write_dataset
from attnseg.data.phantom import (
    N_LAYERS,
    PhantomParams,
    ScanSample,
    generate_cohort,
    generate_phantom,
)
from attnseg.data.transforms import (
    Augmentation,
    augment,
    crop_windows,
    derive_guidance_mask,
    downsample_mask,
    hflip,
    random_augmentation,
    rotate,
    translate,
)

__all__ = [
    "Augmentation",
    "Fold",
    "FoldSplit",
    "N_LAYERS",
    "PhantomParams",
    "ScanSample",
    "augment",
    "check_disjoint",
    "crop_windows",
    "derive_guidance_mask",
    "downsample_mask",
    "generate_cohort",
    "generate_phantom",
    "hflip",
    "random_augmentation",
    "read_dataset",
    "rotate",
    "split_kfold",
    "synthesize_dataset",
    "translate",
    "write_dataset",
]
