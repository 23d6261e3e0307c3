from fruitform.data.augment import (AugmentationPlan, apply_augmentation, apply_transform,
                                    plan_balancing)
from fruitform.data.ingest import ingest_directory
from fruitform.data.preprocess import preprocess, preprocess_array
from fruitform.data.records import (CLASS_NAMES, NUM_CLASSES, DatasetManifest, DeformityClass,
                                    FruitKind, ImageRecord, Source, Split)
from fruitform.data.split import largest_remainder, stratified_split

__all__ = [
    "AugmentationPlan", "CLASS_NAMES", "DatasetManifest", "DeformityClass", "FruitKind",
    "ImageRecord", "NUM_CLASSES", "Source", "Split", "apply_augmentation", "apply_transform",
    "ingest_directory", "largest_remainder", "plan_balancing", "preprocess", "preprocess_array",
    "stratified_split",
]
