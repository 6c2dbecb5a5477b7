"""Surface anomaly detection with a from-scratch convolutional triplet network.

The package trains a small fully-convolutional residual network on clean
surface-texture patches, synthesizing defective triplet negatives by random
erasing, and detects anomalies by comparing test embeddings against per-class
prototype feature maps, separating (mean, max) distance features with a
hard-margin linear SVM and reporting ROC AUC per class and defect type.
"""

from .autodiff import (GradCheckReport, Parameter, Tensor, adam_step, add,
                       conv2d_valid, crop2d, euclidean_distance,
                       finite_difference_check, mae_loss, maxpool2x2, no_grad,
                       pairwise_distance, relu, softmax2, stack_pair)
from .data import (DatasetIndex, TripletBatch, build_patch_pools,
                   build_triplet_batch, index_dataset, load_and_preprocess,
                   preprocess, random_erase, random_rescale, resize_bilinear,
                   sample_patches)
from .evaluation import (EvalReport, Prototype, ScorePoint, SvmModel,
                         build_prototype, distance_map, evaluate,
                         score_image,
                         export_heatmap, export_report, fit_linear_svm,
                         roc_auc, score_features, svm_decision)
from .network import (FeatureExtractor, TrainConfig, TripletOutput,
                      build_feature_extractor, load_checkpoint, min_input_side,
                      output_side, save_checkpoint, train, triplet_batch_loss,
                      triplet_forward)
from .rng import RngStream
from .synthetic import DefectSpec, generate_synthetic_dataset

__version__ = "0.1.0"

__all__ = [
    "GradCheckReport", "Parameter", "Tensor", "adam_step", "add",
    "conv2d_valid", "crop2d", "euclidean_distance", "finite_difference_check",
    "mae_loss", "maxpool2x2", "no_grad", "pairwise_distance", "relu",
    "softmax2", "stack_pair",
    "DatasetIndex", "TripletBatch", "build_patch_pools", "build_triplet_batch",
    "index_dataset", "load_and_preprocess", "preprocess", "random_erase",
    "random_rescale", "resize_bilinear", "sample_patches",
    "EvalReport", "Prototype", "ScorePoint", "SvmModel", "build_prototype",
    "distance_map", "evaluate", "export_heatmap", "export_report",
    "fit_linear_svm", "roc_auc", "score_features", "score_image", "svm_decision",
    "FeatureExtractor", "TrainConfig", "TripletOutput",
    "build_feature_extractor", "load_checkpoint", "min_input_side",
    "output_side", "save_checkpoint", "train", "triplet_batch_loss",
    "triplet_forward",
    "RngStream", "DefectSpec", "generate_synthetic_dataset",
]
