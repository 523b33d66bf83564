"""Bimodal tensor-fusion fraud classifier with a synthetic ablation harness."""

from .data import Dataset, FeatureRecord, SynthConfig, generate_synthetic, stratified_kfold
from .evaluate import ConfusionMatrix, MetricsReport, confusion, metrics, run_ablation
from .model import ModelDims, ModelParams, Variant, init_params, load_params, save_params
from .numkit import Rng, RngLanes
from .train import TrainConfig, run_cv, train_one

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "Dataset", "FeatureRecord", "MetricsReport", "ModelDims",
    "ModelParams", "Rng", "RngLanes", "SynthConfig", "TrainConfig", "Variant",
    "confusion", "generate_synthetic", "init_params", "load_params", "metrics",
    "run_ablation", "run_cv", "save_params", "stratified_kfold", "train_one",
    "__version__",
]
