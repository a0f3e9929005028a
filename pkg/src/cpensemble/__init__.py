"""Random-Patches ensembles of transductive conformal predictors over naive Bayes."""

__version__ = "0.1.0"

from .conformal import ConformalPredictor, ForcedPrediction, forced_prediction, p_values, prediction_region
from .data import Dataset, DatasetError, Example, FeatureKind, FeatureSpec, generate_synthetic, load_csv, stratified_folds, write_csv
from .ensemble import BaseMode, ConformalEnsemble, EnsembleConfig, EnsembleVerdict, build, predict, predict_batch
from .evaluation import compute_metrics, friedman_test, run_cv, run_grid, wilcoxon_signed_rank
from .naive_bayes import ModelError, NaiveBayesModel, fit, nonconformity, posterior

__all__ = [
    "BaseMode", "ConformalEnsemble", "ConformalPredictor", "Dataset", "DatasetError", "EnsembleConfig",
    "EnsembleVerdict", "Example", "FeatureKind", "FeatureSpec", "ForcedPrediction", "ModelError",
    "NaiveBayesModel", "build", "compute_metrics", "fit", "forced_prediction", "friedman_test",
    "generate_synthetic", "load_csv", "nonconformity", "p_values", "posterior", "predict",
    "predict_batch", "prediction_region", "run_cv", "run_grid", "stratified_folds",
    "wilcoxon_signed_rank", "write_csv",
]
