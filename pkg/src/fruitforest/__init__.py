"""From-scratch 4-layer CNN features feeding a from-scratch random forest.

The pipeline mirrors its stages as submodules: imaging (HSV+gray channels,
background fill), data (indexing, splits, synthetic trees), ops/cnn
(tensor layers and the network), training (loss, optimizer, loop), forest
(CART ensemble), metrics (one-vs-rest reports), and cli (orchestration).
"""

from .cnn import (
    Cnn4Config,
    Cnn4Model,
    build_cnn4,
    count_parameters,
    extract_deep_features,
    forward_with_taps,
    load_features,
    load_model,
    predict_proba_batch,
    save_features,
    save_model,
)
from .data import (
    DatasetIndex,
    ImageDataset,
    LoadConfig,
    SplitSpec,
    SynthSpec,
    generate_synthetic,
    load_batch,
    make_validation_split,
    scan_directory_tree,
)
from .errors import FruitForestError
from .forest import (
    RandomForestModel,
    RfConfig,
    fit_forest,
    load_forest,
    predict_class,
    predict_proba,
    predict_proba_matrix,
    save_forest,
)
from .metrics import (
    FRUITS360_GROUPS,
    CategoryGroup,
    ConfusionCounts,
    MetricSet,
    category_macro_metrics,
    compare_models,
    compute_metrics,
    confusion_counts,
    multiclass_accuracy,
    resolve_group,
)
from .training import TrainConfig, evaluate_model, train_model, write_history_csv

__version__ = "0.1.0"

__all__ = [
    "Cnn4Config",
    "Cnn4Model",
    "build_cnn4",
    "count_parameters",
    "extract_deep_features",
    "forward_with_taps",
    "load_features",
    "load_model",
    "predict_proba_batch",
    "save_features",
    "save_model",
    "DatasetIndex",
    "ImageDataset",
    "LoadConfig",
    "SplitSpec",
    "SynthSpec",
    "generate_synthetic",
    "load_batch",
    "make_validation_split",
    "scan_directory_tree",
    "FruitForestError",
    "RandomForestModel",
    "RfConfig",
    "fit_forest",
    "load_forest",
    "predict_class",
    "predict_proba",
    "predict_proba_matrix",
    "save_forest",
    "FRUITS360_GROUPS",
    "CategoryGroup",
    "ConfusionCounts",
    "MetricSet",
    "category_macro_metrics",
    "compare_models",
    "compute_metrics",
    "confusion_counts",
    "multiclass_accuracy",
    "resolve_group",
    "TrainConfig",
    "evaluate_model",
    "train_model",
    "write_history_csv",
    "__version__",
]
