"""Adaptive structural convolution network for point-cloud classification.

numpy/scipy only. The pieces, bottom up: :mod:`cloudio` (clouds, files,
synthetic data), :mod:`spatial` (exact k-NN, receptive fields),
:mod:`adaptive` (eigenentropy neighbourhood sizes), :mod:`structconv`
(kernels and pooling), :mod:`autodiff` (tape and optimisers) and
:mod:`network` (model, training, model files).
"""

__version__ = "0.1.0"

from .adaptive import AdaptiveConfig, eigenentropy, eigvals_sym3, optimal_neighborhood, optimal_neighborhoods_all
from .cloudio import (ClassSpec, Dataset, LabeledCloud, PointCloud, decimate_dataset, decimate_density,
                      default_class_specs, generate_dataset, generate_shape, load_cloud, load_dataset,
                      save_cloud, save_dataset)
from .errors import (ASCNError, ClassMismatch, ConfigError, CorruptModel, DegenerateCloud, DimensionMismatch,
                     InvalidParam, NumericalError, ParseError, VersionError)
from .experiments import run_crossdomain
from .network import (ModelConfig, OptimConfig, build_model, evaluate, forward_cloud, load_model, save_model,
                      train)
from .spatial import SpatialIndex, build_index, k_nearest, receptive_field, receptive_fields
from .structconv import conv_dir, conv_dist, graph_max_pool, str_conv_layer

__all__ = [
    "AdaptiveConfig", "eigenentropy", "eigvals_sym3", "optimal_neighborhood", "optimal_neighborhoods_all",
    "ClassSpec", "Dataset", "LabeledCloud", "PointCloud", "decimate_dataset", "decimate_density",
    "default_class_specs", "generate_dataset", "generate_shape", "load_cloud", "load_dataset",
    "save_cloud", "save_dataset",
    "ASCNError", "ClassMismatch", "ConfigError", "CorruptModel", "DegenerateCloud", "DimensionMismatch",
    "InvalidParam", "NumericalError", "ParseError", "VersionError",
    "run_crossdomain",
    "ModelConfig", "OptimConfig", "build_model", "evaluate", "forward_cloud", "load_model", "save_model", "train",
    "SpatialIndex", "build_index", "k_nearest", "receptive_field", "receptive_fields",
    "conv_dir", "conv_dist", "graph_max_pool", "str_conv_layer",
]
