"""Data-driven reduced order models from invariant foliations of skew-product maps."""

from .basis import FunctionLibrary, ShiftOperator, eval_library, fit_shift_lsq, rotation_shift
from .data import TrajectorySet, delay_embed, export_csv, ingest_csv, pca_reduce, translate
from .foliation import Foliation, LossConfig, loss, loss_and_grad, relative_error
from .linid import BundleSet, LinearSkewModel, fit_linear_model, solve_bundles, spectral_quotient
from .normalform import PolarGrid, backbone, compare_backbones, solve_polar_map, solve_polar_ode
from .optim import OptimConfig, initialize, minimize, minimize_continued
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"
