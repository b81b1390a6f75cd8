"""Scattering-center extraction toolkit for complex-valued radar images.

Pipeline: a physics forward model synthesizes scenes (asc_model), a
position-parameterized dictionary links image pixels to scatterer
coordinates (dictionary), classical sparse solvers and a trainable unrolled
shrinkage network recover coefficient vectors (solvers, unfolded), and
metrics/dataio/cli turn the pieces into reproducible experiments.
"""

from .asc_model import (AscParams, RadarGrid, SignalMatrix, SpatialGrid,
                        C_LIGHT, evaluate_asc, signal_to_image,
                        synthesize_signal, vec, unvec)
from .dictionary import (Dictionary, DictionaryMemoryError, apply,
                         apply_adjoint, build_dictionary,
                         build_image_dictionary, build_signal_dictionary,
                         load_dictionary, save_dictionary,
                         spectral_step_bound)
from .solvers import (AmpConfig, DivergenceError, IstaConfig, SolverTrace,
                      amp_solve, ista_solve, omp_solve, soft_threshold)
from .unfolded import (CheckpointMismatchError, ForwardTape, GradientResult,
                       StageParams, TrainConfig, TrainingDivergedError,
                       TrainingLog, backward, compute_loss, extend_stages,
                       forward_network, forward_stage, init_code,
                       load_checkpoint, lr_schedule, save_checkpoint, train,
                       train_stage_sweep)
from .metrics import (BenchmarkRow, ExtractedAsc, extract_ascs,
                      format_benchmark_table, residual_loss, run_benchmark,
                      run_stage_sweep, write_benchmark_csv)
from .dataio import (ConfigError, ExperimentConfig, SceneDistribution,
                     export_magnitude_image, load_config, load_manifest,
                     load_split, preprocess, read_complex_image, read_scene,
                     regenerate_image, synthesize_dataset,
                     write_complex_image, write_scene)

__version__ = "0.1.0"
