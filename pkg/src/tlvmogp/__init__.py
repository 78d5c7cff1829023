"""Transformed latent-variable multi-output Gaussian processes in float64 torch."""
from .ablation import CellResult, ExperimentGrid, load_grid, run_grid, summarise, write_results
from .checkpoint import (CheckpointError, ChecksumError, ModelCheckpoint, VersionError,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, TrainConfig, load_config, parse_config_text
from .data import (Dataset, DatasetError, SplitSpec, SynthSpec, generate_synthetic, load_dataset,
                   save_dataset, split)
from .diffmath import (DTYPE, EvaluationError, FactorizationError, GradReport, SingularSystemError,
                       cholesky, grad_check, tri_solve)
from .embedder import Architecture, ConfigurationError, Embedder, lipschitz_envelope, spectral_normalise
from .kernel import KernelHyperparams, nystrom_diag, rbf_gram
from .latent import LatentState, kl_latent, sample_latent
from .likelihood import GaussianLik, ZinbLik, make_likelihood
from .predictor import (Evaluation, MissingLatentError, MixturePrediction, evaluate, evaluate_dataset,
                        predict, test_nll)
from .svgp import TLVMOGP, Batch, BoundOptions, InducingState, elbo_full, elbo_minibatch, kl_u, marginal_qf
from .trainer import DivergenceError, TrainHistory, gradcheck_suite, train

__version__ = "0.1.0"
