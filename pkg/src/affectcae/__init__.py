"""
Affect CAE Package
==================
Continuous valence/arousal prediction from face frames: a CNN pre-trained on
labeled expressions hands its conv stack to a convolutional autoencoder, whose
bottleneck features feed an epsilon-SVR per affect dimension.

This package provides:
- A small numpy neural-network engine (conv, pool, upsample, dense, batchnorm)
- Pre-training CNN and convolutional autoencoder builders with transfer and freezing
- Epsilon-SVR trained by SMO with a CCC-driven grid search
- Greedy post-processing chain (median, centering, scaling, time shift)
- FER-style and RECOLA-style loaders plus a seeded synthetic generator

Components:
- affectcae.nn: Network spec, forward/backward, Adam training, checkpoints
- affectcae.models: Architectures, weight transfer, freezing, encoding
- affectcae.svr: SMO solver, grid search, model files
- affectcae.postprocess: Post-processing steps and chain optimizer
- affectcae.pipeline: Stage runner and experiment sweeps
- affectcae.cli: Command-line interface

Entry points:
- affectcae-cli: pipeline stages, sweeps and synthetic data
"""

__version__ = "0.3.1"
__license__ = "MIT"

# Import main classes for easy access
try:
    from .config import RunConfig, load_config
    from .errors import AffectError, ConfigError, MissingArtifactError
    from .metrics import ccc, pearson_cc, rmse
    from .models import build_cae, build_pretrain_cnn, encode, set_frozen, transfer_weights
    from .nn import ModelWeights, NetworkSpec, TrainConfig, forward, train
    from .pipeline import Pipeline, run_sweep
    from .postprocess import PostprocessChain, optimize_chain
    from .svr import SvrModel, fit_svr, grid_search, predict_svr

    __all__ = [
        "RunConfig",
        "load_config",
        "AffectError",
        "ConfigError",
        "MissingArtifactError",
        "ccc",
        "pearson_cc",
        "rmse",
        "build_cae",
        "build_pretrain_cnn",
        "encode",
        "set_frozen",
        "transfer_weights",
        "ModelWeights",
        "NetworkSpec",
        "TrainConfig",
        "forward",
        "train",
        "Pipeline",
        "run_sweep",
        "PostprocessChain",
        "optimize_chain",
        "SvrModel",
        "fit_svr",
        "grid_search",
        "predict_svr",
        "__version__",
    ]
except ImportError:
    # Handle missing dependencies during development/testing
    __all__ = ["__version__"]
