"""Mixture-of-experts orthogonality regularization and the weight/activation overlap gap."""
from __future__ import annotations

__version__ = "0.1.0"

from .data import Corpus, load_corpus  # noqa: E402
from .metrics import activation_mso, gap_oracle, orthogonality_loss, weight_mso  # noqa: E402
from .model import MoEModel, MoEModelConfig  # noqa: E402
from .stats import paired_t_test, pearson, student_t_cdf  # noqa: E402
from .train import TrainConfig, run_training  # noqa: E402

__all__ = [
    "Corpus", "MoEModel", "MoEModelConfig", "TrainConfig", "activation_mso", "gap_oracle",
    "load_corpus", "orthogonality_loss", "paired_t_test", "pearson", "run_training",
    "student_t_cdf", "weight_mso", "__version__",
]
