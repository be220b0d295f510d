"""Self-distillation toolkit: multi-exit models, three-source training, probes."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, NonFiniteError, ShapeError
from .models import SectionSpec, ExitOutputs, MultiExitModel, build_model, strip_heads
from .losses import (DistillConfig, LossBreakdown, softmax_t, cross_entropy,
                     kl_divergence, hint_loss, total_loss)
from .data import Dataset, Split, SyntheticSpec, load_cifar, make_synthetic, batches
from .training import TrainPlan, TrainRecord, SGD, sgd_step, train, evaluate
from .inference import (EnsembleSpec, CostReport, predict_at_exit, ensemble,
                        count_macs, confidence_early_exit)
from .probes import (NoiseProbeResult, GradStats, SeparabilityReport, noise_probe,
                     grad_stats, separability, export_features_pca)
from .estimator import SelfDistillationClassifier

__all__ = [
    "Tensor", "no_grad", "NonFiniteError", "ShapeError",
    "SectionSpec", "ExitOutputs", "MultiExitModel", "build_model", "strip_heads",
    "DistillConfig", "LossBreakdown", "softmax_t", "cross_entropy",
    "kl_divergence", "hint_loss", "total_loss",
    "Dataset", "Split", "SyntheticSpec", "load_cifar", "make_synthetic", "batches",
    "TrainPlan", "TrainRecord", "SGD", "sgd_step", "train", "evaluate",
    "EnsembleSpec", "CostReport", "predict_at_exit", "ensemble",
    "count_macs", "confidence_early_exit",
    "NoiseProbeResult", "GradStats", "SeparabilityReport", "noise_probe",
    "grad_stats", "separability", "export_features_pca",
    "SelfDistillationClassifier",
    "__version__",
]
