"""Mixture-of-experts bag aggregation with a conditional diffusion
classifier for multiple-instance learning, plus synthetic benchmarks,
metrics and uncertainty estimation."""

__version__ = "0.1.0"

from .core import Bag, DatasetManifest, one_hot, validate_probability  # noqa: F401
from .moe import MoEAggregator, SamplingRatios, aggregate, moe_loss  # noqa: F401
from .diffusion import Denoiser, default_schedule, make_schedule, sample  # noqa: F401
from .synthetic import SynthSpec, generate_bag, generate_dataset, oracle_label  # noqa: F401
from .training import TrainConfig, train_stage1, train_stage2  # noqa: F401
from .evaluate import evaluate, predict_bag  # noqa: F401
from .metrics import classification_metrics, pavpu, qq_export, ttest_certainty  # noqa: F401
