"""Deep span representations for named entity recognition.

A standard Transformer token encoder paired with per-width span
Transformer encoders whose queries are span representations and whose
keys/values are layer-matched token representations, plus shallow and
biaffine baselines, training, evaluation, and representation analysis.
"""

from .autodiff import RngState, Tensor, backward, finite_diff_check
from .data import Sentence, Vocab, gen_synthetic, nestedness_tag, parse_bio, parse_json_spans
from .errors import DspertError
from .evaluation import PRF, micro_prf, pca_project, prelogit_report
from .model import Model, ModelConfig, predict_entities
from .training import TrainConfig, build_target_grid, train

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "PRF",
    "RngState",
    "Sentence",
    "Tensor",
    "TrainConfig",
    "Vocab",
    "backward",
    "build_target_grid",
    "DspertError",
    "finite_diff_check",
    "gen_synthetic",
    "micro_prf",
    "nestedness_tag",
    "parse_bio",
    "parse_json_spans",
    "pca_project",
    "predict_entities",
    "prelogit_report",
    "train",
    "__version__",
]
