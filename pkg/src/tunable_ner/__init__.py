"""Named-entity tagging with tunable and gated parameter sharing between two tasks."""
from .data import Corpus, Sentence, SynthSpec, Vocab, bio_to_iobes, iobes_to_spans, read_conll_columns
from .errors import ConfigError, DataError, ParseError, TrainingDiverged
from .kernels import BACKEND as KERNEL_BACKEND
from .model import ModelConfig, NerModel, extract_target_model
from .sharing import ALL_CODES, SharingScheme, parse_config_code
from .train import TrainConfig, evaluate, run_ttn_grid

__version__ = "0.1.0"

__all__ = [
    "ALL_CODES", "ConfigError", "Corpus", "DataError", "KERNEL_BACKEND", "ModelConfig", "NerModel",
    "ParseError", "Sentence", "SharingScheme", "SynthSpec", "TrainConfig", "TrainingDiverged", "Vocab",
    "bio_to_iobes", "evaluate", "extract_target_model", "iobes_to_spans", "parse_config_code",
    "read_conll_columns", "run_ttn_grid",
]
