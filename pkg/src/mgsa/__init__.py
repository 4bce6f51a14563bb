"""Multi-granularity self-attention on a from-scratch numpy autodiff engine."""

from .attention import Encoder, MgSaConfig, MgSaLayer, MhSaLayer, default_head_assignment
from .autodiff import Tensor, backward, no_grad
from .objectives import TagVocabulary, tag_loss, total_loss
from .partition import GranularitySpec, PhrasePartition, ngram_partition, syntactic_partition, word_partition
from .phrase_memory import CompositionKind, InteractionKind, PhraseMemory, build_phrase_memory
from .probe import Checkpoint, MatrixSpec, TrainConfig, evaluate, run_experiment_matrix, train
from .treebank import ParseTree, generate_corpus, parse_bracketed

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CompositionKind",
    "Encoder",
    "GranularitySpec",
    "InteractionKind",
    "MatrixSpec",
    "MgSaConfig",
    "MgSaLayer",
    "MhSaLayer",
    "ParseTree",
    "PhraseMemory",
    "PhrasePartition",
    "TagVocabulary",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_phrase_memory",
    "default_head_assignment",
    "evaluate",
    "generate_corpus",
    "ngram_partition",
    "no_grad",
    "parse_bracketed",
    "run_experiment_matrix",
    "syntactic_partition",
    "tag_loss",
    "total_loss",
    "train",
    "word_partition",
]
