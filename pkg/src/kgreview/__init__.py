"""Knowledge-graph capsule model for personalized review generation."""

from .data import ReviewRecord, Sentence, Vocabulary, read_corpus, write_corpus
from .errors import KGReviewError
from .hkg import HKG, build_hkg, context_subgraph, copy_candidates, user_subgraph
from .model import GeneratedReview, ModelConfig, ReviewModel
from .sentence_decoder import BeamConfig
from .trainer import TrainConfig, load_checkpoint, loss_report, save_checkpoint, train

__all__ = [
    "HKG", "BeamConfig", "GeneratedReview", "KGReviewError", "ModelConfig", "ReviewModel", "ReviewRecord",
    "Sentence", "TrainConfig", "Vocabulary", "build_hkg", "context_subgraph", "copy_candidates",
    "load_checkpoint", "loss_report", "read_corpus", "save_checkpoint", "train", "user_subgraph",
    "write_corpus",
]
