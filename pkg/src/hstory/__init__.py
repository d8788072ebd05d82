"""Hierarchical LSTM storyteller: image sequence in, one sentence per image out.

Pure numpy.  The submodules are importable on their own; the names below are
the ones most scripts need.
"""
from .dataio import EmbeddingTable, StoryRecord, gen_toy_corpus, load_corpus, load_embeddings
from .decoder import ModelParameters, story_logits
from .inference import beam_search, generate_corpus, generate_story, greedy_decode
from .metrics import bleu, cider, nearest_neighbors
from .training import TrainConfig, evaluate_teacher_forced, train

__version__ = "0.1.0"

__all__ = [
    "EmbeddingTable", "StoryRecord", "gen_toy_corpus", "load_corpus", "load_embeddings",
    "ModelParameters", "story_logits",
    "beam_search", "generate_corpus", "generate_story", "greedy_decode",
    "bleu", "cider", "nearest_neighbors",
    "TrainConfig", "evaluate_teacher_forced", "train",
]
