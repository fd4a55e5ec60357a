"""Copy-segment matching between videos from frame-similarity matrices."""

from .core import (EmbeddingSequence, GroundTruthSegment, ScoreMatrix, SegmentPrediction, SimilarityMatrix,
                   load_embeddings, load_matrix, read_segments_csv, save_embeddings, save_matrix, write_segments_csv)
from .evalmetrics import micro_ap
from .postprocess import ENSEMBLE_PARAMS, ensemble_match, match_pair
from .samscore import score_pair
from .simgen import cosine_similarity_matrix, fit_to_canvas

__version__ = "0.1.0"
