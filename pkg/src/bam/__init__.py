"""Back-off acoustic models: long-context M-phone GMMs trained by a sharded
MapReduce-style pipeline and used to rescore N-best lists."""

from .core import CIState, DataError, DiagGmm, Segment, Alignment, Utterance, score_frame
from .mphone import MPhoneKey, backoff_chain, decode_key, encode_key, extract_maximal, shard_of
from .gmm import Reservoir, VarmixParams, estimate_gmm, varmix_size
from .store import ModelStore, write_model
from .pipeline import ReducerConfig, train_bam
from .rescore import HitMatrix, combine_scores, rerank
from .samplesize import SampleSizeQuery, inverse_normal_cdf, required_n

__version__ = "0.1.0"

__all__ = [
    "Alignment",
    "CIState",
    "DataError",
    "DiagGmm",
    "HitMatrix",
    "MPhoneKey",
    "ModelStore",
    "ReducerConfig",
    "Reservoir",
    "SampleSizeQuery",
    "Segment",
    "Utterance",
    "VarmixParams",
    "backoff_chain",
    "combine_scores",
    "decode_key",
    "encode_key",
    "estimate_gmm",
    "extract_maximal",
    "inverse_normal_cdf",
    "required_n",
    "rerank",
    "score_frame",
    "shard_of",
    "train_bam",
    "varmix_size",
    "write_model",
]
