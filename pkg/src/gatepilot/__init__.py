"""Expert-routing dense retrieval engine.

A retrieval query can be embedded by any of several expert query encoders
(gates). This package routes each query to a gate by comparing the query's
base-encoder embedding against a library of pilot embeddings (per-gate
centroids of training instances grouped by their best-performing gate),
retrieves with the selected gate's embedding, and evaluates everything with
nDCG@10. A deterministic synthetic benchmark makes every routing claim
testable at desk scale.
"""

from gatepilot.core import (
    DataFormatError,
    Embedding,
    EmbeddingSet,
    GateSet,
    Qrels,
    QueryRecord,
    load_embedding_set,
    save_embedding_set,
    similarity,
)

__all__ = [
    "DataFormatError",
    "Embedding",
    "EmbeddingSet",
    "GateSet",
    "Qrels",
    "QueryRecord",
    "load_embedding_set",
    "save_embedding_set",
    "similarity",
]

__version__ = "0.1.0"
