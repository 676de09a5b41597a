"""Text-to-embedding extraction for the routing engine's file formats.

Runs a pretrained dual-encoder over id+text JSONL and writes embedding files
(binary or JSONL, plus a sidecar manifest) in the exact formats the retrieval
engine loads. Per-gate low-rank adapters can be merged into the query encoder;
the context side always runs the frozen base weights.
"""

from embext.extractor import ExtractorConfig, ExtractResult, extract

__all__ = ["ExtractorConfig", "ExtractResult", "extract"]

__version__ = "0.1.0"
