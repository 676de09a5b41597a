"""Mean-pooled text embeddings from a pretrained dual-encoder.

The context side always runs the frozen base weights (one shared corpus
index); adapters are only legal on the query side. Inference is
deterministic: eval mode, no dropout, fixed truncation length.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from embext.adapters import apply_adapter, load_adapter
from embext.embio import write_embeddings

log = logging.getLogger(__name__)

SIDES = ("query", "context")


@dataclass(frozen=True)
class ExtractorConfig:
    model: str
    side: str
    adapter: str | None = None
    pooling: str = "mean"
    batch_size: int = 16
    max_seq_len: int = 128
    format: str = "bin"

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.adapter is not None and self.side != "query":
            raise ValueError("adapters are only permitted on the query side; "
                             "the context encoder stays frozen")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}; only 'mean' is implemented")
        if self.batch_size < 1 or self.max_seq_len < 2:
            raise ValueError("batch_size must be >= 1 and max_seq_len >= 2")
        if self.format not in ("bin", "jsonl"):
            raise ValueError(f"unknown output format {self.format!r}")


@dataclass(frozen=True)
class ExtractResult:
    count: int
    dim: int
    truncated: int
    provider: str


def read_texts(path: str | Path) -> list[tuple[str, str]]:
    """Parse ``{"id": ..., "text": ...}`` JSONL; errors name the line."""
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc.msg}")
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise ValueError(f"{path}:{lineno}: record needs 'id' and 'text' fields")
            id_ = rec["id"]
            if not isinstance(id_, str) or not isinstance(rec["text"], str):
                raise ValueError(f"{path}:{lineno}: 'id' and 'text' must be strings")
            if id_ in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {id_!r}")
            seen.add(id_)
            records.append((id_, rec["text"]))
    if not records:
        raise ValueError(f"{path}: no input records")
    return records


def _mean_pool(hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
    return (hidden * mask).sum(dim=1) / mask.sum(dim=1)


def extract(config: ExtractorConfig, in_path: str | Path, out_path: str | Path) -> ExtractResult:
    from transformers import AutoModel, AutoTokenizer

    records = read_texts(in_path)
    tokenizer = AutoTokenizer.from_pretrained(config.model)
    model = AutoModel.from_pretrained(config.model)
    model.eval()

    provider = Path(config.model).name
    adapter_name = None
    if config.adapter is not None:
        adapter = load_adapter(config.adapter)
        applied = apply_adapter(model, adapter)
        adapter_name = adapter.name
        provider = f"{provider}+{adapter.name}"
        log.info("merged adapter %s into %d modules", adapter.name, len(applied))

    ids = [id_ for id_, _ in records]
    texts = [text for _, text in records]
    truncated = 0
    rows: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(texts), config.batch_size):
            batch = texts[start : start + config.batch_size]
            for text in batch:
                if len(tokenizer(text)["input_ids"]) > config.max_seq_len:
                    truncated += 1
            enc = tokenizer(
                batch,
                padding=True,
                truncation=True,
                max_length=config.max_seq_len,
                return_tensors="pt",
            )
            hidden = model(**enc).last_hidden_state
            pooled = _mean_pool(hidden, enc["attention_mask"])
            rows.append(pooled.to(torch.float32).numpy())
    if truncated:
        log.warning("%d of %d texts exceeded max_seq_len=%d and were truncated",
                    truncated, len(texts), config.max_seq_len)

    matrix = np.concatenate(rows)
    write_embeddings(
        ids,
        matrix,
        out_path,
        config.format,
        provider=provider,
        metric_hint="ip",
        extra_manifest={
            "model": config.model,
            "adapter": adapter_name,
            "side": config.side,
            "pooling": config.pooling,
            "max_seq_len": config.max_seq_len,
            "truncated": truncated,
        },
    )
    return ExtractResult(
        count=len(ids), dim=int(matrix.shape[1]), truncated=truncated, provider=provider
    )
