"""Writers for the retrieval engine's embedding-file formats.

Binary: magic ``EMB1``, u32 LE dim, u64 LE count, then per record a u16 LE id
byte-length, the UTF-8 id, and dim float32 LE values. JSONL: one
``{"id": ..., "vec": [...]}`` object per line. Both get a sidecar
``<path>.manifest.json`` carrying dim/count/provider/metric_hint plus
extraction metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

BIN_MAGIC = b"EMB1"


def write_embeddings(
    ids: Sequence[str],
    matrix: np.ndarray,
    path: str | Path,
    format: str = "bin",
    *,
    provider: str,
    metric_hint: str = "ip",
    extra_manifest: dict | None = None,
) -> None:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("refusing to write non-finite embeddings")
    if format == "bin":
        with open(path, "wb") as fh:
            fh.write(BIN_MAGIC)
            fh.write(struct.pack("<IQ", matrix.shape[1], len(ids)))
            for id_, row in zip(ids, matrix):
                raw = id_.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(row.astype("<f4").tobytes())
    elif format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for id_, row in zip(ids, matrix):
                fh.write(
                    json.dumps({"id": id_, "vec": [float(v) for v in row]},
                               separators=(",", ":"))
                    + "\n"
                )
    else:
        raise ValueError(f"unknown output format {format!r}; expected 'bin' or 'jsonl'")
    manifest = {
        "dim": int(matrix.shape[1]),
        "count": len(ids),
        "provider": provider,
        "metric_hint": metric_hint,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(path.with_name(path.name + ".manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
