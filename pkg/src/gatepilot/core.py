"""Shared domain types, the similarity kernel, and bit-exact embedding I/O.

Everything here is immutable after construction, so values can be shared
freely across threads. Vectors are float32 on disk and in memory; similarity
accumulates in float64 to bound drift.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

METRICS = ("ip", "cos")

BIN_MAGIC = b"EMB1"


class DataFormatError(ValueError):
    """A file or record violates one of the documented formats."""


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"unknown similarity metric {metric!r}; expected one of {METRICS}")
    return metric


@dataclass(frozen=True)
class GateSet:
    """Ordered collection of gate ids; the order is canonical.

    Canonical order is the tie-breaking and serialization order everywhere
    in this package.
    """

    gates: tuple[str, ...]

    def __init__(self, gates: Iterable[str]):
        gates = tuple(gates)
        if not gates:
            raise ValueError("a GateSet needs at least one gate")
        seen = set()
        for g in gates:
            if not g or any(c.isspace() for c in g):
                raise ValueError(f"invalid gate id {g!r}: must be non-empty with no whitespace")
            if g in seen:
                raise ValueError(f"duplicate gate id {g!r}")
            seen.add(g)
        object.__setattr__(self, "gates", gates)

    @property
    def size(self) -> int:
        return len(self.gates)

    def __contains__(self, gate: str) -> bool:
        return gate in self.gates

    def __iter__(self) -> Iterator[str]:
        return iter(self.gates)

    def __len__(self) -> int:
        return len(self.gates)

    def restrict(self, subset: Iterable[str]) -> "GateSet":
        """Subset in canonical order; every member must be a known gate."""
        wanted = set(subset)
        missing = wanted - set(self.gates)
        if missing:
            raise ValueError(f"unknown gate ids {sorted(missing)}")
        return GateSet(g for g in self.gates if g in wanted)


@dataclass(frozen=True)
class Embedding:
    """One id-tagged vector. Entries must be finite."""

    id: str
    vec: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=np.float32)
        if vec.ndim != 1:
            raise ValueError(f"embedding {self.id!r}: vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding {self.id!r}: non-finite entries")
        vec.flags.writeable = False
        object.__setattr__(self, "vec", vec)

    @property
    def dim(self) -> int:
        return int(self.vec.shape[0])


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    source_dataset: str


class EmbeddingSet:
    """Id-indexed collection of fixed-dimension vectors plus its manifest.

    Rows are stored in file/creation order as a read-only float32 matrix.
    Derived views (float64 matrix, id-sorted order, norms) are cached lazily;
    they never mutate observable state.
    """

    def __init__(
        self,
        ids: Sequence[str],
        matrix: np.ndarray,
        *,
        dim: int | None = None,
        provider: str = "unknown",
        metric_hint: str = "ip",
    ):
        ids = tuple(ids)
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids but {matrix.shape[0]} matrix rows")
        if dim is None:
            if matrix.shape[0] == 0:
                raise ValueError("dim is required for an empty EmbeddingSet")
            dim = int(matrix.shape[1])
        if matrix.shape[0] > 0 and matrix.shape[1] != dim:
            raise ValueError(f"matrix dim {matrix.shape[1]} != declared dim {dim}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embedding matrix contains non-finite entries")
        index: dict[str, int] = {}
        for row, id_ in enumerate(ids):
            if id_ in index:
                raise ValueError(f"duplicate embedding id {id_!r}")
            index[id_] = row
        matrix.flags.writeable = False
        self._ids = ids
        self._matrix = matrix
        self._index = index
        self._dim = int(dim)
        self.provider = provider
        self.metric_hint = check_metric(metric_hint)
        self._matrix64: np.ndarray | None = None
        self._id_order: np.ndarray | None = None
        self._norms64: np.ndarray | None = None

    @classmethod
    def from_records(
        cls,
        records: Iterable[Embedding],
        *,
        dim: int | None = None,
        provider: str = "unknown",
        metric_hint: str = "ip",
    ) -> "EmbeddingSet":
        records = list(records)
        if records:
            dim = records[0].dim if dim is None else dim
            matrix = np.stack([r.vec for r in records])
        else:
            if dim is None:
                raise ValueError("dim is required for an empty EmbeddingSet")
            matrix = np.zeros((0, dim), dtype=np.float32)
        return cls(
            [r.id for r in records], matrix, dim=dim, provider=provider, metric_hint=metric_hint
        )

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def count(self) -> int:
        return len(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._index

    def get(self, id_: str) -> np.ndarray:
        """Row vector for ``id_`` (read-only float32 view)."""
        try:
            return self._matrix[self._index[id_]]
        except KeyError:
            raise KeyError(f"no embedding with id {id_!r} in set from provider {self.provider!r}")

    def embedding(self, id_: str) -> Embedding:
        return Embedding(id_, self.get(id_))

    def records(self) -> Iterator[Embedding]:
        for id_, row in zip(self._ids, self._matrix):
            yield Embedding(id_, row)

    @property
    def matrix64(self) -> np.ndarray:
        if self._matrix64 is None:
            m = self._matrix.astype(np.float64)
            m.flags.writeable = False
            self._matrix64 = m
        return self._matrix64

    @property
    def id_sort_order(self) -> np.ndarray:
        """Row indices that arrange ids in ascending lexicographic order."""
        if self._id_order is None:
            order = np.argsort(np.array(self._ids, dtype=object), kind="stable")
            order.flags.writeable = False
            self._id_order = order
        return self._id_order

    @property
    def norms64(self) -> np.ndarray:
        if self._norms64 is None:
            n = np.linalg.norm(self.matrix64, axis=1)
            n.flags.writeable = False
            self._norms64 = n
        return self._norms64

    def manifest_dict(self) -> dict:
        return {
            "dim": self._dim,
            "count": self.count,
            "provider": self.provider,
            "metric_hint": self.metric_hint,
        }


def similarity(a, b, metric: str = "ip") -> float:
    """Similarity between two vectors.

    ``ip`` is the inner product; ``cos`` divides it by the product of the
    Euclidean norms and requires both vectors non-zero. Accumulation is in
    float64 regardless of input dtype.
    """
    check_metric(metric)
    va = a.vec if isinstance(a, Embedding) else np.asarray(a)
    vb = b.vec if isinstance(b, Embedding) else np.asarray(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    va = va.astype(np.float64, copy=False)
    vb = vb.astype(np.float64, copy=False)
    dot = float(np.dot(va, vb))
    if metric == "ip":
        return dot
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return dot / (na * nb)


class Qrels:
    """Relevance judgments: query_id -> doc_id -> non-negative integer grade.

    Every judged query must have at least one doc with positive relevance.
    """

    def __init__(self, data: Mapping[str, Mapping[str, int]]):
        clean: dict[str, dict[str, int]] = {}
        for qid, docs in data.items():
            docmap = {}
            for doc_id, rel in docs.items():
                rel = int(rel)
                if rel < 0:
                    raise ValueError(f"qrels {qid}/{doc_id}: negative relevance {rel}")
                docmap[doc_id] = rel
            if not docmap or max(docmap.values()) <= 0:
                raise ValueError(f"qrels for query {qid!r} have no positively relevant doc")
            clean[qid] = docmap
        self._data = clean

    @property
    def data(self) -> dict[str, dict[str, int]]:
        return self._data

    def __contains__(self, qid: str) -> bool:
        return qid in self._data

    def __len__(self) -> int:
        return len(self._data)

    def for_query(self, qid: str) -> dict[str, int]:
        try:
            return self._data[qid]
        except KeyError:
            raise KeyError(f"no relevance judgments for query {qid!r}")

    @classmethod
    def load_trec(cls, path: str | Path) -> "Qrels":
        """Parse TREC qrels lines: ``<query_id> 0 <doc_id> <relevance>``."""
        data: dict[str, dict[str, int]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
                qid, _, doc_id, rel = parts
                try:
                    rel_val = int(rel)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: relevance {rel!r} is not an integer")
                data.setdefault(qid, {})[doc_id] = rel_val
        return cls(data)

    def save_trec(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for qid in self._data:
                for doc_id, rel in self._data[qid].items():
                    fh.write(f"{qid} 0 {doc_id} {rel}\n")


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def _load_manifest(path: Path) -> dict | None:
    mpath = _manifest_path(path)
    if not mpath.exists():
        return None
    with open(mpath, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{mpath}: invalid JSON manifest: {exc}")
    if not isinstance(manifest, dict):
        raise DataFormatError(f"{mpath}: manifest must be a JSON object")
    return manifest


def save_embedding_set(emb_set: EmbeddingSet, path: str | Path, format: str = "bin") -> None:
    """Write ``emb_set`` plus its sidecar manifest.

    ``bin`` is bit-exact: magic ``EMB1``, u32 LE dim, u64 LE count, then per
    record a u16 LE id byte-length, the UTF-8 id, and dim float32 LE values.
    ``jsonl`` stores one ``{"id": ..., "vec": [...]}`` object per line with
    shortest round-trip decimals, which also reloads bit-identically.
    """
    path = Path(path)
    if format == "bin":
        with open(path, "wb") as fh:
            fh.write(BIN_MAGIC)
            fh.write(struct.pack("<IQ", emb_set.dim, emb_set.count))
            for id_, row in zip(emb_set.ids, emb_set.matrix):
                raw = id_.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise ValueError(f"id {id_!r} exceeds 65535 UTF-8 bytes")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(row.astype("<f4").tobytes())
    elif format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for id_, row in zip(emb_set.ids, emb_set.matrix):
                rec = {"id": id_, "vec": [float(v) for v in row]}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    else:
        raise ValueError(f"unknown embedding format {format!r}; expected 'bin' or 'jsonl'")
    with open(_manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(emb_set.manifest_dict(), fh, indent=2)
        fh.write("\n")


def _load_jsonl(path: Path) -> tuple[list[str], list[np.ndarray]]:
    ids: list[str] = []
    rows: list[np.ndarray] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc.msg}")
            if not isinstance(rec, dict) or "id" not in rec or "vec" not in rec:
                raise DataFormatError(f"{path}:{lineno}: record needs 'id' and 'vec' fields")
            if not isinstance(rec["id"], str):
                raise DataFormatError(f"{path}:{lineno}: 'id' must be a string")
            vec = np.asarray(rec["vec"], dtype=np.float32)
            if vec.ndim != 1:
                raise DataFormatError(f"{path}:{lineno}: 'vec' must be a flat number list")
            if not np.all(np.isfinite(vec)):
                raise DataFormatError(f"{path}:{lineno}: non-finite vector entry")
            if dim is None:
                dim = int(vec.shape[0])
            elif vec.shape[0] != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: dim {vec.shape[0]} != dim {dim} of first record"
                )
            ids.append(rec["id"])
            rows.append(vec)
    return ids, rows


def _load_bin(path: Path) -> tuple[list[str], np.ndarray, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BIN_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {BIN_MAGIC!r}")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<IQ", blob, 4)
    offset = 16
    ids: list[str] = []
    rows = np.zeros((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        if offset + 2 > len(blob):
            raise DataFormatError(f"{path}: record {i}: truncated id length")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(blob):
            raise DataFormatError(f"{path}: record {i}: truncated record body")
        try:
            ids.append(blob[offset : offset + id_len].decode("utf-8"))
        except UnicodeDecodeError:
            raise DataFormatError(f"{path}: record {i}: id is not valid UTF-8")
        offset += id_len
        rows[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - offset} trailing bytes after {count} records")
    if count and not np.all(np.isfinite(rows)):
        bad = int(np.argwhere(~np.isfinite(rows).all(axis=1))[0][0])
        raise DataFormatError(f"{path}: record {bad}: non-finite vector entry")
    return ids, rows, int(dim)


def load_embedding_set(path: str | Path, format: str | None = None) -> EmbeddingSet:
    """Load an embedding set written by :func:`save_embedding_set`.

    The format is sniffed from the file when not given. A sidecar manifest,
    if present, supplies provider/metric_hint and is cross-checked against
    the records.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such embedding file: {path}")
    if format is None:
        with open(path, "rb") as fh:
            format = "bin" if fh.read(4) == BIN_MAGIC else "jsonl"
    manifest = _load_manifest(path)
    if format == "bin":
        ids, matrix, dim = _load_bin(path)
    elif format == "jsonl":
        ids, rows = _load_jsonl(path)
        dim = None
        if rows:
            matrix = np.stack(rows)
            dim = int(matrix.shape[1])
        else:
            if manifest is None or "dim" not in manifest:
                raise DataFormatError(f"{path}: empty JSONL needs a manifest declaring 'dim'")
            dim = int(manifest["dim"])
            matrix = np.zeros((0, dim), dtype=np.float32)
    else:
        raise ValueError(f"unknown embedding format {format!r}; expected 'bin' or 'jsonl'")

    provider = "unknown"
    metric_hint = "ip"
    if manifest is not None:
        if "dim" in manifest and int(manifest["dim"]) != dim:
            raise DataFormatError(f"{path}: manifest dim {manifest['dim']} != file dim {dim}")
        if "count" in manifest and int(manifest["count"]) != len(ids):
            raise DataFormatError(
                f"{path}: manifest count {manifest['count']} != file count {len(ids)}"
            )
        provider = str(manifest.get("provider", provider))
        metric_hint = str(manifest.get("metric_hint", metric_hint))
    try:
        return EmbeddingSet(ids, matrix, dim=dim, provider=provider, metric_hint=metric_hint)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}")
