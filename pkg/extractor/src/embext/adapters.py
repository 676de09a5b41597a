"""Low-rank adapter files and their application to an encoder.

An adapter is a set of per-module weight deltas W += (alpha / rank) * B @ A,
stored as an .npz with arrays ``<module-path>.A`` (rank x in_features) and
``<module-path>.B`` (out_features x rank) plus a ``__meta__`` JSON blob with
name, rank, and alpha. Applying an adapter merges the deltas into the model's
weights in place, which keeps inference a single ordinary forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass(frozen=True)
class LowRankAdapter:
    name: str
    rank: int
    alpha: float
    deltas: dict[str, tuple[np.ndarray, np.ndarray]]  # module -> (A, B)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        for module, (A, B) in self.deltas.items():
            if A.ndim != 2 or B.ndim != 2:
                raise ValueError(f"{module}: A and B must be matrices")
            if A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise ValueError(
                    f"{module}: shapes {A.shape}/{B.shape} disagree with rank {self.rank}"
                )


def save_adapter(adapter: LowRankAdapter, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for module, (A, B) in adapter.deltas.items():
        arrays[f"{module}.A"] = np.asarray(A, dtype=np.float32)
        arrays[f"{module}.B"] = np.asarray(B, dtype=np.float32)
    meta = json.dumps({"name": adapter.name, "rank": adapter.rank, "alpha": adapter.alpha})
    np.savez(path, __meta__=np.array(meta), **arrays)


def load_adapter(path: str | Path) -> LowRankAdapter:
    path = Path(path)
    with np.load(path) as blob:
        if "__meta__" not in blob:
            raise ValueError(f"{path}: not an adapter file (missing __meta__)")
        meta = json.loads(str(blob["__meta__"]))
        modules = sorted(
            {key[: -len(".A")] for key in blob.files if key.endswith(".A")}
        )
        deltas = {}
        for module in modules:
            if f"{module}.B" not in blob:
                raise ValueError(f"{path}: module {module!r} has A but no B matrix")
            deltas[module] = (blob[f"{module}.A"], blob[f"{module}.B"])
    if not deltas:
        raise ValueError(f"{path}: adapter has no module deltas")
    return LowRankAdapter(
        name=str(meta.get("name", path.stem)),
        rank=int(meta["rank"]),
        alpha=float(meta["alpha"]),
        deltas=deltas,
    )


def apply_adapter(model: torch.nn.Module, adapter: LowRankAdapter) -> list[str]:
    """Merge the adapter's deltas into the model weights. Returns the module
    paths that were patched."""
    applied = []
    scale = adapter.alpha / adapter.rank
    with torch.no_grad():
        for module_path, (A, B) in adapter.deltas.items():
            try:
                module = model.get_submodule(module_path)
            except AttributeError:
                raise ValueError(f"adapter {adapter.name!r}: model has no module {module_path!r}")
            weight = getattr(module, "weight", None)
            if weight is None:
                raise ValueError(f"adapter {adapter.name!r}: module {module_path!r} has no weight")
            delta = scale * (B.astype(np.float64) @ A.astype(np.float64))
            if tuple(weight.shape) != delta.shape:
                raise ValueError(
                    f"adapter {adapter.name!r}: delta shape {delta.shape} does not match "
                    f"{module_path!r} weight {tuple(weight.shape)}"
                )
            weight += torch.from_numpy(delta).to(weight.dtype)
            applied.append(module_path)
    return applied
