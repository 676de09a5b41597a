import json
import os

import numpy as np
import pytest

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")
os.environ.setdefault("TRANSFORMERS_VERBOSITY", "error")


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small randomly initialized dual-encoder saved locally (offline)."""
    import torch
    from transformers import BertConfig, BertModel

    d = tmp_path_factory.mktemp("tiny_model")
    specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    vocab = specials + letters + ["##" + l for l in letters] + [str(i) for i in range(10)]
    (d / "vocab.txt").write_text("\n".join(vocab) + "\n")
    torch.manual_seed(10)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    BertModel(config).save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def adapter_paths(tmp_path_factory):
    """Two distinct low-rank adapters over the layer-0 attention projections."""
    from embext.adapters import LowRankAdapter, save_adapter

    d = tmp_path_factory.mktemp("adapters")
    paths = {}
    for i, gate in enumerate(["GA", "GB"]):
        rng = np.random.default_rng(100 + i)
        deltas = {
            "encoder.layer.0.attention.self.query": (
                rng.normal(size=(4, 32)) * 0.2,
                rng.normal(size=(32, 4)) * 0.2,
            ),
            "encoder.layer.0.attention.self.value": (
                rng.normal(size=(4, 32)) * 0.2,
                rng.normal(size=(32, 4)) * 0.2,
            ),
        }
        adapter = LowRankAdapter(name=f"gate-{gate}", rank=4, alpha=32.0, deltas=deltas)
        path = d / f"{gate}.npz"
        save_adapter(adapter, path)
        paths[gate] = path
    return paths


@pytest.fixture()
def texts_jsonl(tmp_path):
    def write(records, name="texts.jsonl"):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for id_, text in records:
                fh.write(json.dumps({"id": id_, "text": text}) + "\n")
        return path

    return write
