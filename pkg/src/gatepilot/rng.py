"""Counter-based randomness keyed by (seed, purpose labels).

Each distinct label tuple gets an independent Philox stream, so adding
entities (more domains, more gates, another sampling step) never perturbs
the draws of existing ones. That property is what keeps gate-count
ablations comparable run to run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def subkey(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Labels may be strings or ints; they are folded into a 128-bit Philox key
    via SHA-256 of the canonical ``seed|label|label...`` string.
    """
    token = "|".join([str(int(seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
