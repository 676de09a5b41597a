"""Shared synthetic-world presets for the test suite."""

from gatepilot.synth import SynthConfig


def small_world_config(**overrides):
    defaults = dict(
        seed=10,
        num_domains=3,
        dim=32,
        docs_per_domain=60,
        train_queries_per_domain=30,
        test_queries_per_domain=15,
    )
    defaults.update(overrides)
    return SynthConfig(**defaults)
