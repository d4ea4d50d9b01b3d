"""Shared fixtures for the HEAR test-suite."""
import tempfile
from functools import lru_cache
from pathlib import Path

from django.conf import settings

from hear.channel_dictionary import GlobalDictionary, load_dictionary
from hear.model_core import ModelConfig
from hear.synthetic_data import SynthSpec, generate


@lru_cache(maxsize=1)
def shipped_dictionary() -> GlobalDictionary:
    return load_dictionary(settings.HEAR_DICTIONARY_PATH)


def small_config(**overrides) -> ModelConfig:
    """Desk-scale architecture used across tests."""
    values = dict(hidden_dim=16, num_layers=2, num_heads=2, window_len=32, max_time_patches=4, codebook_size=16)
    values.update(overrides)
    return ModelConfig.custom(**values)


class TempDirMixin:
    """Creates ``self.tmp`` (a Path) for each test and removes it afterwards."""

    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.addCleanup(self._tmp.cleanup)


def small_corpus(root, samples_per_layout=20, window_len=32, seed=0, **overrides):
    """
    Synthetic container at ``root`` that survives the preprocessing stage.

    Recordings last 4 s at 200 Hz, long enough for the 201-tap bandpass.
    """
    spec = SynthSpec(samples_per_layout=samples_per_layout, window_len=window_len, seed=seed, **overrides)
    return generate(spec, shipped_dictionary(), root)
