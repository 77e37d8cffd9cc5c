"""Shared helpers for the experiment scripts: build the synthetic sample set once."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from stormcast.preprocess import build_samples
from stormcast.synth import SynthConfig, gen_sequence
from stormcast.training import SampleSet


def synthetic_samples(seed: int = 0, workers: int = 1, **overrides) -> SampleSet:
    seq = gen_sequence(replace(SynthConfig(seed=seed), **overrides))
    samples = build_samples(seq.timestamps, seq.frames, seq.events, workers=workers)
    return SampleSet([s.timestamp for s in samples], np.stack([s.raw for s in samples]),
                     np.stack([s.target for s in samples]))
