"""Shared fixtures: small deterministic datasets and a default config."""

import numpy as np
import pytest

from stahg.config import TrainingConfig
from stahg.data import WindowProvider, chronological_split, spatial_weights
from stahg.synth import SynthSpec, gen_flows, gen_graph


@pytest.fixture(scope="session")
def small_world():
    """A 6-node path dataset plus train/val/test providers at a tiny config."""
    spec = SynthSpec(nodes=6, topology="path", steps=400, seed=3)
    graph = gen_graph(spec)
    flows = gen_flows(graph, spec)
    cfg = TrainingConfig(d=8, w=4, k=2, horizon=2, seed=1, epochs=2,
                         learning_rate=1e-3, batch_size=32)
    sw = spatial_weights(graph)
    parts = chronological_split(flows, (0.6, 0.2, 0.2), w=cfg.w, horizon=cfg.horizon)
    providers = {
        name: WindowProvider(part, graph, sw, cfg.w, cfg.horizon, cfg.k,
                             cfg.hop, cfg.seed, name)
        for name, part in zip(("train", "val", "test"), parts)
    }
    return {"spec": spec, "graph": graph, "flows": flows, "cfg": cfg,
            "sw": sw, "parts": parts, "providers": providers}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
