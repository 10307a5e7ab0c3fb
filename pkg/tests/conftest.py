"""Shared builders for the test suite, including the standard benchmark fixture."""

import numpy as np

from fedlab.datasets import SyntheticSpec, make_benchmark
from fedlab.federation import FederationConfig, dirichlet_partition, init_server
from fedlab.model import ModelConfig, init_adapters, pretrain

STANDARD_SEED = 0

# the seeded 8-class task behind the trend and similarity criteria: pretrain
# on the shifted source blobs, then federate the target task across 20
# heterogeneous clients
STANDARD_TASK = SyntheticSpec(
    num_classes=8,
    input_dim=16,
    train_per_class=400,
    test_per_class=125,
    source_per_class=250,
    noise=0.55,
    shift=3.0,
    mean_scale=2.0,
)

STANDARD_MODEL = ModelConfig(input_dim=16, num_classes=8, hidden_dims=(32,), rank=4)


def standard_world(seed=STANDARD_SEED, rounds=60, **fed_overrides):
    """Pretrained layers, fresh adapters, client shards and test split."""
    source, train, test = make_benchmark(STANDARD_TASK, seed=seed)
    layers = pretrain(source.features, source.labels, STANDARD_MODEL, epochs=30, seed=seed)
    adapters = init_adapters(STANDARD_MODEL, seed)
    fed_kwargs = dict(rounds=rounds, num_clients=20, dirichlet_alpha=0.1,
                      local_epochs=3, batch_size=32, optimizer="adamw", lr=1e-4,
                      weight_decay=0.1, seed=seed)
    fed_kwargs.update(fed_overrides)
    fed_cfg = FederationConfig(**fed_kwargs)
    shards = dirichlet_partition(train, fed_cfg.num_clients, fed_cfg.dirichlet_alpha, seed)
    server = init_server(layers, adapters, fed_cfg)
    return server, shards, fed_cfg, test
