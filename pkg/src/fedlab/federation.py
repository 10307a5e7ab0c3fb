"""Federated orchestration: non-IID partitioning, local training, round loop.

Every round the server broadcasts the global adapters, all clients train
locally (full participation by default), the chosen aggregator turns the
collected deltas into a global delta, and the model is evaluated on the
held-out test split. Client work is a pure function of the broadcast
snapshot, its shard, and an RNG stream derived from (seed, round, client),
so rounds may fan out across threads and still aggregate deterministically
in client-index order.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import aggregation, model
from .datasets import LabeledData
from .diagnostics import RoundMetrics
from .errors import NumericError
from .linalg import load_matrix, save_matrix

__all__ = [
    "FederationConfig",
    "ClientUpdate",
    "ServerState",
    "dirichlet_indices",
    "dirichlet_partition",
    "init_server",
    "local_train",
    "run_round",
    "run",
    "save_update",
    "load_updates",
]

logger = logging.getLogger(__name__)

# rng stream tags: pretraining uses 0, adapter init 1 (see model.py)
_PARTITION_STREAM = 2
_CLIENT_STREAM = 3
_SAMPLING_STREAM = 4


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    num_clients: int = 50
    dirichlet_alpha: float = 0.3
    local_epochs: int = 1
    batch_size: int = 32
    client_method: str = "plain"  # plain | fedprox | scaffold
    fedprox_mu: float = 0.0
    optimizer: str = "adamw"  # adamw | sgd
    lr: float = 1e-4
    weight_decay: float = 0.1
    participation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be nonnegative, got {self.rounds}")
        if self.num_clients < 1:
            raise ValueError(f"need at least one client, got {self.num_clients}")
        if not self.dirichlet_alpha > 0:
            raise ValueError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.client_method not in ("plain", "fedprox", "scaffold"):
            raise ValueError(f"unknown client method {self.client_method!r}")
        if self.fedprox_mu < 0:
            raise ValueError(f"fedprox_mu must be nonnegative, got {self.fedprox_mu}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")


@dataclass(frozen=True)
class ClientUpdate:
    """Per-layer (deltaA, deltaB) produced by one client in one round."""

    client_id: int
    deltas: list[tuple[np.ndarray, np.ndarray]]
    control_delta: list[tuple[np.ndarray, np.ndarray]] | None = None


@dataclass(frozen=True)
class ServerState:
    layers: list[model.DenseLayer]
    adapters: list[model.LoRAAdapter]
    round: int = 0
    # scaffold bookkeeping; None unless client_method == "scaffold"
    control: list[tuple[np.ndarray, np.ndarray]] | None = None
    client_controls: list[list[tuple[np.ndarray, np.ndarray]]] | None = None


def _zero_controls(adapters):
    return [(np.zeros_like(ad.a), np.zeros_like(ad.b)) for ad in adapters]


def init_server(layers, adapters, cfg: FederationConfig) -> ServerState:
    scaffold = cfg.client_method == "scaffold"
    return ServerState(
        layers=layers,
        adapters=adapters,
        round=0,
        control=_zero_controls(adapters) if scaffold else None,
        client_controls=[_zero_controls(adapters) for _ in range(cfg.num_clients)]
        if scaffold
        else None,
    )


# ---------------------------------------------------------------------------
# Dirichlet partitioning


def dirichlet_indices(labels, num_clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Split example indices across clients with per-class Dirichlet proportions.

    For each class a proportion vector ~ Dirichlet(alpha * 1) decides how that
    class's examples spread over clients; lower alpha gives more skew. Clients
    left empty are repaired by moving one example at a time from the currently
    largest client, which keeps the partition exhaustive and disjoint.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n < num_clients:
        raise ValueError(f"cannot split {n} examples across {num_clients} clients")
    rng = np.random.default_rng([seed, _PARTITION_STREAM])
    shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(np.int64)
        for cid, chunk in enumerate(np.split(idx, cuts)):
            shards[cid].append(chunk)
    out = [np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
           for parts in shards]
    sizes = np.array([s.size for s in out])
    while sizes.min() == 0:
        donor = int(sizes.argmax())
        needy = int(sizes.argmin())
        out[needy] = np.array([out[donor][-1]])
        out[donor] = out[donor][:-1]
        sizes = np.array([s.size for s in out])
    return out


def dirichlet_partition(data: LabeledData, num_clients: int, alpha: float, seed: int):
    """Client shards of *data*; see :func:`dirichlet_indices`."""
    return [data.subset(idx) for idx in dirichlet_indices(data.labels, num_clients, alpha, seed)]


# ---------------------------------------------------------------------------
# local training


def _copy_adapters(adapters):
    return [model.LoRAAdapter(ad.a.copy(), ad.b.copy()) for ad in adapters]


def local_train(server: ServerState, data: LabeledData, cfg: FederationConfig,
                client_id: int) -> ClientUpdate:
    """Run local epochs from the broadcast adapters; returns the deltas.

    Client variants:
      * ``fedprox``: adds mu * (theta - theta_global) to every adapter
        gradient (the gradient of the proximal penalty).
      * ``scaffold``: steps along g - c_i + c and reports the control-variate
        update dc_i = -c + (theta_global - theta_local) / (K * lr) where K is
        the number of local steps taken.
    """
    rng = np.random.default_rng([cfg.seed, _CLIENT_STREAM, server.round, client_id])
    global_adapters = server.adapters
    adapters = _copy_adapters(global_adapters)
    opt_cfg = model.AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_state = model.init_adamw_state(adapters) if cfg.optimizer == "adamw" else None

    scaffold = cfg.client_method == "scaffold"
    c_server = server.control if scaffold else None
    c_client = server.client_controls[client_id] if scaffold else None

    n = data.num_examples
    steps = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = model.loss_and_grad(
                server.layers, adapters, data.features[:, idx], data.labels[idx]
            )
            if cfg.client_method == "fedprox" and cfg.fedprox_mu != 0.0:
                grads = [
                    (d_a + cfg.fedprox_mu * (ad.a - g.a), d_b + cfg.fedprox_mu * (ad.b - g.b))
                    for (d_a, d_b), ad, g in zip(grads, adapters, global_adapters)
                ]
            elif scaffold:
                grads = [
                    (d_a - ci_a + cs_a, d_b - ci_b + cs_b)
                    for (d_a, d_b), (ci_a, ci_b), (cs_a, cs_b) in zip(grads, c_client, c_server)
                ]
            if opt_state is None:
                adapters = model.sgd_step(adapters, grads, cfg.lr)
            else:
                adapters, opt_state = model.adamw_step(adapters, grads, opt_state, opt_cfg)
            steps += 1

    deltas = [
        (ad.a - g.a, ad.b - g.b) for ad, g in zip(adapters, global_adapters)
    ]
    control_delta = None
    if scaffold:
        scale = 1.0 / (steps * cfg.lr)
        control_delta = [
            (-cs_a - scale * d_a, -cs_b - scale * d_b)
            for (cs_a, cs_b), (d_a, d_b) in zip(c_server, deltas)
        ]
    return ClientUpdate(client_id=client_id, deltas=deltas, control_delta=control_delta)


# ---------------------------------------------------------------------------
# round loop


def _select_clients(cfg: FederationConfig, round_idx: int) -> list[int]:
    if cfg.participation >= 1.0:
        return list(range(cfg.num_clients))
    count = max(1, int(np.ceil(cfg.participation * cfg.num_clients)))
    rng = np.random.default_rng([cfg.seed, _SAMPLING_STREAM, round_idx])
    chosen = rng.choice(cfg.num_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


def run_round(server: ServerState, shards: list[LabeledData], spec,
              cfg: FederationConfig, test: LabeledData, threads: int = 1,
              record_timing: bool = False) -> tuple[ServerState, RoundMetrics]:
    """One broadcast-train-aggregate-evaluate cycle.

    Updates are always combined in client-index order so the result does not
    depend on thread scheduling.
    """
    start = time.perf_counter()
    participants = _select_clients(cfg, server.round)
    train_one = lambda cid: local_train(server, shards[cid], cfg, cid)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(train_one, participants))
    else:
        updates = [train_one(cid) for cid in participants]

    rpca_records = []
    try:
        global_deltas = aggregation.aggregate(updates, spec, rpca_records)
    except NumericError as exc:
        raise NumericError(f"aggregation failed in round {server.round}: {exc}") from exc

    new_adapters = [
        model.LoRAAdapter(ad.a + d_a, ad.b + d_b)
        for ad, (d_a, d_b) in zip(server.adapters, global_deltas)
    ]

    control = server.control
    client_controls = server.client_controls
    if cfg.client_method == "scaffold":
        client_controls = [list(c) for c in client_controls]
        for update in updates:
            client_controls[update.client_id] = [
                (ci_a + dc_a, ci_b + dc_b)
                for (ci_a, ci_b), (dc_a, dc_b) in zip(
                    client_controls[update.client_id], update.control_delta
                )
            ]
        # recompute the server variate as the mean of the client variates so
        # the bookkeeping invariant c == mean(c_i) holds exactly
        control = [
            (
                sum(c[k][0] for c in client_controls) / cfg.num_clients,
                sum(c[k][1] for c in client_controls) / cfg.num_clients,
            )
            for k in range(len(server.adapters))
        ]

    accuracy, loss = model.evaluate(server.layers, new_adapters, test.features, test.labels)
    elapsed = time.perf_counter() - start if record_timing else 0.0
    metrics = RoundMetrics(
        round=server.round,
        aggregator=spec.kind,
        test_accuracy=accuracy,
        test_loss=loss,
        wall_seconds=elapsed,
        rpca=tuple(rpca_records),
    )
    new_server = replace(
        server,
        adapters=new_adapters,
        round=server.round + 1,
        control=control,
        client_controls=client_controls,
    )
    return new_server, metrics


def run(server: ServerState, shards: list[LabeledData], spec, cfg: FederationConfig,
        test: LabeledData, threads: int = 1, record_timing: bool = False,
        dump_updates_round: int | None = None, dump_dir=None):
    """Drive ``cfg.rounds`` rounds; returns (final server, list of RoundMetrics).

    The pre-training accuracy is logged (as round -1) but not recorded in the
    returned series, whose round indices start at 0.
    """
    accuracy, loss = model.evaluate(server.layers, server.adapters, test.features, test.labels)
    logger.info("round -1 (initial): accuracy=%.4f loss=%.4f", accuracy, loss)
    series = []
    for _ in range(cfg.rounds):
        if dump_updates_round is not None and server.round == dump_updates_round:
            for cid in _select_clients(cfg, server.round):
                save_update(dump_dir, local_train(server, shards[cid], cfg, cid))
        server, metrics = run_round(
            server, shards, spec, cfg, test, threads=threads, record_timing=record_timing
        )
        logger.info(
            "round %d: accuracy=%.4f loss=%.4f", metrics.round, metrics.test_accuracy,
            metrics.test_loss,
        )
        series.append(metrics)
    return server, series


# ---------------------------------------------------------------------------
# update dumps (offline similarity diagnostics)


def save_update(directory, update: ClientUpdate) -> None:
    """Dump one client's deltas as matrix files under client_<id>/."""
    root = Path(directory) / f"client_{update.client_id:04d}"
    root.mkdir(parents=True, exist_ok=True)
    for k, (d_a, d_b) in enumerate(update.deltas):
        save_matrix(root / f"layer{k:02d}_dA.txt", d_a)
        save_matrix(root / f"layer{k:02d}_dB.txt", d_b)


def load_updates(directory) -> list[ClientUpdate]:
    """Load every client_* dump under *directory*, ordered by client id."""
    root = Path(directory)
    updates = []
    for sub in sorted(root.glob("client_*")):
        match = re.fullmatch(r"client_(\d+)", sub.name)
        if match is None or not sub.is_dir():
            continue
        deltas = []
        for k in range(len(list(sub.glob("layer*_dA.txt")))):
            deltas.append(
                (load_matrix(sub / f"layer{k:02d}_dA.txt"), load_matrix(sub / f"layer{k:02d}_dB.txt"))
            )
        if not deltas:
            raise ValueError(f"no layer files in {sub}")
        updates.append(ClientUpdate(client_id=int(match.group(1)), deltas=deltas))
    return updates
