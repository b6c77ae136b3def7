"""Training loops: the hierarchical algorithm and the flat FL baselines.

One round of the hierarchical loop: every client re-initializes from a
decaying blend of its ancestor group models, runs a few epochs of proximal
SGD against those ancestors, then (every tau rounds) the server re-clusters
the clients and finally re-averages every group model bottom-up.  FedAvg and
FedProx broadcast a single global model instead and aggregate with
sample-count (or agent-count) weights.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import clustering, hierarchy
from .clustering import Dendrogram, LevelAssignment
from .data import ClientShard, ConfigurationError, Dataset, concat_datasets, load_idx, partition_shards, synthetic_dataset
from .hierarchy import HierarchyTree, anchors_for, build_tree, generalized_blend, group_average, propagate_up
from .metrics import RoundMetrics, round_metrics
from .models import LOGISTIC, MLP, Batch, ModelSpec, ProxAnchor, init_params, local_solve

ALGORITHMS = ("demlearn", "demlearn-p", "fedavg", "fedprox")
HIERARCHICAL = ("demlearn", "demlearn-p")
DATA_DIR_ENV = "DEMLEARN_DATA_DIR"

# stream tags for per-purpose rng derivation from the run seed
_INIT_STREAM = 0
_CLIENT_STREAM = 1


@dataclass
class RunConfig:
    """Everything a run depends on; metric history is a pure function of this."""

    algorithm: str = "demlearn"
    rounds: int = 60
    k_levels: int = 4
    tau: int = 2
    mu: float = 0.0
    beta0: float = 1.0
    beta_decay: float = 0.995
    beta_min: float = 0.5
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.1
    metric: str = clustering.WEIGHT_METRIC
    fixed_structure: bool = False
    fedavg_weighting: str = "sample"  # or "agent"
    seed: int = 42
    # model
    model_kind: str = LOGISTIC
    hidden_dim: int = 32
    # data
    data_source: str = "synthetic"  # or "idx"
    data_dir: str = "data"
    data_seed: int = 17
    n_clients: int = 50
    labels_per_client: int = 2
    samples_per_client: int = 80
    test_frac: float = 0.2
    # synthetic source
    num_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 400
    class_separation: float = 6.0

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "demlearn" and self.mu != 0.0:
            raise ConfigurationError(
                "demlearn requires mu = 0 (use algorithm=demlearn-p for mu > 0)"
            )
        if self.algorithm == "demlearn-p" and self.mu <= 0.0:
            raise ConfigurationError("demlearn-p requires mu > 0")
        if self.algorithm == "fedavg" and self.mu != 0.0:
            raise ConfigurationError("fedavg takes no proximal term (mu must be 0)")
        if self.algorithm == "fedprox" and self.mu < 0.0:
            raise ConfigurationError("fedprox requires mu >= 0")
        if self.k_levels < 1:
            raise ConfigurationError("k_levels must be at least 1")
        if self.tau < 1:
            raise ConfigurationError("tau must be at least 1")
        if not 0.0 <= self.beta0 <= 1.0:
            raise ConfigurationError("beta0 must lie in [0, 1]")
        if not 0.0 <= self.beta_decay <= 1.0:
            raise ConfigurationError("beta_decay must lie in [0, 1]")
        if not 0.0 <= self.beta_min <= 1.0:
            raise ConfigurationError("beta_min must lie in [0, 1]")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.lr < 0.0:
            raise ConfigurationError("lr must be non-negative")
        if self.metric not in (clustering.WEIGHT_METRIC, clustering.GRADIENT_METRIC):
            raise ConfigurationError(f"unknown clustering metric {self.metric!r}")
        if self.fedavg_weighting not in ("sample", "agent"):
            raise ConfigurationError("fedavg_weighting must be 'sample' or 'agent'")
        if self.model_kind not in (LOGISTIC, MLP):
            raise ConfigurationError(f"unknown model kind {self.model_kind!r}")
        if self.data_source not in ("synthetic", "idx"):
            raise ConfigurationError(f"unknown data source {self.data_source!r}")


@dataclass
class ClientState:
    """One agent: its data shard, personalized model, and last update delta."""

    id: int
    shard: ClientShard
    w0: np.ndarray
    last_delta: Optional[np.ndarray] = None

    @property
    def train_batch(self) -> Batch:
        return Batch(self.shard.train.features, self.shard.train.labels)


@dataclass
class RoundState:
    """Mutable loop state; `tree` for the hierarchical loop, `global_model` for baselines."""

    t: int
    clients: list[ClientState]
    spec: ModelSpec
    union_test: Dataset
    tree: Optional[HierarchyTree] = None
    global_model: Optional[np.ndarray] = None
    dendrogram: Optional[Dendrogram] = None
    metrics: Optional[RoundMetrics] = None


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    state: RoundState
    dendrograms: list[tuple[int, Dendrogram]] = field(default_factory=list)
    tree_snapshots: list[tuple[int, str]] = field(default_factory=list)


def beta_schedule(t: int, cfg: RunConfig) -> float:
    """Geometric decay with a floor: max(beta_min, beta0 * beta_decay^t)."""
    if t < 0:
        raise ValueError("round index must be non-negative")
    if not 0.0 <= cfg.beta0 <= 1.0:
        raise ConfigurationError("beta0 must lie in [0, 1]")
    if cfg.beta0 == 0.0:
        return 0.0
    return max(cfg.beta_min, cfg.beta0 * cfg.beta_decay**t)


def local_init(client: ClientState, tree: HierarchyTree, beta_t: float) -> np.ndarray:
    """Blend the client's prior model with its ancestors' generalized mix."""
    if beta_t == 0.0:
        return client.w0.copy()
    blend, _ = generalized_blend(tree, client.id)
    if beta_t == 1.0:
        return blend
    return (1.0 - beta_t) * client.w0 + beta_t * blend


def _client_rng(cfg: RunConfig, client_id: int, t: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _CLIENT_STREAM, client_id, t])


def _client_models(clients: list[ClientState]) -> dict[int, np.ndarray]:
    return {c.id: c.w0 for c in clients}


def _rebuild_structure(
    clients: list[ClientState], cfg: RunConfig, metric: Optional[str] = None
) -> tuple[HierarchyTree, Optional[Dendrogram]]:
    """Cluster clients and cut the dendrogram into a K-level tree."""
    metric = metric or cfg.metric
    if len(clients) == 1:
        # clustering needs two points; a lone client forms every group itself
        assign = LevelAssignment(
            cfg.k_levels,
            {level: [[clients[0].id]] for level in range(1, cfg.k_levels + 1)},
        )
        return build_tree(assign, _client_models(clients)), None
    dm = clustering.build_distance_matrix(clients, metric)
    dend = clustering.agglomerate(dm)
    assign = clustering.truncate(dend, cfg.k_levels)
    return build_tree(assign, _client_models(clients)), dend


def run_round(state: RoundState, cfg: RunConfig) -> RoundState:
    """One global round of the hierarchical loop.

    Order: client re-init and local proximal solve, delta recording, periodic
    restructuring, bottom-up model propagation, metrics.
    """
    spec = state.spec
    beta_t = beta_schedule(state.t, cfg)
    for client in state.clients:
        w_start = local_init(client, state.tree, beta_t)
        anchors = anchors_for(state.tree, client.id)
        w_new = local_solve(
            spec,
            w_start,
            client.train_batch,
            anchors,
            cfg.mu,
            cfg.epochs,
            cfg.batch_size,
            cfg.lr,
            _client_rng(cfg, client.id, state.t),
        )
        client.last_delta = (
            (w_new - w_start) / cfg.lr if cfg.lr > 0 else np.zeros_like(w_new)
        )
        client.w0 = w_new

    # fixed mode keeps the structure that exists at t=0 (built from the
    # initial models) so group membership is constant across all rounds
    rebuild_due = (not cfg.fixed_structure) and state.t % cfg.tau == 0
    if rebuild_due:
        state.tree, state.dendrogram = _rebuild_structure(state.clients, cfg)
    propagate_up(state.tree, _client_models(state.clients))

    state.metrics = round_metrics(
        spec, state.t, state.clients, state.union_test, tree=state.tree
    )
    state.t += 1
    return state


def _baseline_round(state: RoundState, cfg: RunConfig, anchored: bool) -> RoundState:
    spec = state.spec
    broadcast = state.global_model
    anchors = [ProxAnchor(broadcast, 1.0)] if anchored else []
    mu = cfg.mu if anchored else 0.0
    for client in state.clients:
        w_start = broadcast.copy()
        w_new = local_solve(
            spec,
            w_start,
            client.train_batch,
            anchors,
            mu,
            cfg.epochs,
            cfg.batch_size,
            cfg.lr,
            _client_rng(cfg, client.id, state.t),
        )
        client.last_delta = (
            (w_new - w_start) / cfg.lr if cfg.lr > 0 else np.zeros_like(w_new)
        )
        client.w0 = w_new
    state.global_model = _aggregate(state.clients, cfg)
    state.metrics = round_metrics(
        spec, state.t, state.clients, state.union_test, global_model=state.global_model
    )
    state.t += 1
    return state


def fedavg_round(state: RoundState, cfg: RunConfig) -> RoundState:
    """Broadcast, local SGD on the plain loss, weighted average."""
    return _baseline_round(state, cfg, anchored=False)


def fedprox_round(state: RoundState, cfg: RunConfig) -> RoundState:
    """FedAvg round with a single global proximal anchor (coeff 1)."""
    return _baseline_round(state, cfg, anchored=True)


def _aggregate(clients: list[ClientState], cfg: RunConfig) -> np.ndarray:
    if cfg.fedavg_weighting == "sample":
        counts = [len(c.shard.train) for c in clients]
    else:
        counts = [1] * len(clients)
    return group_average([c.w0 for c in clients], counts)


def build_client_data(cfg: RunConfig) -> list[ClientShard]:
    """Load or synthesize the corpus and partition it into client shards."""
    if cfg.data_source == "synthetic":
        ds = synthetic_dataset(
            cfg.num_classes,
            cfg.input_dim,
            cfg.samples_per_class,
            cfg.class_separation,
            cfg.data_seed,
        )
    else:
        ds = load_idx(*resolve_idx_paths(cfg.data_dir))
    return partition_shards(
        ds,
        cfg.n_clients,
        cfg.labels_per_client,
        cfg.samples_per_client,
        cfg.test_frac,
        cfg.data_seed,
    )


def resolve_idx_paths(data_dir: str) -> tuple[str, str]:
    """Locate the standard training IDX pair, honoring the data-dir env var."""
    base = os.environ.get(DATA_DIR_ENV, data_dir)
    images = os.path.join(base, "train-images-idx3-ubyte")
    labels = os.path.join(base, "train-labels-idx1-ubyte")
    if not os.path.exists(images) and os.path.exists(images + ".gz"):
        images += ".gz"
    if not os.path.exists(labels) and os.path.exists(labels + ".gz"):
        labels += ".gz"
    return images, labels


def initial_state(cfg: RunConfig) -> RoundState:
    """Shards, identical client inits, and the bootstrap structure."""
    cfg.validate()
    shards = build_client_data(cfg)
    sample = shards[0].train
    spec = ModelSpec(
        cfg.model_kind,
        sample.input_dim,
        sample.num_classes,
        cfg.hidden_dim if cfg.model_kind == MLP else 0,
    )
    w_init = init_params(spec, np.random.default_rng([cfg.seed, _INIT_STREAM]))
    clients = [ClientState(s.client_id, s, w_init.copy()) for s in shards]
    union_test = concat_datasets([s.test for s in shards])
    state = RoundState(0, clients, spec, union_test)
    if cfg.algorithm in HIERARCHICAL:
        # bootstrap structure from the (identical) initial models; every
        # distance is zero so the cut is the deterministic lowest-index one
        state.tree, _ = _rebuild_structure(clients, cfg, metric=clustering.WEIGHT_METRIC)
    else:
        state.global_model = _aggregate(clients, cfg)
    return state


ROUND_FN = {
    "demlearn": run_round,
    "demlearn-p": run_round,
    "fedavg": fedavg_round,
    "fedprox": fedprox_round,
}


def run(cfg: RunConfig, record_structures: bool = False) -> RunResult:
    """Execute the configured number of rounds and collect the metric history."""
    state = initial_state(cfg)
    result = RunResult([], state)
    step = ROUND_FN[cfg.algorithm]
    for _ in range(cfg.rounds):
        t_before = state.t
        step(state, cfg)
        result.metrics.append(state.metrics)
        if record_structures and state.tree is not None:
            if state.dendrogram is not None and _rebuilt_at(cfg, t_before):
                result.dendrograms.append((t_before, state.dendrogram))
            result.tree_snapshots.append(
                (t_before, hierarchy.format_tree(state.tree))
            )
    return result


def _rebuilt_at(cfg: RunConfig, t: int) -> bool:
    return (not cfg.fixed_structure) and t % cfg.tau == 0
