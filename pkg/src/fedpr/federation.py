"""Synchronous federation rounds: distribute the global model (and, for
fedpr, the global prototypes), run local SGD on every client, then
data-size-weighted model averaging and prototype aggregation.

Every random draw comes from a stream derived from (master_seed, purpose,
client, round), so a run is a pure function of its configuration.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import data as datamod
from .data import ClientShard, Dataset
from .errors import ConfigError, DimensionError, DivergenceError
from .evaluation import EVAL_MODES, evaluate_accuracy
from .nn import (
    ModelParams,
    OptimizerState,
    build_cnn4,
    build_mlp2,
    loss_and_grad,
    sgd_momentum_step,
)
from .prototypes import GlobalPrototypeSet, Prototype, aggregate_global_prototypes, compute_local_prototypes

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedpr")
MODELS = ("cnn4", "mlp2")
DATASETS = ("mnist", "fashion", "synthetic")
AGG_DENOMINATORS = ("contributors", "all_clients")
PROTO_LOSS_FORMS = ("squared", "unsquared")

# Purpose tags for deriving independent RNG streams from the master seed.
_STREAM_INIT = 1
_STREAM_SUBSAMPLE = 2
_STREAM_PARTITION = 3
_STREAM_CLIENT = 4
_STREAM_SYNTH_TRAIN = 5
_STREAM_SYNTH_TEST = 6


@dataclass
class FederationConfig:
    """Every knob of one experiment. Defaults follow the reference setup."""

    num_clients: int = 10
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.5
    dirichlet_alpha: float = 0.05
    lam: float = 1.0
    strategy: str = "fedpr"
    model: str = "cnn4"
    master_seed: int = 0
    dataset: str = "mnist"
    data_dir: str = "data"
    subsample_n: int = 2000
    agg_denominator: str = "contributors"
    support_weighted_protos: bool = False
    proto_loss_form: str = "squared"
    eval_inference: str = "both"
    synth_classes: int = 10
    synth_dim: int = 32
    synth_per_class: int = 250
    synth_test_per_class: int = 50
    synth_spread: float = 0.1

    def validate(self) -> "FederationConfig":
        def check(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        check(self.num_clients >= 1, "num_clients", f"must be >= 1, got {self.num_clients}")
        check(self.rounds >= 1, "rounds", f"must be >= 1, got {self.rounds}")
        check(self.local_epochs >= 1, "local_epochs", f"must be >= 1, got {self.local_epochs}")
        check(self.batch_size >= 1, "batch_size", f"must be >= 1, got {self.batch_size}")
        check(self.learning_rate > 0, "learning_rate", f"must be > 0, got {self.learning_rate}")
        check(0 <= self.momentum < 1, "momentum", f"must be in [0, 1), got {self.momentum}")
        check(self.dirichlet_alpha > 0, "dirichlet_alpha", f"must be > 0, got {self.dirichlet_alpha}")
        check(self.lam >= 0, "lambda", f"must be >= 0, got {self.lam}")
        check(self.master_seed >= 0, "seed", f"must be a non-negative integer, got {self.master_seed}")
        check(self.subsample_n >= 1, "subsample_n", f"must be >= 1, got {self.subsample_n}")
        check(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}, got {self.strategy!r}")
        check(self.model in MODELS, "model", f"must be one of {MODELS}, got {self.model!r}")
        check(self.dataset in DATASETS, "dataset", f"must be one of {DATASETS}, got {self.dataset!r}")
        check(
            self.agg_denominator in AGG_DENOMINATORS,
            "agg_denominator",
            f"must be one of {AGG_DENOMINATORS}, got {self.agg_denominator!r}",
        )
        check(
            self.proto_loss_form in PROTO_LOSS_FORMS,
            "proto_loss_form",
            f"must be one of {PROTO_LOSS_FORMS}, got {self.proto_loss_form!r}",
        )
        check(
            self.eval_inference in EVAL_MODES,
            "eval_inference",
            f"must be one of {EVAL_MODES}, got {self.eval_inference!r}",
        )
        if self.strategy == "fedavg":
            check(self.lam == 0.0, "lambda", "strategy=fedavg forces lambda=0")
            check(
                self.eval_inference == "softmax",
                "eval_inference",
                "fedavg produces no prototypes; only softmax inference is available",
            )
        check(self.synth_classes >= 2, "synth_classes", f"must be >= 2, got {self.synth_classes}")
        check(self.synth_dim >= 1, "synth_dim", f"must be >= 1, got {self.synth_dim}")
        check(self.synth_per_class >= 1, "synth_per_class", f"must be >= 1, got {self.synth_per_class}")
        check(
            self.synth_test_per_class >= 1,
            "synth_test_per_class",
            f"must be >= 1, got {self.synth_test_per_class}",
        )
        check(self.synth_spread >= 0, "synth_spread", f"must be >= 0, got {self.synth_spread}")
        return self

    def replace(self, **changes) -> "FederationConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return FederationConfig(**values)


@dataclass
class ClientState:
    """Per-client bookkeeping for one experiment."""

    client_id: int
    shard: ClientShard
    params: ModelParams | None = None
    optimizer: OptimizerState | None = None
    rng_stream: np.random.Generator | None = None


@dataclass
class RoundRecord:
    """Metrics for one communication round."""

    round_index: int
    mean_train_loss: float
    test_accuracy_softmax: float | None
    test_accuracy_prototype: float | None
    wall_time_ms: float | None = None


def client_rng(master_seed: int, client_id: int, round_index: int) -> np.random.Generator:
    """Deterministic per-(client, round) stream; injective in its inputs."""
    return np.random.default_rng([master_seed, _STREAM_CLIENT, client_id, round_index])


def client_local_update(
    state: ClientState,
    global_params: ModelParams,
    global_protos: GlobalPrototypeSet,
    cfg: FederationConfig,
    train_data: Dataset,
    round_index: int = 0,
) -> tuple[ModelParams, list[Prototype], float]:
    """E epochs of mini-batch SGD from the global model, then local prototypes.

    The shard is reshuffled every epoch from the client's stream; the last
    partial batch is trained on as-is. Global prototypes stay fixed for
    the whole update. Returns (params, prototypes, final-epoch mean loss).
    """
    indices = state.shard.indices
    if not len(indices):
        raise ValueError(f"client {state.client_id}: empty shard")
    rng = state.rng_stream
    if rng is None:
        raise ValueError(f"client {state.client_id}: rng_stream not initialized")

    params = global_params.copy()
    # Fresh momentum buffers every round: clients start from a new global
    # model, so stale velocity would mix optimization states.
    opt = OptimizerState.zeros(params, cfg.learning_rate, cfg.momentum)
    is_fedpr = cfg.strategy == "fedpr"
    lam = cfg.lam if is_fedpr else 0.0
    protos_for_loss = global_protos if is_fedpr else None

    epoch_loss = 0.0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(indices))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = indices[order[start : start + cfg.batch_size]]
            report = loss_and_grad(
                params,
                train_data.images[batch_idx],
                train_data.labels[batch_idx],
                protos_for_loss,
                lam,
                cfg.proto_loss_form,
            )
            if not math.isfinite(report.total_loss):
                raise DivergenceError(
                    f"client {state.client_id} diverged in round {round_index}: "
                    f"loss={report.total_loss}"
                )
            params, opt = sgd_momentum_step(params, report.grads, opt)
            epoch_loss += report.total_loss * len(batch_idx)
    train_loss = epoch_loss / len(indices)

    protos = compute_local_prototypes(params, train_data, state.shard) if is_fedpr else []
    return params, protos, train_loss


def server_weighted_average(
    updates: Sequence[tuple[ModelParams, float]], client_ids=None
) -> ModelParams:
    """Element-wise average with weights D_i / sum(D_i).

    Weights are normalized first and the sum runs in client-id order, so
    the result is exactly invariant to the order updates arrive in.
    """
    updates = list(updates)
    if not updates:
        raise ValueError("server_weighted_average needs at least one update")
    total = float(sum(weight for _, weight in updates))
    if total <= 0:
        raise ValueError(f"total update weight must be positive, got {total}")
    if client_ids is None:
        client_ids = list(range(len(updates)))
    order = sorted(range(len(updates)), key=lambda i: client_ids[i])

    reference = updates[order[0]][0]
    out = None
    for i in order:
        params, weight = updates[i]
        if not params.same_structure(reference):
            raise DimensionError("cannot average models with different layer structure")
        w = weight / total
        if out is None:
            out = params.copy()
            for layer in out.layers:
                layer.weight *= w
                layer.bias *= w
        else:
            for acc, layer in zip(out.layers, params.layers):
                acc.weight += w * layer.weight
                acc.bias += w * layer.bias
    return out


def run_round(
    global_params: ModelParams,
    global_protos: GlobalPrototypeSet,
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    round_index: int,
    train_data: Dataset,
    test_data: Dataset,
) -> tuple[ModelParams, GlobalPrototypeSet, RoundRecord]:
    """One synchronous round against a fixed (params, prototypes) snapshot.

    All clients see the same inputs; aggregation happens once, after the
    last client finishes. Clients with empty shards are skipped (averaged
    with weight 0).
    """
    start = time.perf_counter()
    results = []  # (client_id, params, prototypes, loss, weight)
    for state in clients:
        if not len(state.shard):
            continue
        state.rng_stream = client_rng(cfg.master_seed, state.client_id, round_index)
        params_i, protos_i, loss_i = client_local_update(
            state, global_params, global_protos, cfg, train_data, round_index
        )
        state.params = params_i
        results.append((state.client_id, params_i, protos_i, loss_i, float(len(state.shard))))
    if not results:
        raise ValueError("no client has any data; nothing to aggregate")
    # Reduce in client-id order so the outcome is exactly independent of
    # the schedule the clients ran in.
    results.sort(key=lambda r: r[0])

    ids = [r[0] for r in results]
    new_params = server_weighted_average([(r[1], r[4]) for r in results], client_ids=ids)
    if cfg.strategy == "fedpr":
        new_protos = aggregate_global_prototypes(
            [r[2] for r in results],
            round_index=round_index,
            denominator=cfg.agg_denominator,
            support_weighted=cfg.support_weighted_protos,
            client_ids=ids,
        )
    else:
        new_protos = GlobalPrototypeSet.empty(round_index)

    total_weight = sum(r[4] for r in results)
    mean_train_loss = sum((r[4] / total_weight) * r[3] for r in results)

    mode = cfg.eval_inference
    if cfg.strategy == "fedavg" or not len(new_protos):
        mode = "softmax"
    report = evaluate_accuracy(new_params, new_protos, test_data, mode)
    wall_ms = (time.perf_counter() - start) * 1000.0
    record = RoundRecord(
        round_index,
        mean_train_loss,
        report.accuracy_softmax,
        report.accuracy_prototype,
        wall_ms,
    )
    return new_params, new_protos, record


def load_experiment_data(cfg: FederationConfig) -> tuple[Dataset, Dataset]:
    """Resolve (train, test) datasets for a config; synthetic is generated."""
    if cfg.dataset == "synthetic":
        train = datamod.synthetic_blobs(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_per_class,
            cfg.synth_spread,
            [cfg.master_seed, _STREAM_SYNTH_TRAIN],
        )
        test = datamod.synthetic_blobs(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_test_per_class,
            cfg.synth_spread,
            [cfg.master_seed, _STREAM_SYNTH_TEST],
        )
    else:
        train = datamod.load_idx_dataset(cfg.data_dir, cfg.dataset, "train")
        test = datamod.load_idx_dataset(cfg.data_dir, cfg.dataset, "test")
    if cfg.model == "cnn4":
        train = _as_images(train, "train")
        test = _as_images(test, "test")
    return train, test


def _as_images(dataset: Dataset, which: str) -> Dataset:
    if dataset.images.ndim == 4:
        return dataset
    if dataset.images.ndim == 2 and dataset.images.shape[1] == 28 * 28:
        return Dataset(
            dataset.images.reshape(-1, 1, 28, 28), dataset.labels, dataset.num_classes
        )
    raise ConfigError(
        f"model: cnn4 needs [n,1,28,28] images (or flat 784 vectors); "
        f"{which} data has shape {dataset.images.shape}"
    )


def prepare_partition(cfg: FederationConfig) -> tuple[Dataset, Dataset, list[ClientShard]]:
    """Load, subsample, and partition exactly as run_experiment does."""
    train, test = load_experiment_data(cfg)
    train = datamod.subsample(train, cfg.subsample_n, [cfg.master_seed, _STREAM_SUBSAMPLE])
    shards = datamod.dirichlet_partition(
        train.labels, cfg.num_clients, cfg.dirichlet_alpha, [cfg.master_seed, _STREAM_PARTITION]
    )
    return train, test, shards


def init_global_model(cfg: FederationConfig, train: Dataset) -> ModelParams:
    rng = np.random.default_rng([cfg.master_seed, _STREAM_INIT])
    if cfg.model == "cnn4":
        return build_cnn4(rng, num_classes=train.num_classes)
    in_dim = int(np.prod(train.images.shape[1:]))
    return build_mlp2(rng, in_dim, train.num_classes)


def run_experiment(
    cfg: FederationConfig, progress: Callable[[RoundRecord], None] | None = None
) -> list[RoundRecord]:
    """Full training loop: T rounds from a fresh model and empty prototypes."""
    cfg.validate()
    train, test, shards = prepare_partition(cfg)
    empty = [s.client_id for s in shards if not len(s)]
    if empty:
        log.info("clients with empty shards (skipped in averaging): %s", empty)

    params = init_global_model(cfg, train)
    protos = GlobalPrototypeSet.empty(0)
    clients = [ClientState(shard.client_id, shard) for shard in shards]
    records = []
    for t in range(1, cfg.rounds + 1):
        params, protos, record = run_round(params, protos, clients, cfg, t, train, test)
        records.append(record)
        if progress is not None:
            progress(record)
    return records
