"""Coordinator-driven federated averaging over simulated clients.

Each round every client fetches the current global model, trains on its
private shard, and pushes an update.  The coordinator aggregates as soon as
the last update arrives, evaluates the new global model on the pooled train
and test sets, records metrics, and advances the round counter.  A client
failure surfaces as an error and aborts the round: no partial aggregation.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import ClientShard, TokenizedPair
from .seeding import subseed
from .serialize import save_params
from .training import ClientUpdate, DivergenceError, TrainConfig, evaluate, local_train

Array = np.ndarray

AGGREGATION_MODES = ("weighted", "uniform")
TRANSPORTS = ("in_process", "socket")


class FederationError(Exception):
    """A federated run cannot proceed; the message names client and round."""

    retryable = False


class RoundMismatchError(FederationError):
    """An update or fetch referenced a round the coordinator already left."""


class NotReadyError(FederationError):
    """The coordinator has not reached the requested round yet; retry later."""

    retryable = True


@dataclass(frozen=True)
class FederatedConfig:
    num_clients: int = 5
    num_rounds: int = 30
    aggregation: str = "weighted"
    transport: str = "in_process"
    host: str = "127.0.0.1"
    port: int = 0
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.num_clients < 1:
            raise T.ContractError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.num_rounds < 1:
            raise T.ContractError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.aggregation not in AGGREGATION_MODES:
            raise T.ContractError(
                f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}"
            )
        if self.transport not in TRANSPORTS:
            raise T.ContractError(
                f"transport must be one of {TRANSPORTS}, got {self.transport!r}"
            )


@dataclass(frozen=True)
class RoundMetrics:
    """Everything logged for one completed round (1-based index)."""

    round_index: int
    client_train_losses: dict[int, float]
    client_test_losses: dict[int, float]
    client_sample_counts: dict[int, int]
    global_train_loss: float
    global_test_loss: float


@dataclass(frozen=True)
class GlobalState:
    """The coordinator's view after ``round_index`` completed rounds."""

    round_index: int
    global_params: M.ModelParams
    history: list[RoundMetrics]


def aggregate(updates: Sequence[ClientUpdate], mode: str = "weighted") -> M.ModelParams:
    """Average client parameters, weighted by sample counts or uniformly.

    Updates are summed in ascending client id order so the result does not
    depend on arrival order.
    """
    if not updates:
        raise T.ContractError("cannot aggregate zero updates")
    if mode not in AGGREGATION_MODES:
        raise T.ContractError(f"aggregation must be one of {AGGREGATION_MODES}, got {mode!r}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise FederationError(f"duplicate client ids in updates: {sorted(ids)}")
    dims = updates[0].params.dims
    for u in updates:
        if u.params.dims != dims:
            raise T.DimensionError(
                f"client {u.client_id} params have dims {u.params.dims}, expected {dims}"
            )
        if u.sample_count < 1:
            raise T.ContractError(f"client {u.client_id} reports sample_count {u.sample_count}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    if mode == "weighted":
        total = sum(u.sample_count for u in ordered)
        weights = [u.sample_count / total for u in ordered]
    else:
        weights = [1.0 / len(ordered)] * len(ordered)
    out: dict[str, Array] = {}
    for name in ordered[0].params.named_arrays():
        acc = None
        for u, w in zip(ordered, weights):
            term = w * u.params.named_arrays()[name]
            acc = term if acc is None else acc + term
        out[name] = acc
    return M.ModelParams.from_arrays(dims, out)


class Coordinator:
    """Thread-safe holder of the global model and the round lifecycle.

    ``push_update`` completes the round when the last expected update
    arrives: aggregate, evaluate on the pooled sets, record metrics, advance.
    Transports call the same three entry points the in-process channel uses,
    so the aggregation arithmetic is identical either way.
    """

    def __init__(
        self,
        params: M.ModelParams,
        config: FederatedConfig,
        eval_train: Sequence[TokenizedPair],
        eval_test: Sequence[TokenizedPair],
        round_hook: Callable[[int, M.ModelParams, RoundMetrics], None] | None = None,
        start_round: int = 0,
    ):
        self._lock = threading.Lock()
        self._config = config
        self._params = params
        self._eval_train = list(eval_train)
        self._eval_test = list(eval_test)
        self._round_hook = round_hook
        self._round_index = start_round  # completed rounds so far
        self._updates: dict[int, ClientUpdate] = {}
        self.history: list[RoundMetrics] = []

    @property
    def config(self) -> FederatedConfig:
        return self._config

    def get_global(self, round_index: int | None = None) -> tuple[int, M.ModelParams]:
        """Return the current round and parameters.

        With ``round_index`` the caller pins which round it wants to start
        from: a round the coordinator has not reached is not ready yet, and a
        round it already left is gone for good.
        """
        with self._lock:
            current = self._round_index
            if round_index is not None and round_index != current:
                if round_index > current:
                    raise NotReadyError(
                        f"round {round_index} not reached yet, coordinator is at {current}"
                    )
                raise RoundMismatchError(
                    f"round {round_index} already completed, coordinator is at {current}"
                )
            return current, self._params

    def status(self) -> dict:
        with self._lock:
            return {
                "round_index": self._round_index,
                "num_rounds": self._config.num_rounds,
                "updates_received": len(self._updates),
                "num_clients": self._config.num_clients,
                "finished": self._round_index >= self._config.num_rounds,
            }

    def push_update(self, round_index: int, update: ClientUpdate) -> int:
        """Record one client's update; returns the round it was counted for."""
        with self._lock:
            if round_index != self._round_index:
                raise RoundMismatchError(
                    f"update for round {round_index}, coordinator is at round {self._round_index}"
                )
            if not 0 <= update.client_id < self._config.num_clients:
                raise FederationError(
                    f"client id {update.client_id} outside 0..{self._config.num_clients - 1}"
                )
            if update.client_id in self._updates:
                raise FederationError(
                    f"client {update.client_id} already pushed for round {round_index}"
                )
            self._updates[update.client_id] = update
            if len(self._updates) == self._config.num_clients:
                self._complete_round_locked()
            return round_index

    def _complete_round_locked(self) -> None:
        updates = [self._updates[k] for k in sorted(self._updates)]
        new_global = aggregate(updates, self._config.aggregation)
        metrics = RoundMetrics(
            round_index=self._round_index + 1,
            client_train_losses={u.client_id: u.mean_train_loss for u in updates},
            client_test_losses={u.client_id: u.mean_test_loss for u in updates},
            client_sample_counts={u.client_id: u.sample_count for u in updates},
            global_train_loss=evaluate(new_global, self._eval_train),
            global_test_loss=evaluate(new_global, self._eval_test),
        )
        self._params = new_global
        self._round_index += 1
        self._updates.clear()
        self.history.append(metrics)
        if self._round_hook is not None:
            self._round_hook(self._round_index, new_global, metrics)


class DirectChannel:
    """In-process client view of the coordinator (no serialization)."""

    def __init__(self, coordinator: Coordinator):
        self._coordinator = coordinator

    def fetch_global(self, round_index: int | None = None) -> tuple[int, M.ModelParams]:
        return self._coordinator.get_global(round_index)

    def push_update(self, round_index: int, update: ClientUpdate) -> int:
        return self._coordinator.push_update(round_index, update)

    def status(self) -> dict:
        return self._coordinator.status()

    def close(self) -> None:
        pass


def client_round_seed(seed: int, round_index: int, client_id: int) -> int:
    """Every (round, client) pair trains from its own derived stream."""
    return subseed(seed, f"round-{round_index}-client-{client_id}")


def _drive_round(channels: Sequence, shards: Sequence[ClientShard], config: FederatedConfig) -> None:
    """Client side of one round: each client fetches, trains, and pushes."""
    for channel, shard in zip(channels, shards):
        round_index, params = channel.fetch_global()
        seed = client_round_seed(config.seed, round_index, shard.client_id)
        try:
            update = local_train(params, shard, config.train, seed)
        except DivergenceError as exc:
            raise FederationError(f"round {round_index}: {exc}") from exc
        channel.push_update(round_index, update)


def _pooled_eval_sets(
    shards: Sequence[ClientShard],
) -> tuple[list[TokenizedPair], list[TokenizedPair]]:
    pooled_train = [p for s in shards for p in s.train]
    pooled_test = [p for s in shards for p in s.test]
    return pooled_train, pooled_test


def run_round(
    state: GlobalState, shards: Sequence[ClientShard], config: FederatedConfig
) -> GlobalState:
    """Execute one communication round in process, starting from ``state``.

    Broadcasts the global parameters, trains every client locally,
    aggregates, evaluates the new global model on the union of all clients'
    test sets, and returns the advanced state.  Chaining this T times from a
    fresh state reproduces ``run_federation`` bit for bit.
    """
    if len(shards) != config.num_clients:
        raise T.ContractError(
            f"config expects {config.num_clients} clients, got {len(shards)} shards"
        )
    pooled_train, pooled_test = _pooled_eval_sets(shards)
    coordinator = Coordinator(
        state.global_params,
        config,
        pooled_train,
        pooled_test,
        start_round=state.round_index,
    )
    channels = [DirectChannel(coordinator) for _ in shards]
    _drive_round(channels, shards, config)
    round_index, params = coordinator.get_global()
    if round_index != state.round_index + 1:
        raise FederationError(f"round {state.round_index} did not complete")
    return GlobalState(
        round_index=round_index,
        global_params=params,
        history=list(state.history) + coordinator.history,
    )


def run_federation(
    config: FederatedConfig,
    shards: Sequence[ClientShard],
    dims: M.ModelDims,
    make_channels: Callable[[Coordinator], Sequence] | None = None,
    round_hook: Callable[[int, M.ModelParams, RoundMetrics], None] | None = None,
    checkpoint_dir: Path | str | None = None,
) -> GlobalState:
    """Initialize a global model and run the configured number of rounds.

    The transport comes from ``config.transport`` unless ``make_channels``
    interposes its own channel factory.  With ``checkpoint_dir`` the global
    parameters are saved to ``round_{t}.fedw`` after every round, so a run is
    resumable from the last completed round.
    """
    if len(shards) != config.num_clients:
        raise T.ContractError(
            f"config expects {config.num_clients} clients, got {len(shards)} shards"
        )
    if make_channels is None:
        if config.transport == "socket":
            from .transport import SocketFederation

            make_channels = SocketFederation(config.num_clients, config.host, config.port)
        else:
            make_channels = lambda coordinator: [DirectChannel(coordinator) for _ in shards]

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def hook(round_index: int, params: M.ModelParams, metrics: RoundMetrics) -> None:
        if checkpoint_dir is not None:
            save_params(checkpoint_dir / f"round_{round_index}.fedw", params)
        if round_hook is not None:
            round_hook(round_index, params, metrics)

    params = M.init_params(dims, subseed(config.seed, "init"))
    pooled_train, pooled_test = _pooled_eval_sets(shards)
    coordinator = Coordinator(params, config, pooled_train, pooled_test, hook)
    channels = list(make_channels(coordinator))
    if len(channels) != len(shards):
        raise T.ContractError(f"got {len(channels)} channels for {len(shards)} shards")
    try:
        for _ in range(config.num_rounds):
            before = coordinator.status()["round_index"]
            _drive_round(channels, shards, config)
            after = coordinator.status()["round_index"]
            if after != before + 1:
                raise FederationError(
                    f"round {before} did not complete: {after - before} advances"
                )
    finally:
        for channel in channels:
            channel.close()
        stop = getattr(make_channels, "stop", None)
        if callable(stop):
            stop()
    round_index, final_params = coordinator.get_global()
    return GlobalState(
        round_index=round_index, global_params=final_params, history=coordinator.history
    )


# ---------------------------------------------------------------------------
# metrics logging

METRICS_FIELDS = ("round", "client_id", "train_loss", "test_loss", "sample_count")


def metrics_rows(history: Sequence[RoundMetrics]) -> list[dict]:
    """Flatten round metrics to CSV rows: one per client plus a global row."""
    rows: list[dict] = []
    for m in history:
        for client_id in sorted(m.client_train_losses):
            rows.append(
                {
                    "round": m.round_index,
                    "client_id": client_id,
                    "train_loss": repr(m.client_train_losses[client_id]),
                    "test_loss": repr(m.client_test_losses[client_id]),
                    "sample_count": m.client_sample_counts[client_id],
                }
            )
        rows.append(
            {
                "round": m.round_index,
                "client_id": "global",
                "train_loss": repr(m.global_train_loss),
                "test_loss": repr(m.global_test_loss),
                "sample_count": sum(m.client_sample_counts.values()),
            }
        )
    return rows


def write_metrics_csv(path: Path | str, history: Sequence[RoundMetrics]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(metrics_rows(history))
