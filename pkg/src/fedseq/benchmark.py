"""Five-clinic synthetic benchmark: per-client centralized models vs federation.

Builds the default synthetic corpus (41 diseases, 132 symptoms, 4920 pairs,
shard sizes 1000/1000/1000/1000/920, 80/20 splits), trains one centralized
model per client plus one federated global model, and reports own-shard and
pooled-test losses so the two regimes can be compared seed by seed.

The corpus, sharding, and splits are derived exactly as the data-preparation
command derives them, so a benchmark run matches what the CLI would produce
for the same seed.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable

from . import data as D
from . import federation as F
from . import model as M
from . import training as TR
from .seeding import subseed


@dataclass(frozen=True)
class BenchmarkConfig:
    """Corpus, model, and schedule settings for one benchmark seed."""

    num_diseases: int = 41
    num_symptoms: int = 132
    num_samples: int = 4920
    shard_sizes: tuple[int, ...] = (1000, 1000, 1000, 1000, 920)
    embed_dim: int = 32
    hidden_dim: int = 128
    num_rounds: int = 30
    local_epochs: int = 5
    # centralized models stop at the loss target or this epoch budget
    max_centralized_epochs: int = 60
    train_loss_target: float = 0.05
    batch_size: int = 64
    learning_rate: float = 1e-3
    grad_clip_norm: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class CentralizedResult:
    """One client's standalone model at its stopping epoch."""

    client_id: int
    epochs_run: int
    train_loss: float
    own_test_loss: float
    pooled_test_loss: float


@dataclass(frozen=True)
class BenchmarkResult:
    config: BenchmarkConfig
    centralized: tuple[CentralizedResult, ...]
    federated_train_loss: float
    federated_test_loss: float
    history: tuple[F.RoundMetrics, ...]
    elapsed_seconds: float

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def median_centralized_test_loss(self) -> float:
        return statistics.median(c.pooled_test_loss for c in self.centralized)

    @property
    def federated_leq_median_centralized(self) -> bool:
        """Global model at least matches the median standalone model on pooled test."""
        return self.federated_test_loss <= self.median_centralized_test_loss

    @property
    def all_centralized_converged(self) -> bool:
        return all(c.train_loss < self.config.train_loss_target for c in self.centralized)

    @property
    def clients_with_pooled_ge_own(self) -> int:
        """How many standalone models look better on their own test split than pooled."""
        return sum(1 for c in self.centralized if c.pooled_test_loss >= c.own_test_loss)


def build_shards(config: BenchmarkConfig) -> tuple[D.Vocab, list[D.ClientShard]]:
    """Synthesize, shard, tokenize, and split the corpus for one seed."""
    pairs = D.synthesize_dataset(
        config.num_diseases, config.num_symptoms, config.num_samples,
        seed=subseed(config.seed, "synthesize"),
    )
    vocab = D.build_vocab(pairs)
    raw_shards = D.shard(pairs, list(config.shard_sizes), seed=subseed(config.seed, "shard"))
    shards = [
        D.make_client_shard(k, shard_pairs, vocab, subseed(config.seed, f"split-{k}"))
        for k, shard_pairs in enumerate(raw_shards)
    ]
    return vocab, shards


def _dims(vocab: D.Vocab, config: BenchmarkConfig) -> M.ModelDims:
    return M.ModelDims(
        vocab_in=vocab.input_size,
        vocab_out=vocab.output_size,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
    )


def _train_config(config: BenchmarkConfig, local_epochs: int, seed: int) -> TR.TrainConfig:
    return TR.TrainConfig(
        local_epochs=local_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        optimizer="adam",
        grad_clip_norm=config.grad_clip_norm,
        seed=seed,
    )


def train_centralized_client(
    shard: D.ClientShard,
    pooled_test: list,
    dims: M.ModelDims,
    config: BenchmarkConfig,
    log: Callable[[str], None] | None = None,
) -> CentralizedResult:
    """Train one standalone model on its own shard until the loss target or budget."""
    train_config = _train_config(
        config, local_epochs=1, seed=subseed(config.seed, f"centralized-{shard.client_id}")
    )
    params = M.init_params(dims, subseed(config.seed, f"centralized-{shard.client_id}-init"))
    state = TR.init_optimizer(params)
    train_loss = TR.evaluate(params, shard.train)
    epochs_run = 0
    for epoch in range(config.max_centralized_epochs):
        params, state, train_loss = TR.train_epoch(params, shard.train, train_config, state,
                                                   epoch=epoch)
        epochs_run = epoch + 1
        if log:
            log(f"client {shard.client_id} epoch {epochs_run}: train_loss={train_loss:.4f}")
        if train_loss < config.train_loss_target:
            break
    return CentralizedResult(
        client_id=shard.client_id,
        epochs_run=epochs_run,
        train_loss=train_loss,
        own_test_loss=TR.evaluate(params, shard.test),
        pooled_test_loss=TR.evaluate(params, pooled_test),
    )


def run_benchmark(
    config: BenchmarkConfig = BenchmarkConfig(),
    log: Callable[[str], None] | None = None,
) -> BenchmarkResult:
    """Run the full comparison for one seed and collect both regimes' losses."""
    started = time.monotonic()
    vocab, shards = build_shards(config)
    dims = _dims(vocab, config)
    pooled_test = [p for s in shards for p in s.test]

    centralized = tuple(
        train_centralized_client(shard, pooled_test, dims, config, log) for shard in shards
    )

    def round_hook(round_index: int, params: M.ModelParams, metrics: F.RoundMetrics) -> None:
        if log:
            log(f"round {round_index}: train={metrics.global_train_loss:.4f} "
                f"test={metrics.global_test_loss:.4f}")

    federated_config = F.FederatedConfig(
        num_clients=len(shards),
        num_rounds=config.num_rounds,
        aggregation="weighted",
        seed=config.seed,
        train=_train_config(config, local_epochs=config.local_epochs,
                            seed=subseed(config.seed, "train")),
    )
    final = F.run_federation(federated_config, shards, dims, round_hook=round_hook)
    last = final.history[-1]
    return BenchmarkResult(
        config=config,
        centralized=centralized,
        federated_train_loss=last.global_train_loss,
        federated_test_loss=last.global_test_loss,
        history=tuple(final.history),
        elapsed_seconds=time.monotonic() - started,
    )


def summarize(result: BenchmarkResult) -> str:
    """Multi-line human-readable report for one seed."""
    lines = [f"seed {result.seed} ({result.elapsed_seconds:.0f}s)"]
    for c in result.centralized:
        lines.append(
            f"  centralized client {c.client_id}: {c.epochs_run} epochs, "
            f"train={c.train_loss:.4f} own_test={c.own_test_loss:.4f} "
            f"pooled_test={c.pooled_test_loss:.4f}"
        )
    lines.append(
        f"  federated: train={result.federated_train_loss:.4f} "
        f"test={result.federated_test_loss:.4f} "
        f"(median centralized test={result.median_centralized_test_loss:.4f})"
    )
    lines.append(
        f"  federated <= median centralized: {result.federated_leq_median_centralized}; "
        f"pooled>=own for {result.clients_with_pooled_ge_own}/{len(result.centralized)} clients"
    )
    return "\n".join(lines)
