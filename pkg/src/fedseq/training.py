"""Teacher-forced training loops, optimizers, and gradient-free evaluation.

Batches are bucketed by (input length, target length) so each batch is a pair
of dense id matrices with no padding; per-example loss semantics are exact.
An example's loss is the mean cross entropy over its target positions after
the start token, and a dataset's loss is the mean of per-example losses.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import ClientShard, TokenizedPair
from .seeding import rng_for

Array = np.ndarray

OPTIMIZERS = ("adam", "sgd")


class DivergenceError(Exception):
    """Training produced non-finite values; the message names epoch and batch."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one client's (or the centralized) training loop."""

    local_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 0:
            raise T.ContractError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise T.ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise T.ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise T.ContractError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise T.ContractError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment estimates and the shared step counter (unused by sgd)."""

    step: int
    m: dict[str, Array]
    v: dict[str, Array]


def init_optimizer(params: M.ModelParams) -> OptimizerState:
    named = params.named_arrays()
    return OptimizerState(
        step=0,
        m={name: np.zeros_like(arr) for name, arr in named.items()},
        v={name: np.zeros_like(arr) for name, arr in named.items()},
    )


def global_grad_norm(grads: dict[str, Array]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(
    grads: dict[str, Array], max_norm: float | None
) -> tuple[dict[str, Array], float]:
    """Scale all gradients by max_norm/norm when the global norm exceeds it."""
    norm = global_grad_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def apply_gradients(
    params: M.ModelParams,
    grads: dict[str, Array],
    config: TrainConfig,
    state: OptimizerState,
) -> tuple[M.ModelParams, OptimizerState]:
    """One optimizer step; returns fresh params and the advanced state."""
    lr = config.learning_rate
    named = params.named_arrays()
    step = state.step + 1
    if config.optimizer == "sgd":
        updated = {name: arr - lr * grads[name] for name, arr in named.items()}
        new_state = OptimizerState(step=step, m=state.m, v=state.v)
    else:
        b1, b2 = config.beta1, config.beta2
        bias1 = 1.0 - b1**step
        bias2 = 1.0 - b2**step
        m: dict[str, Array] = {}
        v: dict[str, Array] = {}
        updated = {}
        for name, arr in named.items():
            g = grads[name]
            m[name] = b1 * state.m[name] + (1.0 - b1) * g
            v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
            m_hat = m[name] / bias1
            v_hat = v[name] / bias2
            updated[name] = arr - lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_state = OptimizerState(step=step, m=m, v=v)
    return M.ModelParams.from_arrays(params.dims, updated), new_state


# ---------------------------------------------------------------------------
# loss


def rows_loss(view: M.ModelParams, input_rows: Array, target_rows: Array) -> T.Tensor:
    """Mean teacher-forced cross entropy over a same-length batch.

    ``view`` holds tensors (bound or constant); rows are dense id matrices.
    Every row contributes target_len-1 prediction terms, so the scalar equals
    the mean of per-example losses.
    """
    targets = np.asarray(target_rows)
    if targets.ndim != 2 or targets.shape[1] < 2:
        raise T.ContractError(
            f"targets must be a 2-D matrix with at least 2 columns, got {targets.shape}"
        )
    states, h = M.encode_rows(view, input_rows)
    keys = M.precompute_keys(view, states)
    per_step: list[T.Tensor] = []
    for t in range(1, targets.shape[1]):
        logits, h, _ = M.decode_step_rows(view, targets[:, t - 1], h, states, keys)
        per_step.append(T.cross_entropy(logits, targets[:, t]))
    joined = per_step[0] if len(per_step) == 1 else T.concat(*per_step)
    return T.mean_all(joined)


def sequence_loss(view: M.ModelParams, pair: TokenizedPair) -> T.Tensor:
    """Teacher-forced loss of one example: mean over its target positions."""
    if len(pair.target_ids) < 2:
        raise T.ContractError("a target needs at least 2 tokens (start plus one prediction)")
    return rows_loss(view, np.array([pair.input_ids]), np.array([pair.target_ids]))


def loss_and_grads(
    params: M.ModelParams, input_rows: Array, target_rows: Array
) -> tuple[float, dict[str, Array]]:
    tape = T.Tape()
    loss = rows_loss(params.bind(tape), input_rows, target_rows)
    grads = T.backward(tape, loss)
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# batching


def bucket_batches(
    pairs: Sequence[TokenizedPair],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[tuple[Array, Array]]:
    """Group by (input length, target length) and cut into dense batches.

    With an rng, examples are shuffled within buckets and the batch order is
    shuffled; without one the order is deterministic.
    """
    buckets: dict[tuple[int, int], list[TokenizedPair]] = defaultdict(list)
    for p in pairs:
        buckets[(len(p.input_ids), len(p.target_ids))].append(p)
    batches: list[tuple[Array, Array]] = []
    for key in sorted(buckets):
        group = buckets[key]
        if rng is not None:
            group = [group[i] for i in rng.permutation(len(group))]
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            batches.append(
                (
                    np.array([p.input_ids for p in chunk], dtype=np.int64),
                    np.array([p.target_ids for p in chunk], dtype=np.int64),
                )
            )
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# loops


def train_epoch(
    params: M.ModelParams,
    pairs: Sequence[TokenizedPair],
    config: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
) -> tuple[M.ModelParams, OptimizerState, float]:
    """One pass over the data; returns (params, optimizer state, mean loss).

    The minibatch shuffle draws from ``rng`` when given, otherwise from a
    stream derived from ``config.seed`` and ``epoch``.
    """
    if not pairs:
        raise T.ContractError("cannot train on zero examples")
    if rng is None:
        rng = rng_for(config.seed, f"epoch-{epoch}")
    total = 0.0
    count = 0
    for batch_index, (inputs, targets) in enumerate(bucket_batches(pairs, config.batch_size, rng)):
        try:
            loss, grads = loss_and_grads(params, inputs, targets)
        except T.NonFiniteError as exc:
            raise DivergenceError(
                f"training diverged at epoch {epoch}, batch {batch_index} "
                f"({inputs.shape[0]} examples): {exc}"
            ) from exc
        grads, _ = clip_gradients(grads, config.grad_clip_norm)
        params, state = apply_gradients(params, grads, config, state)
        total += loss * inputs.shape[0]
        count += inputs.shape[0]
    return params, state, total / count


def evaluate(params: M.ModelParams, pairs: Sequence[TokenizedPair], batch_size: int = 256) -> float:
    """Mean per-example loss without touching gradients or optimizer state."""
    if not pairs:
        raise T.ContractError("cannot evaluate on zero examples")
    view = params.constants()
    total = 0.0
    for inputs, targets in bucket_batches(pairs, batch_size):
        loss = rows_loss(view, inputs, targets)
        total += float(loss.data) * inputs.shape[0]
    return total / len(pairs)


def train(
    params: M.ModelParams,
    pairs: Sequence[TokenizedPair],
    config: TrainConfig,
    epochs: int,
    seed: int | None = None,
    on_epoch=None,
) -> tuple[M.ModelParams, list[float]]:
    """Run ``epochs`` shuffled passes; returns params and per-epoch mean losses.

    ``seed`` overrides ``config.seed`` when given.  ``on_epoch(epoch_index,
    mean_loss)`` fires after each pass when given.
    """
    if seed is None:
        seed = config.seed
    state = init_optimizer(params)
    history: list[float] = []
    for epoch in range(epochs):
        rng = rng_for(seed, f"epoch-{epoch}")
        params, state, mean_loss = train_epoch(params, pairs, config, state, rng, epoch=epoch)
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return params, history


@dataclass(frozen=True)
class ClientUpdate:
    """What a client sends back after local training on its private shard."""

    params: M.ModelParams
    sample_count: int
    mean_train_loss: float
    mean_test_loss: float
    client_id: int

    def __post_init__(self):
        if self.sample_count <= 0:
            raise T.ContractError(f"sample_count must be positive, got {self.sample_count}")
        for label, value in (("train", self.mean_train_loss), ("test", self.mean_test_loss)):
            if not math.isfinite(value) or value < 0:
                raise T.ContractError(f"mean_{label}_loss must be finite and >= 0, got {value}")


def local_train(
    global_params: M.ModelParams,
    shard: ClientShard,
    config: TrainConfig,
    seed: int | None = None,
) -> ClientUpdate:
    """Train a copy of the global model on one client's shard.

    Optimizer state starts fresh each call, so successive rounds do not leak
    moment estimates.  With zero local epochs the parameters pass through
    unchanged and the train loss is a plain evaluation.  ``seed`` overrides
    ``config.seed`` when given.
    """
    if seed is None:
        seed = config.seed
    params = global_params
    state = init_optimizer(params)
    total = 0.0
    count = 0
    try:
        for epoch in range(config.local_epochs):
            rng = rng_for(seed, f"epoch-{epoch}")
            params, state, mean_loss = train_epoch(
                params, shard.train, config, state, rng, epoch=epoch
            )
            total += mean_loss * len(shard.train)
            count += len(shard.train)
    except DivergenceError as exc:
        raise DivergenceError(f"client {shard.client_id}: {exc}") from exc
    train_loss = total / count if count else evaluate(params, shard.train)
    return ClientUpdate(
        params=params,
        sample_count=len(shard.train),
        mean_train_loss=train_loss,
        mean_test_loss=evaluate(params, shard.test),
        client_id=shard.client_id,
    )
