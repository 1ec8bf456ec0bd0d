"""Encoder-decoder recurrent model with additive attention over source states.

The encoder is a gated recurrent unit run over the embedded input tokens; the
decoder is a second recurrent unit that, after each step, scores every encoder
state against its updated hidden state, mixes a context vector from the
normalized scores, and projects the combined attention vector to output-token
logits.  All functions accept parameters holding either raw arrays (constant
evaluation) or tape-bound tensors (differentiable training).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import END_ID, START_ID
from .tensor import Array, Tensor

_GRU_FIELDS = (
    "update_in",
    "update_rec",
    "update_bias",
    "reset_in",
    "reset_rec",
    "reset_bias",
    "cand_in",
    "cand_rec",
    "cand_bias",
)


@dataclass(frozen=True)
class ModelDims:
    """Vocabulary and layer sizes shared by every parameter tensor."""

    vocab_in: int
    vocab_out: int
    embed_dim: int = 256
    hidden_dim: int = 1024
    attention_dim: int | None = None

    def __post_init__(self):
        if self.attention_dim is None:
            object.__setattr__(self, "attention_dim", self.hidden_dim)
        for name in ("embed_dim", "hidden_dim", "attention_dim"):
            if getattr(self, name) < 1:
                raise T.ContractError(f"{name} must be positive, got {getattr(self, name)}")
        # Both vocabularies must hold the four reserved token ids.
        for name in ("vocab_in", "vocab_out"):
            if getattr(self, name) < 4:
                raise T.ContractError(f"{name} must be at least 4, got {getattr(self, name)}")


def _freeze_arrays(obj) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            value.setflags(write=False)


@dataclass(frozen=True)
class GruParams:
    """Gate and candidate weights for one recurrent unit."""

    update_in: Array
    update_rec: Array
    update_bias: Array
    reset_in: Array
    reset_rec: Array
    reset_bias: Array
    cand_in: Array
    cand_rec: Array
    cand_bias: Array

    def __post_init__(self):
        _freeze_arrays(self)


@dataclass(frozen=True)
class ModelParams:
    """Complete, immutable parameter snapshot for one model."""

    dims: ModelDims
    input_embedding: Array
    output_embedding: Array
    encoder: GruParams
    decoder: GruParams
    query_proj: Array  # projects the decoder state for scoring
    memory_proj: Array  # projects encoder states for scoring
    score_vec: Array
    mix_proj: Array  # combines [context; state] into the attention vector
    out_proj: Array

    def __post_init__(self):
        _freeze_arrays(self)

    def named_arrays(self) -> dict[str, Array]:
        """All tensors keyed by a stable dotted name, in canonical order."""
        out = {
            "input_embedding": self.input_embedding,
            "output_embedding": self.output_embedding,
        }
        for which in ("encoder", "decoder"):
            gru = getattr(self, which)
            for field in _GRU_FIELDS:
                out[f"{which}.{field}"] = getattr(gru, field)
        out["query_proj"] = self.query_proj
        out["memory_proj"] = self.memory_proj
        out["score_vec"] = self.score_vec
        out["mix_proj"] = self.mix_proj
        out["out_proj"] = self.out_proj
        return out

    @staticmethod
    def expected_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
        e, h, a = dims.embed_dim, dims.hidden_dim, dims.attention_dim
        shapes: dict[str, tuple[int, ...]] = {
            "input_embedding": (dims.vocab_in, e),
            "output_embedding": (dims.vocab_out, e),
        }
        for which in ("encoder", "decoder"):
            for field in _GRU_FIELDS:
                if field.endswith("_in"):
                    shapes[f"{which}.{field}"] = (e, h)
                elif field.endswith("_rec"):
                    shapes[f"{which}.{field}"] = (h, h)
                else:
                    shapes[f"{which}.{field}"] = (h,)
        shapes["query_proj"] = (h, a)
        shapes["memory_proj"] = (h, a)
        shapes["score_vec"] = (a,)
        shapes["mix_proj"] = (2 * h, h)
        shapes["out_proj"] = (h, dims.vocab_out)
        return shapes

    @classmethod
    def from_arrays(cls, dims: ModelDims, arrays: dict[str, Array]) -> "ModelParams":
        """Build a snapshot from named arrays, validating names and shapes."""
        shapes = cls.expected_shapes(dims)
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        if missing or extra:
            raise T.ContractError(f"parameter names do not match: missing={missing} extra={extra}")
        converted: dict[str, Array] = {}
        for name, want in shapes.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != want:
                raise T.DimensionError(f"{name}: expected shape {want}, got {arr.shape}")
            converted[name] = arr
        return cls._assemble(dims, converted)

    @classmethod
    def _assemble(cls, dims: ModelDims, mapping: dict[str, object]) -> "ModelParams":
        grus = {
            which: GruParams(*[mapping[f"{which}.{field}"] for field in _GRU_FIELDS])
            for which in ("encoder", "decoder")
        }
        return cls(
            dims=dims,
            input_embedding=mapping["input_embedding"],
            output_embedding=mapping["output_embedding"],
            encoder=grus["encoder"],
            decoder=grus["decoder"],
            query_proj=mapping["query_proj"],
            memory_proj=mapping["memory_proj"],
            score_vec=mapping["score_vec"],
            mix_proj=mapping["mix_proj"],
            out_proj=mapping["out_proj"],
        )

    def bind(self, tape: T.Tape) -> "ModelParams":
        """Register every tensor on the tape and return the bound view."""
        named = {name: tape.parameter(name, arr) for name, arr in self.named_arrays().items()}
        return type(self)._assemble(self.dims, named)

    def constants(self) -> "ModelParams":
        """A view whose tensors are constants, so forward passes skip recording."""
        named = {name: Tensor(arr) for name, arr in self.named_arrays().items()}
        return type(self)._assemble(self.dims, named)


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Draw weights uniformly in +-sqrt(6/(fan_in+fan_out)); biases start at zero."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, Array] = {}
    for name, shape in ModelParams.expected_shapes(dims).items():
        if name.endswith("_bias"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) == 2 else 1
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams.from_arrays(dims, arrays)


@dataclass(frozen=True)
class EncoderOutput:
    """Per-token encoder states plus the final state that seeds the decoder."""

    states: list[Tensor]
    final_state: Tensor


@dataclass(frozen=True)
class AttentionOutput:
    """Normalized source weights, mixed context, and combined attention vector."""

    weights: Tensor
    context: Tensor
    attn_vector: Tensor


@dataclass(frozen=True)
class DecoderState:
    """Decoder hidden state plus the last emitted (or forced) token id."""

    hidden: Tensor
    prev_token: int


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def gru_step(gru: GruParams, x, h_prev) -> Tensor:
    """One recurrence step; accepts a single vector or a batch of row vectors."""
    xt, ht = _as_tensor(x), _as_tensor(h_prev)
    batched = xt.data.ndim == 2

    def gate(pre: Tensor, bias) -> Tensor:
        if batched:
            return T.add(pre, T.broadcast_rows(bias, pre.data.shape[0]))
        return T.add(pre, _as_tensor(bias))

    update = T.sigmoid(
        gate(T.add(T.matmul(xt, gru.update_in), T.matmul(ht, gru.update_rec)), gru.update_bias)
    )
    reset = T.sigmoid(
        gate(T.add(T.matmul(xt, gru.reset_in), T.matmul(ht, gru.reset_rec)), gru.reset_bias)
    )
    cand = T.tanh(
        gate(
            T.add(T.matmul(xt, gru.cand_in), T.matmul(T.mul(reset, ht), gru.cand_rec)),
            gru.cand_bias,
        )
    )
    # (1 - update) * h + update * cand, written as h + update * (cand - h).
    return T.add(ht, T.mul(update, T.add(cand, T.scale(ht, -1.0))))


def encode(params: ModelParams, input_ids: Sequence[int]) -> EncoderOutput:
    """Run the encoder over a token id sequence, one state per token."""
    ids = [int(t) for t in input_ids]
    if not ids:
        raise T.ContractError("encode requires at least one input token")
    h: Tensor = Tensor(np.zeros(params.dims.hidden_dim))
    states: list[Tensor] = []
    for tok in ids:
        x = T.embed_lookup(params.input_embedding, tok)
        h = gru_step(params.encoder, x, h)
        states.append(h)
    return EncoderOutput(states=states, final_state=h)


def encode_rows(params: ModelParams, rows: np.ndarray) -> tuple[list[Tensor], Tensor]:
    """Encode a batch of equal-length sequences given as an int matrix."""
    ids = np.asarray(rows)
    if ids.ndim != 2 or ids.shape[0] < 1 or ids.shape[1] < 1:
        raise T.ContractError(f"encode_rows requires a non-empty 2-D id matrix, got {ids.shape}")
    batch = ids.shape[0]
    h: Tensor = Tensor(np.zeros((batch, params.dims.hidden_dim)))
    states: list[Tensor] = []
    for s in range(ids.shape[1]):
        x = T.embed_lookup(params.input_embedding, ids[:, s])
        h = gru_step(params.encoder, x, h)
        states.append(h)
    return states, h


def precompute_keys(params: ModelParams, states: list[Tensor]) -> list[Tensor]:
    """Project encoder states once; the projection is reused at every decode step."""
    return [T.matmul(s, params.memory_proj) for s in states]


def attention_score(h_t, h_s, params: ModelParams) -> Tensor:
    """Additive score between one decoder state and one encoder state."""
    q = T.matmul(_as_tensor(h_t), params.query_proj)
    k = T.matmul(_as_tensor(h_s), params.memory_proj)
    return T.matmul(T.tanh(T.add(q, k)), params.score_vec)


def attend_rows(
    params: ModelParams,
    h: Tensor,
    states: list[Tensor],
    keys: list[Tensor] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Batched attention: returns (weights [B,S], context [B,H], attn vector [B,H])."""
    if not states:
        raise T.ContractError("attention requires at least one encoder state")
    if keys is None:
        keys = precompute_keys(params, states)
    batch = h.data.shape[0]
    q = T.matmul(h, params.query_proj)
    cols = [T.reshape(T.matmul(T.tanh(T.add(q, k)), params.score_vec), (batch, 1)) for k in keys]
    scores = cols[0] if len(cols) == 1 else T.concat(*cols)
    alpha = T.softmax(scores)
    context: Tensor | None = None
    for s, state in enumerate(states):
        part = T.scale_rows(state, T.take_column(alpha, s))
        context = part if context is None else T.add(context, part)
    attn_vector = T.tanh(T.matmul(T.concat(context, h), params.mix_proj))
    return alpha, context, attn_vector


def attend(h_t, encoder_out: EncoderOutput, params: ModelParams) -> AttentionOutput:
    """Attention for a single decoder state over a single encoded sequence."""
    hidden = params.dims.hidden_dim
    positions = len(encoder_out.states)
    h2 = T.reshape(_as_tensor(h_t), (1, hidden))
    states2 = [T.reshape(s, (1, hidden)) for s in encoder_out.states]
    alpha, context, attn_vector = attend_rows(params, h2, states2)
    return AttentionOutput(
        weights=T.reshape(alpha, (positions,)),
        context=T.reshape(context, (hidden,)),
        attn_vector=T.reshape(attn_vector, (hidden,)),
    )


def decode_step(
    params: ModelParams, state: DecoderState, encoder_out: EncoderOutput
) -> tuple[Tensor, DecoderState, AttentionOutput]:
    """One decoder step: advance the recurrence, then attend with the new state.

    The returned state keeps ``prev_token`` unchanged; the caller replaces it
    with the emitted (or teacher-forced) token before the next step.
    """
    x = T.embed_lookup(params.output_embedding, state.prev_token)
    h = gru_step(params.decoder, x, state.hidden)
    attn = attend(h, encoder_out, params)
    logits = T.matmul(attn.attn_vector, params.out_proj)
    return logits, DecoderState(hidden=h, prev_token=state.prev_token), attn


def decode_step_rows(
    params: ModelParams,
    prev_ids: np.ndarray,
    h_prev: Tensor,
    states: list[Tensor],
    keys: list[Tensor],
) -> tuple[Tensor, Tensor, Tensor]:
    """Batched decoder step: returns (logits [B,V], new hidden [B,H], weights [B,S])."""
    x = T.embed_lookup(params.output_embedding, np.asarray(prev_ids))
    h = gru_step(params.decoder, x, h_prev)
    alpha, _, attn_vector = attend_rows(params, h, states, keys)
    logits = T.matmul(attn_vector, params.out_proj)
    return logits, h, alpha


def greedy_decode(
    params: ModelParams,
    input_ids: Sequence[int],
    max_len: int = 16,
    start_id: int = START_ID,
    end_id: int = END_ID,
) -> tuple[list[int], np.ndarray]:
    """Greedy generation from the encoded input.

    Returns the emitted token ids (end token excluded) and the attention
    matrix with one row per decode step, including the step that emitted the
    end token.  Argmax ties resolve toward the lowest token id.
    """
    if max_len < 1:
        raise T.ContractError(f"max_len must be at least 1, got {max_len}")
    encoder_out = encode(params, input_ids)
    state = DecoderState(hidden=encoder_out.final_state, prev_token=int(start_id))
    output_ids: list[int] = []
    rows: list[np.ndarray] = []
    for _ in range(int(max_len)):
        logits, state, attn = decode_step(params, state, encoder_out)
        token = int(np.argmax(logits.data))
        rows.append(np.array(attn.weights.data, dtype=np.float64))
        if token == end_id:
            break
        output_ids.append(token)
        state = dataclasses.replace(state, prev_token=token)
    return output_ids, np.vstack(rows)
