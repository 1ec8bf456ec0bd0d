"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every operation applied to tensors attached to it, in
execution order, which is already a topological order of the dataflow graph.
``backward`` replays the record in reverse and accumulates gradients for the
tape's named parameters.  Tensors without a tape are constants: operations on
them compute eagerly and record nothing, which is the fast path used for
evaluation-only forward passes.

All public operations validate operand shapes and reject non-finite results so
that a divergence is reported where it happens instead of propagating NaNs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# Smallest positive float64; used to keep softmax outputs strictly positive
# even when the input spread exceeds the exp underflow range.
_TINY = np.nextafter(0.0, 1.0)


class TensorError(Exception):
    """Base class for tensor-level failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf from finite inputs."""


class OutOfVocabularyError(TensorError):
    """A token id falls outside the table or logit range."""


class ContractError(TensorError):
    """An operation was invoked outside its contract."""


class Tensor:
    """Immutable dense array, optionally recorded as a node on a tape."""

    __slots__ = ("data", "tape", "inputs", "vjp", "name", "grad")

    def __init__(
        self,
        data,
        tape: "Tape | None" = None,
        inputs: tuple["Tensor", ...] = (),
        vjp: Callable[[Array], tuple[Array | None, ...]] | None = None,
    ):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.inputs = inputs
        self.vjp = vjp
        self.name: str | None = None
        self.grad: Array | None = None
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Execution-ordered operation record for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def parameter(self, name: str, data) -> Tensor:
        """Register a named leaf whose gradient ``backward`` will report."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        leaf = Tensor(data, tape=self)
        leaf.name = name
        self.params[name] = leaf
        return leaf


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _check_finite(out: Array, op: str) -> None:
    # Cheap reduction first: the sum is non-finite whenever any element is.
    # A finite array can only fail the fast path by overflowing the sum, so
    # the precise check runs before raising.
    with _quiet():
        total = out.sum()
    if np.isfinite(total):
        return
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _quiet() -> np.errstate:
    # Overflow to inf is caught by the finite check and raised as
    # NonFiniteError, so numpy's own warning would be noise.
    return np.errstate(over="ignore", invalid="ignore")


def _emit(
    op: str,
    data: Array,
    inputs: tuple[Tensor, ...],
    make_vjp: Callable[[], Callable[[Array], tuple[Array | None, ...]]],
) -> Tensor:
    _check_finite(data, op)
    tape = _result_tape(*inputs)
    if tape is None:
        return Tensor(data)
    return Tensor(data, tape=tape, inputs=inputs, vjp=make_vjp())


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands, following np.matmul shapes."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(
            f"matmul supports rank 1 or 2 operands, got shapes {a.shape} and {b.shape}"
        )
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    with _quiet():
        out2 = a2 @ b2
    out = out2
    if b.data.ndim == 1:
        out = out[..., 0]
    if a.data.ndim == 1:
        out = out[0] if out.ndim else out

    def make_vjp():
        def vjp(g: Array):
            g2 = np.reshape(g, out2.shape)
            da2 = g2 @ b2.T
            db2 = a2.T @ g2
            da = da2[0] if a.data.ndim == 1 else da2
            db = db2[:, 0] if b.data.ndim == 1 else db2
            return da, db

        return vjp

    return _emit("matmul", np.asarray(out), (a, b), make_vjp)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _require_same_shape("add", a, b)

    def make_vjp():
        return lambda g: (g, g)

    with _quiet():
        out = a.data + b.data
    return _emit("add", out, (a, b), make_vjp)


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar () tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"mul: operand shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def make_vjp():
        def vjp(g: Array):
            da = g * bd
            db = g * ad
            if a.shape == () and b.shape != ():
                da = np.asarray(da.sum())
            if b.shape == () and a.shape != ():
                db = np.asarray(db.sum())
            return da, db

        return vjp

    with _quiet():
        out = ad * bd
    return _emit("mul", out, (a, b), make_vjp)


def scale(x, factor: float) -> Tensor:
    x = _wrap(x)
    c = float(factor)

    def make_vjp():
        return lambda g: (g * c,)

    with _quiet():
        out = x.data * c
    return _emit("scale", out, (x,), make_vjp)


def one_minus(x) -> Tensor:
    """Affine map 1 - x, the gate complement used by recurrent cells."""
    x = _wrap(x)

    def make_vjp():
        return lambda g: (-g,)

    return _emit("one_minus", 1.0 - x.data, (x,), make_vjp)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)

    def make_vjp():
        return lambda g: (g * (1.0 - out * out),)

    return _emit("tanh", out, (x,), make_vjp)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # tanh form is overflow-free for any float64 input.
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def make_vjp():
        return lambda g: (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (x,), make_vjp)


def softmax(x) -> Tensor:
    """Normalize along the last axis with max-subtraction for overflow safety."""
    x = _wrap(x)
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise DimensionError(f"softmax requires a non-empty last axis, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    # Keep entries strictly positive even past the exp underflow range; a
    # subnormal floor cannot move a row sum anywhere near 1e-12.
    out = np.maximum(out, _TINY)

    def make_vjp():
        def vjp(g: Array):
            inner = (g * out).sum(axis=-1, keepdims=True)
            return ((g - inner) * out,)

        return vjp

    return _emit("softmax", out, (x,), make_vjp)


def concat(*parts) -> Tensor:
    """Join tensors along the last axis; all other axes must agree."""
    if len(parts) < 2:
        raise ContractError("concat requires at least two operands")
    tensors = tuple(_wrap(p) for p in parts)
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != first.data.ndim:
            raise DimensionError(
                f"concat: ranks differ between shapes {first.shape} and {t.shape}"
            )
        if t.data.shape[:-1] != first.data.shape[:-1]:
            raise DimensionError(
                f"concat: leading dimensions differ between shapes {first.shape} and {t.shape}"
            )
    widths = [t.data.shape[-1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def make_vjp():
        offsets = np.cumsum(widths)[:-1]

        def vjp(g: Array):
            return tuple(np.split(g, offsets, axis=-1))

        return vjp

    return _emit("concat", out, tensors, make_vjp)


def embed_lookup(table, ids) -> Tensor:
    """Select rows of a 2-D table by id; gradients flow only into those rows."""
    table = _wrap(table)
    if table.data.ndim != 2:
        raise DimensionError(f"embed_lookup table must be rank 2, got shape {table.shape}")
    vocab = table.data.shape[0]
    scalar_id = np.isscalar(ids) or (isinstance(ids, np.ndarray) and ids.ndim == 0)
    if scalar_id:
        idx = int(ids)
        if idx < 0 or idx >= vocab:
            raise OutOfVocabularyError(f"id {idx} outside table of {vocab} rows")
        out = table.data[idx]
    else:
        idx = np.asarray(ids)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise ContractError("embed_lookup ids must be an int or a rank-1 integer array")
        if idx.size and (idx.min() < 0 or idx.max() >= vocab):
            raise OutOfVocabularyError(
                f"ids outside table of {vocab} rows: {sorted(set(int(i) for i in idx if i < 0 or i >= vocab))}"
            )
        out = table.data[idx]

    def make_vjp():
        def vjp(g: Array):
            dt = np.zeros_like(table.data)
            if scalar_id:
                dt[idx] = g
            else:
                np.add.at(dt, idx, g)
            return (dt,)

        return vjp

    return _emit("embed_lookup", np.asarray(out), (table,), make_vjp)


def cross_entropy(logits, target) -> Tensor:
    """Negative log-softmax probability of the target id.

    Rank-1 logits with an int target give a scalar; rank-2 logits with a
    rank-1 integer target array give one loss per row.
    """
    logits = _wrap(logits)
    ld = logits.data
    if ld.ndim == 1:
        vocab = ld.shape[0]
        if vocab == 0:
            raise DimensionError("cross_entropy requires a non-empty logit vector")
        t = int(target)
        if t < 0 or t >= vocab:
            raise OutOfVocabularyError(f"target id {t} outside {vocab} logits")
        m = ld.max()
        lse = m + np.log(np.exp(ld - m).sum())
        out = np.asarray(lse - ld[t])

        def make_vjp():
            def vjp(g: Array):
                p = np.exp(ld - lse)
                p[t] -= 1.0
                return (p * g,)

            return vjp

        return _emit("cross_entropy", out, (logits,), make_vjp)

    if ld.ndim == 2:
        rows, vocab = ld.shape
        if vocab == 0:
            raise DimensionError("cross_entropy requires a non-empty logit axis")
        ts = np.asarray(target)
        if ts.shape != (rows,) or not np.issubdtype(ts.dtype, np.integer):
            raise ContractError(
                f"cross_entropy targets must be a rank-1 integer array of length {rows}"
            )
        if ts.size and (ts.min() < 0 or ts.max() >= vocab):
            raise OutOfVocabularyError(f"target ids outside {vocab} logits")
        m = ld.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(ld - m).sum(axis=1, keepdims=True))
        out = lse[:, 0] - ld[np.arange(rows), ts]

        def make_vjp():
            def vjp(g: Array):
                p = np.exp(ld - lse)
                p[np.arange(rows), ts] -= 1.0
                return (p * g[:, None],)

            return vjp

        return _emit("cross_entropy", out, (logits,), make_vjp)

    raise DimensionError(f"cross_entropy logits must be rank 1 or 2, got shape {logits.shape}")


def take_column(m, col: int) -> Tensor:
    """Select one column of a rank-2 tensor as a vector."""
    m = _wrap(m)
    if m.data.ndim != 2:
        raise DimensionError(f"take_column requires rank 2, got shape {m.shape}")
    j = int(col)
    if j < 0 or j >= m.data.shape[1]:
        raise DimensionError(f"column {j} outside shape {m.shape}")

    def make_vjp():
        def vjp(g: Array):
            dm = np.zeros_like(m.data)
            dm[:, j] = g
            return (dm,)

        return vjp

    return _emit("take_column", m.data[:, j].copy(), (m,), make_vjp)


def scale_rows(m, weights) -> Tensor:
    """Multiply each row of a rank-2 tensor by the matching scalar weight."""
    m, w = _wrap(m), _wrap(weights)
    if m.data.ndim != 2 or w.data.ndim != 1 or m.data.shape[0] != w.data.shape[0]:
        raise DimensionError(f"scale_rows: shapes {m.shape} and {w.shape} do not align")
    md, wd = m.data, w.data

    def make_vjp():
        def vjp(g: Array):
            return g * wd[:, None], (g * md).sum(axis=1)

        return vjp

    return _emit("scale_rows", md * wd[:, None], (m, w), make_vjp)


def broadcast_rows(v, rows: int) -> Tensor:
    """Repeat a vector as the rows of a matrix (bias expansion)."""
    v = _wrap(v)
    if v.data.ndim != 1:
        raise DimensionError(f"broadcast_rows requires rank 1, got shape {v.shape}")
    n = int(rows)
    if n < 1:
        raise ContractError("broadcast_rows requires at least one row")

    def make_vjp():
        return lambda g: (g.sum(axis=0),)

    return _emit("broadcast_rows", np.repeat(v.data[None, :], n, axis=0), (v,), make_vjp)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    target = tuple(int(s) for s in shape)
    if int(np.prod(target, dtype=np.int64)) != x.data.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {target}")
    src_shape = x.data.shape

    def make_vjp():
        return lambda g: (np.reshape(g, src_shape),)

    return _emit("reshape", np.reshape(x.data, target), (x,), make_vjp)


def sum_all(x) -> Tensor:
    x = _wrap(x)
    src_shape = x.data.shape

    def make_vjp():
        return lambda g: (np.full(src_shape, float(g)),)

    return _emit("sum_all", np.asarray(x.data.sum()), (x,), make_vjp)


def mean_all(x) -> Tensor:
    x = _wrap(x)
    if x.data.size == 0:
        raise DimensionError("mean_all of an empty tensor")
    src_shape = x.data.shape
    n = x.data.size

    def make_vjp():
        return lambda g: (np.full(src_shape, float(g) / n),)

    return _emit("mean_all", np.asarray(x.data.mean()), (x,), make_vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[str, Array]:
    """Accumulate d(loss)/d(parameter) for every parameter on the tape.

    Parameters the loss does not depend on get zero gradients of matching
    shape, so optimizers can treat the result as a total gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss tensor does not belong to the given tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones(())
    with _quiet():
        for node in reversed(tape.nodes):
            if node.grad is None or node.vjp is None:
                continue
            partials = node.vjp(node.grad)
            for inp, g in zip(node.inputs, partials):
                if g is None or inp.tape is None:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in tape.params.items()
    }
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    return grads


def grad_check(fn, inputs: Sequence[Array], eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``fn`` and central differences.

    ``fn`` maps one Tensor per input array to a scalar Tensor and must be pure.
    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [tape.parameter(f"input{i}", x) for i, x in enumerate(base)]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ContractError("grad_check requires fn to return a scalar Tensor")
    grads = backward(tape, out)

    def value_at(point: list[Array]) -> float:
        result = fn(*[Tensor(p) for p in point])
        return float(result.data)

    worst = 0.0
    for i, x in enumerate(base):
        analytic = grads[f"input{i}"]
        for idx in np.ndindex(x.shape):
            plus = [p.copy() for p in base]
            minus = [p.copy() for p in base]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            numeric = (value_at(plus) - value_at(minus)) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
