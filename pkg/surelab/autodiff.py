"""
A minimal dense-tensor engine with reverse-mode automatic differentiation.

Every primitive is a method on `GradTape`. Calling a primitive computes its output eagerly and, if
any input requires a gradient, appends a `TapeRecord` holding a closure that maps the output
adjoint to the input adjoints. `backward` then walks the records in reverse order, visiting each
exactly once. Usage::

    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        x, w = inputs
        return [tape.sum(tape.matmul(x, w))]

    outputs, tape = forward(graph, [x, w])
    gradients = backward(tape, outputs[0], [w])
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Literal, TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray

from surelab.errors import NonFiniteError, ShapeError, TapeError

FloatArray: TypeAlias = NDArray[np.float64]
IntArray: TypeAlias = NDArray[np.int64]


@dataclass(eq=False)
class Tensor:
    """
    A dense array of 64-bit floats, in row-major order.

    Tensors compare and hash by identity, so they can be used as keys of gradient mappings.
    """

    data: FloatArray
    requires_grad: bool = False
    name: str = ""
    version: int = field(default=0, compare=False)
    """Incremented on every `assign`, so tapes can detect mutation of their inputs."""

    def __post_init__(self) -> None:
        self.data = np.array(self.data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def assign(self, data: ArrayLike) -> None:
        """Replace the values of this tensor, keeping its shape."""
        new_data = np.array(data, dtype=np.float64)
        if new_data.shape != self.data.shape:
            raise ShapeError(
                f"Cannot assign an array of shape {new_data.shape} to tensor {self.name!r}"
                f" of shape {self.data.shape}."
            )
        self.data = new_data
        self.version += 1

    def copy(self, name: str | None = None) -> Tensor:
        return Tensor(self.data.copy(), self.requires_grad, self.name if name is None else name)


BackwardFn: TypeAlias = Callable[[FloatArray, tuple[bool, ...]], tuple[FloatArray | None, ...]]
"""
Local derivative of a primitive: maps the output adjoint, and which inputs need a gradient, to
one adjoint per input (`None` where no gradient is needed).
"""


@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    versions: tuple[int, ...]


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {list(shapes)} cannot be broadcast together.") from e


def log_softmax(logits: FloatArray, axis: int = -1) -> FloatArray:
    """Numerically stable log-softmax of a plain array."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    result: FloatArray = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return result


_GELU_C = float(np.sqrt(2.0 / np.pi))


class GradTape:
    """
    Ordered record of differentiable primitive operations.

    With `record=False` primitives are still computed and checked, but nothing is recorded, which
    is what evaluation passes use.
    """

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self.records: list[TapeRecord] = []

    def _emit(
        self,
        op: str,
        inputs: Sequence[Tensor],
        out_data: FloatArray,
        backward: BackwardFn,
    ) -> Tensor:
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(op, f"output of shape {out_data.shape} is not finite.")
        requires_grad = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires_grad, name=op)
        if requires_grad:
            self.records.append(
                TapeRecord(op, tuple(inputs), out, backward, tuple(t.version for t in inputs))
            )
        return out

    def identity(self, a: Tensor) -> Tensor:
        return self._emit("identity", [a], a.data.copy(), lambda g, needs: (g,))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("add", a.shape, b.shape)

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            return (
                _unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None,
            )

        return self._emit("add", [a, b], a.data + b.data, _backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("mul", a.shape, b.shape)

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            return (
                _unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None,
            )

        return self._emit("mul", [a, b], a.data * b.data, _backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._emit("scale", [a], a.data * factor, lambda g, needs: (g * factor,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}.")
        _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
            return ga, gb

        return self._emit("matmul", [a, b], a.data @ b.data, _backward)

    def transpose(self, a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
        """Permute axes. By default swaps the last two axes."""
        if axes is None:
            perm = list(range(a.data.ndim))
            if len(perm) < 2:
                raise ShapeError(f"transpose: need at least two axes. Found: {a.shape}")
            perm[-2], perm[-1] = perm[-1], perm[-2]
        else:
            perm = list(axes)
            if sorted(perm) != list(range(a.data.ndim)):
                raise ShapeError(
                    f"transpose: {perm} is not a permutation of the axes of {a.shape}."
                )
        inverse = list(np.argsort(perm))
        return self._emit(
            "transpose",
            [a],
            np.transpose(a.data, perm),
            lambda g, needs: (np.transpose(g, inverse),),
        )

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}.")
        return self._emit(
            "reshape", [a], a.data.reshape(shape), lambda g, needs: (g.reshape(a.shape),)
        )

    def select(self, a: Tensor, index: tuple[IntArray, ...]) -> Tensor:
        """Gather entries with numpy advanced indexing over the leading axes of `a`."""
        for axis, ix in enumerate(index):
            if ix.size and (ix.min() < 0 or ix.max() >= a.shape[axis]):
                raise ShapeError(f"select: index out of range for axis {axis} of {a.shape}.")

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            ga = np.zeros_like(a.data)
            np.add.at(ga, index, g)
            return (ga,)

        return self._emit("select", [a], a.data[index], _backward)

    def sum(self, a: Tensor) -> Tensor:
        return self._emit(
            "sum",
            [a],
            np.array(a.data.sum()),
            lambda g, needs: (np.broadcast_to(g, a.shape).copy(),),
        )

    def gelu(self, a: Tensor) -> Tensor:
        """Gaussian error linear unit, tanh approximation."""
        x = a.data
        inner = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

        return self._emit("gelu", [a], 0.5 * x * (1.0 + t), _backward)

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(
                f"layer_norm: gain/bias must have shape ({d},)."
                f" Found: {gamma.shape=}, {beta.shape=}"
            )
        mean = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mean
        inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * inv_std

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            gx = ggamma = gbeta = None
            if needs[0]:
                gxhat = g * gamma.data
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
                )
            if needs[1]:
                ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
            if needs[2]:
                gbeta = g.reshape(-1, d).sum(axis=0)
            return gx, ggamma, gbeta

        return self._emit(
            "layer_norm", [x, gamma, beta], xhat * gamma.data + beta.data, _backward
        )

    def softmax(self, a: Tensor, mask: NDArray[np.bool_] | None = None) -> Tensor:
        """
        Softmax over the last axis.

        `mask` is broadcast against `a`; entries where it is `False` get probability exactly zero.
        Every row must keep at least one entry.
        """
        logits = a.data
        if mask is not None:
            _broadcast_shape("softmax", a.shape, tuple(mask.shape))
            if not np.all(np.broadcast_to(mask, a.shape).any(axis=-1)):
                raise ShapeError("softmax: mask removes every entry of some row.")
            logits = np.where(mask, logits, -np.inf)
        exps = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = exps / exps.sum(axis=-1, keepdims=True)

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", [a], probs, _backward)

    def embedding(self, table: Tensor, ids: IntArray) -> Tensor:
        """Look up rows of `table` (shape `(V, d)`) for integer `ids` of any shape."""
        ids = np.asarray(ids, dtype=np.int64)
        if table.data.ndim != 2:
            raise ShapeError(f"embedding: table must be a matrix. Found: {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(
                f"embedding: ids must lie in [0, {table.shape[0]})."
                f" Found: min={ids.min()}, max={ids.max()}"
            )

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)

        return self._emit("embedding", [table], table.data[ids], _backward)

    def dropout(self, a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
        """Inverted dropout. `rate == 0` is an exact identity."""
        assert 0.0 <= rate < 1.0, f"Dropout rate must be in [0, 1). Found: {rate=}"
        if rate == 0.0:
            return a
        keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
        return self._emit("dropout", [a], a.data * keep, lambda g, needs: (g * keep,))

    def cross_entropy(
        self,
        logits: Tensor,
        targets: IntArray,
        reduction: Literal["sum", "mean"] = "sum",
    ) -> Tensor:
        """Cross-entropy of `logits`, shape `(..., V)`, against integer `targets`, shape `(...)`."""
        targets = np.asarray(targets, dtype=np.int64)
        if logits.shape[:-1] != targets.shape:
            raise ShapeError(
                f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}."
            )
        if targets.size == 0:
            raise ShapeError("cross_entropy: no targets.")
        n_classes = logits.shape[-1]
        if targets.min() < 0 or targets.max() >= n_classes:
            raise ShapeError(f"cross_entropy: targets must lie in [0, {n_classes}).")
        flat_logits = logits.data.reshape(-1, n_classes)
        flat_targets = targets.ravel()
        rows = np.arange(flat_targets.size)
        log_probs = log_softmax(flat_logits)
        factor = 1.0 if reduction == "sum" else 1.0 / flat_targets.size
        loss = -log_probs[rows, flat_targets].sum() * factor

        def _backward(g: FloatArray, needs: tuple[bool, ...]) -> tuple[FloatArray | None, ...]:
            grad = np.exp(log_probs)
            grad[rows, flat_targets] -= 1.0
            return ((grad * (g * factor)).reshape(logits.shape),)

        return self._emit("cross_entropy", [logits], np.array(loss), _backward)


Graph: TypeAlias = Callable[[GradTape, Sequence[Tensor]], Sequence[Tensor]]
"""A graph specification: computes outputs from inputs by calling primitives on a tape."""


def forward(
    graph: Graph,
    inputs: Sequence[Tensor],
    *,
    input_shapes: Sequence[tuple[int, ...]] | None = None,
    record: bool = True,
) -> tuple[list[Tensor], GradTape]:
    """
    Run `graph` on `inputs`, returning its outputs and the tape that recorded them.

    :param input_shapes: If given, the shapes `inputs` must have.
    :param record: Whether to record the operations for a later `backward`.
    """
    if input_shapes is not None:
        actual = [t.shape for t in inputs]
        if [tuple(s) for s in input_shapes] != actual:
            raise ShapeError(
                f"Input shapes {actual} do not match the graph's {list(input_shapes)}."
            )
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("input", f"tensor {t.name!r} is not finite.")
    tape = GradTape(record=record)
    outputs = list(graph(tape, inputs))
    return outputs, tape


def backward(
    tape: GradTape,
    seeds: Tensor | Mapping[Tensor, ArrayLike],
    params: Sequence[Tensor],
) -> dict[Tensor, FloatArray]:
    """
    Propagate adjoints from `seeds` back through `tape`.

    Non-finite gradients are returned as they are. `sgd_step` rejects them.

    :param seeds: Either a scalar output, which is seeded with `1.0`, or a mapping from outputs to
        their adjoints.
    :param params: The tensors to return gradients for. Tensors that do not influence the seeds get
        an all-zero gradient.
    """
    if not tape.record:
        raise TapeError("Cannot differentiate through a tape created with `record=False`.")
    for rec in tape.records:
        for t, v in zip(rec.inputs, rec.versions):
            if t.version != v:
                raise TapeError(
                    f"Tensor {t.name!r} was modified after {rec.op!r} was recorded;"
                    " run a new forward pass."
                )

    if isinstance(seeds, Tensor):
        if seeds.size != 1:
            raise ShapeError(f"Implicit seed needs a scalar output. Found: {seeds.shape}")
        seeds = {seeds: np.ones_like(seeds.data)}
    adjoints: dict[Tensor, FloatArray] = {}
    for out, seed in seeds.items():
        seed_array = np.array(seed, dtype=np.float64)
        if seed_array.shape != out.shape:
            raise ShapeError(f"Seed of shape {seed_array.shape} for output of shape {out.shape}.")
        adjoints[out] = seed_array

    for rec in reversed(tape.records):
        g = adjoints.pop(rec.output, None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        for t, gt in zip(rec.inputs, rec.backward(g, needs)):
            if gt is None or not t.requires_grad:
                continue
            if t in adjoints:
                adjoints[t] = adjoints[t] + gt
            else:
                adjoints[t] = gt

    result = {}
    for p in params:
        grad = adjoints.get(p)
        result[p] = np.zeros_like(p.data) if grad is None else grad
    return result


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic gradients with central finite differences."""

    errors: Mapping[str, float]
    """Maximum relative error per input tensor."""

    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def check_gradients(
    graph: Graph,
    inputs: Sequence[Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compare `backward` against central finite differences for every element of every input.

    The first output of `graph` must be a scalar. The relative error of one element is
    `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    """
    saved_flags = [t.requires_grad for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
        outputs, tape = forward(graph, inputs)
        analytic = backward(tape, outputs[0], inputs)

        def _evaluate() -> float:
            return float(forward(graph, inputs, record=False)[0][0].data)

        errors = {}
        for i, t in enumerate(inputs):
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                original = flat[j]
                flat[j] = original + step
                f_plus = _evaluate()
                flat[j] = original - step
                f_minus = _evaluate()
                flat[j] = original
                numeric.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * step)
            a = analytic[t]
            denominator = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            errors[t.name or f"input{i}"] = float((np.abs(a - numeric) / denominator).max())
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
    return GradCheckReport(errors, tolerance)
