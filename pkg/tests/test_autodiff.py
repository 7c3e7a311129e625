from collections.abc import Sequence

import numpy as np
import pytest

from surelab import (
    GradTape,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    check_gradients,
    forward,
)
from surelab.acceptance import gradient_check_model


def _rng_tensor(shape: tuple[int, ...], seed: int, name: str) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, name=name)


def test_backward__matmul_sum() -> None:
    x = Tensor(np.arange(6.0).reshape(2, 3), name="x")
    w = _rng_tensor((3, 4), 0, "w")

    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        x, w = inputs
        return [tape.sum(tape.matmul(x, w))]

    outputs, tape = forward(graph, [x, w])
    gradients = backward(tape, outputs[0], [x, w])

    np.testing.assert_allclose(outputs[0].data, (x.data @ w.data).sum())
    np.testing.assert_allclose(gradients[w], x.data.T @ np.ones((2, 4)))
    # `x` does not require a gradient.
    np.testing.assert_array_equal(gradients[x], np.zeros((2, 3)))


def test_backward__shared_input_accumulates() -> None:
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, name="a")
    tape = GradTape()
    out = tape.sum(tape.mul(a, a))

    gradients = backward(tape, out, [a])

    np.testing.assert_allclose(gradients[a], 2.0 * a.data)


def test_backward__explicit_seed() -> None:
    a = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="a")
    tape = GradTape()
    out = tape.scale(a, 3.0)

    gradients = backward(tape, {out: np.array([1.0, 10.0])}, [a])

    np.testing.assert_allclose(gradients[a], [3.0, 30.0])


def test_backward__mutated_input() -> None:
    a = Tensor(np.ones(3), requires_grad=True, name="a")
    tape = GradTape()
    out = tape.sum(tape.mul(a, a))
    a.assign(np.zeros(3))

    with pytest.raises(TapeError):
        backward(tape, out, [a])


def test_backward__no_record() -> None:
    a = Tensor(np.ones(3), requires_grad=True)
    tape = GradTape(record=False)
    out = tape.sum(a)

    assert not out.requires_grad
    assert [] == tape.records
    with pytest.raises(TapeError):
        backward(tape, out, [a])


def test_backward__non_scalar_output() -> None:
    a = Tensor(np.ones(3), requires_grad=True)
    tape = GradTape()
    out = tape.scale(a, 2.0)

    with pytest.raises(ShapeError):
        backward(tape, out, [a])


@pytest.mark.parametrize(
    "shape_a,shape_b",
    [
        ((2, 3), (4, 5)),
        ((3,), (3, 2)),
        ((2, 2, 3), (3, 3, 1)),
    ],
)
def test_matmul__shape_error(shape_a: tuple[int, ...], shape_b: tuple[int, ...]) -> None:
    tape = GradTape()
    with pytest.raises(ShapeError):
        tape.matmul(Tensor(np.ones(shape_a)), Tensor(np.ones(shape_b)))


def test_tensor__assign() -> None:
    t = Tensor(np.zeros((2, 2)), name="t")

    t.assign(np.ones((2, 2)))

    assert 1 == t.version
    np.testing.assert_array_equal(np.ones((2, 2)), t.data)
    with pytest.raises(ShapeError):
        t.assign(np.ones(3))


def test_emit__non_finite() -> None:
    tape = GradTape()
    with pytest.raises(NonFiniteError) as e:
        tape.scale(Tensor(np.array([1e308])), 10.0)
    assert "scale" == e.value.op


def test_forward__non_finite_input() -> None:
    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        return [tape.sum(inputs[0])]

    with pytest.raises(NonFiniteError):
        forward(graph, [Tensor(np.array([np.nan]))])


def test_forward__input_shapes() -> None:
    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        return [tape.sum(inputs[0])]

    with pytest.raises(ShapeError):
        forward(graph, [Tensor(np.ones(3))], input_shapes=[(4,)])


def test_softmax__mask() -> None:
    tape = GradTape()
    mask = np.tril(np.ones((3, 3), dtype=bool))

    probs = tape.softmax(Tensor(np.zeros((3, 3))), mask).data

    np.testing.assert_allclose(probs, [[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [1 / 3, 1 / 3, 1 / 3]])
    with pytest.raises(ShapeError):
        tape.softmax(Tensor(np.zeros((2, 2))), np.array([[True, True], [False, False]]))


def test_cross_entropy__uniform() -> None:
    tape = GradTape()

    loss = tape.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]), reduction="mean")

    np.testing.assert_allclose(loss.data, np.log(4.0))
    with pytest.raises(ShapeError):
        tape.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))


@pytest.mark.parametrize("seed", range(10))
def test_check_gradients__primitives(seed: int) -> None:
    x = _rng_tensor((2, 3, 4), 10 * seed + 1, "x")
    w = _rng_tensor((4, 4), 10 * seed + 2, "w")
    gamma = _rng_tensor((4,), 10 * seed + 3, "gamma")
    beta = _rng_tensor((4,), 10 * seed + 4, "beta")
    table = _rng_tensor((5, 4), 10 * seed + 5, "table")
    ids = np.array([[0, 1, 4], [2, 2, 3]])
    mask = np.tril(np.ones((3, 3), dtype=bool))

    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        x, w, gamma, beta, table = inputs
        h = tape.add(x, tape.embedding(table, ids))
        h = tape.layer_norm(h, gamma, beta)
        h = tape.gelu(tape.matmul(h, w))
        scores = tape.matmul(h, tape.transpose(h))
        attended = tape.matmul(tape.softmax(tape.scale(scores, 0.5), mask), h)
        flat = tape.reshape(tape.transpose(attended, (1, 0, 2)), (6, 4))
        picked = tape.select(flat, (np.array([0, 2, 5]),))
        return [tape.cross_entropy(picked, np.array([1, 0, 3]))]

    report = check_gradients(graph, [x, w, gamma, beta, table])

    assert {"x", "w", "gamma", "beta", "table"} == set(report.errors)
    assert report.passed, report.errors


def test_check_gradients__restores_flags() -> None:
    a = Tensor(np.array([0.5, -1.0]), name="a")

    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        return [tape.sum(tape.mul(inputs[0], inputs[0]))]

    report = check_gradients(graph, [a])

    assert report.passed
    assert not a.requires_grad
    np.testing.assert_array_equal([0.5, -1.0], a.data)


def test_check_gradients__corrupted_derivative() -> None:
    a = Tensor(np.array([0.5, -1.0, 2.0]), name="a")

    def graph(tape: GradTape, inputs: Sequence[Tensor]) -> Sequence[Tensor]:
        (x,) = inputs
        # d(x²)/dx is 2x, not x.
        square = tape._emit(  # pylint: disable=protected-access
            "square", [x], x.data**2, lambda g, needs: (g * x.data,)
        )
        return [tape.sum(square)]

    report = check_gradients(graph, [a])

    assert not report.passed
    assert report.max_error > 1e-1


def test_gradient_check_model() -> None:
    report = gradient_check_model()

    assert report.passed, report.errors
    assert any(name.startswith("fast.") for name in report.errors)
